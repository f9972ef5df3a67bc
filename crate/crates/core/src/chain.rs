//! Continuous-time Markov chain utilities for a frozen generator: invariant
//! measures, uniformized transition matrices, ergodicity diagnostics and
//! exact path sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::model::{GeneratorMatrix, State};

/// Poisson tail mass at which the uniformization series is truncated; below
/// the accumulation of double rounding.
const UNIFORMIZATION_TAIL: f64 = 1e-14;
/// `lambda * t` beyond which the horizon is halved and the result squared,
/// keeping the series short and the Poisson weights away from underflow.
const SQUARING_THRESHOLD: f64 = 64.0;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("generator is not irreducible: {detail}")]
    NotIrreducible { detail: String },
    #[error("horizon must be nonnegative, got {value}")]
    HorizonNegative { value: f64 },
    #[error("state index {state} out of range for {count} states")]
    StateOutOfRange { state: State, count: usize },
}

/// Stationary law of an irreducible generator: `mu Q = 0`, `sum mu_i = 1`,
/// all weights strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantMeasure {
    weights: DVector<f64>,
}

impl InvariantMeasure {
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `sum_i mu_i v_i` for a per-state scalar observable.
    pub fn mean<F: Fn(State) -> f64>(&self, observable: F) -> f64 {
        (0..self.len()).map(|i| self.weights[i] * observable(i)).sum()
    }
}

/// Row-stochastic matrix `P_t = exp(t Q)` at a fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: DMatrix<f64>,
    horizon: f64,
}

impl TransitionMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Half-L1 total variation distance of row `i` from `mu`.
    pub fn row_tv_distance(&self, i: State, mu: &InvariantMeasure) -> f64 {
        0.5 * (0..self.dim())
            .map(|j| (self.entries[(i, j)] - mu.weights()[j]).abs())
            .sum::<f64>()
    }
}

/// One exact chain trajectory on `[0, horizon]`: the initial state, the
/// strictly increasing jump times and the state entered at each jump.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    initial_state: State,
    horizon: f64,
    jump_times: Vec<f64>,
    states: Vec<State>,
}

impl ChainPath {
    pub fn initial_state(&self) -> State {
        self.initial_state
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn states_after_jumps(&self) -> &[State] {
        &self.states
    }

    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    pub fn state_at(&self, t: f64) -> State {
        let idx = self.jump_times.partition_point(|jt| *jt <= t);
        if idx == 0 {
            self.initial_state
        } else {
            self.states[idx - 1]
        }
    }

    pub fn final_state(&self) -> State {
        self.states.last().copied().unwrap_or(self.initial_state)
    }

    /// Exact integral `int_0^horizon f(state_t) dt` of a piecewise-constant
    /// observable along the path.
    pub fn integrate<F: Fn(State) -> f64>(&self, observable: F) -> f64 {
        let mut total = 0.0;
        let mut state = self.initial_state;
        let mut last = 0.0;
        for (jump, next) in self.jump_times.iter().zip(&self.states) {
            total += observable(state) * (jump - last);
            state = *next;
            last = *jump;
        }
        total += observable(state) * (self.horizon - last);
        total
    }

    /// Fraction of `[0, horizon]` spent in state `i`.
    pub fn occupation_fraction(&self, i: State) -> f64 {
        if self.horizon == 0.0 {
            return if self.initial_state == i { 1.0 } else { 0.0 };
        }
        self.integrate(|s| if s == i { 1.0 } else { 0.0 }) / self.horizon
    }
}

/// Solves `mu Q = 0`, `sum mu_i = 1` by replacing the last row of `Q^T` with
/// the all-ones row. Irreducibility is detected numerically: the bordered
/// system must be solvable, the residual small and every weight positive.
pub fn invariant_measure(generator: &GeneratorMatrix) -> Result<InvariantMeasure, ChainError> {
    let m0 = generator.dim();
    let mut system = generator.entries().transpose();
    system.row_mut(m0 - 1).fill(1.0);
    let mut rhs = DVector::zeros(m0);
    rhs[m0 - 1] = 1.0;

    let weights = system.lu().solve(&rhs).ok_or_else(|| ChainError::NotIrreducible {
        detail: "stationary system is singular".into(),
    })?;

    let min = weights.min();
    if !(min > 0.0) {
        return Err(ChainError::NotIrreducible {
            detail: format!("stationary weight not positive: {min}"),
        });
    }
    let mut weights = weights;
    weights /= weights.sum();

    let residual = generator.entries().tr_mul(&weights).amax();
    let tol = 1e-10 * generator.max_exit_rate().max(1.0);
    if residual > tol {
        return Err(ChainError::NotIrreducible {
            detail: format!("stationary residual {residual} exceeds {tol}"),
        });
    }
    Ok(InvariantMeasure { weights })
}

/// `P_t = exp(t Q)` by uniformization.
///
/// With `lambda = max_i |q_ii|` and `M = I + Q / lambda`, the series
/// `sum_k e^{-lambda t} (lambda t)^k / k! M^k` is truncated once the Poisson
/// tail mass drops below 1e-14; every partial sum is entrywise nonnegative.
/// For large `lambda t` the horizon is halved recursively and the result
/// squared. Rows are renormalized to sum to one.
pub fn transition_matrix(generator: &GeneratorMatrix, t: f64) -> Result<TransitionMatrix, ChainError> {
    if !(t >= 0.0) {
        return Err(ChainError::HorizonNegative { value: t });
    }
    let entries = uniformized_exponential(generator, t);
    Ok(TransitionMatrix { entries, horizon: t })
}

fn uniformized_exponential(generator: &GeneratorMatrix, t: f64) -> DMatrix<f64> {
    let m0 = generator.dim();
    let rate = generator.max_exit_rate();
    if rate == 0.0 || t == 0.0 {
        return DMatrix::identity(m0, m0);
    }
    if rate * t > SQUARING_THRESHOLD {
        let half = uniformized_exponential(generator, 0.5 * t);
        let mut squared = &half * &half;
        renormalize_rows(&mut squared);
        return squared;
    }

    let jump_matrix = DMatrix::identity(m0, m0) + generator.entries() / rate;
    let lt = rate * t;
    let mut weight = (-lt).exp();
    let mut cumulative = weight;
    let mut power = DMatrix::identity(m0, m0);
    let mut sum = power.clone() * weight;
    let mut k = 1.0;
    while 1.0 - cumulative > UNIFORMIZATION_TAIL {
        power = &power * &jump_matrix;
        weight *= lt / k;
        cumulative += weight;
        sum += &power * weight;
        k += 1.0;
    }
    renormalize_rows(&mut sum);
    sum
}

fn renormalize_rows(matrix: &mut DMatrix<f64>) {
    for mut row in matrix.row_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
}

/// For each horizon in `t_grid`, the worst-row total variation distance
/// `sup_i ||p_i.(t) - mu||_var` (half-L1 convention).
pub fn ergodicity_probe(
    generator: &GeneratorMatrix,
    t_grid: &[f64],
) -> Result<Vec<f64>, ChainError> {
    let mu = invariant_measure(generator)?;
    t_grid
        .iter()
        .map(|&t| {
            let p = transition_matrix(generator, t)?;
            Ok((0..p.dim()).map(|i| p.row_tv_distance(i, &mu)).fold(0.0, f64::max))
        })
        .collect()
}

/// Smallest power-of-two horizon at which the ergodicity probe drops below
/// `tv_tol`. Used to pick truncation horizons for the cell-problem Monte
/// Carlo estimator.
pub fn mixing_horizon(generator: &GeneratorMatrix, tv_tol: f64) -> Result<f64, ChainError> {
    let mut t = 1.0;
    for _ in 0..40 {
        let tv = ergodicity_probe(generator, &[t])?[0];
        if tv < tv_tol {
            return Ok(t);
        }
        t *= 2.0;
    }
    Err(ChainError::NotIrreducible {
        detail: format!("total variation did not drop below {tv_tol} by horizon {t}"),
    })
}

/// Exact exponential-clock sample of the chain with frozen generator: in
/// state `i` the holding time is `Exp(|q_ii|)` (infinite when `q_ii = 0`) and
/// the next state is `j != i` with probability `q_ij / |q_ii|`.
pub fn sample_chain_frozen<R: Rng + ?Sized>(
    generator: &GeneratorMatrix,
    initial_state: State,
    horizon: f64,
    rng: &mut R,
) -> Result<ChainPath, ChainError> {
    if !(horizon >= 0.0) {
        return Err(ChainError::HorizonNegative { value: horizon });
    }
    if initial_state >= generator.dim() {
        return Err(ChainError::StateOutOfRange {
            state: initial_state,
            count: generator.dim(),
        });
    }
    let mut jump_times = Vec::new();
    let mut states = Vec::new();
    let mut state = initial_state;
    let mut clock = 0.0;
    loop {
        let rate = generator.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        clock += sample_exponential(rate, rng);
        if clock > horizon {
            break;
        }
        match sample_next_state(generator.entries(), state, rate, rng) {
            Some(next) => {
                jump_times.push(clock);
                states.push(next);
                state = next;
            }
            None => break,
        }
    }
    Ok(ChainPath { initial_state, horizon, jump_times, states })
}

/// Allocation-free variant of [`sample_chain_frozen`] returning only the
/// state at the end of the horizon; used by the SDE integrator, which reads
/// the chain at step boundaries only.
pub(crate) fn evolve_frozen_state<R: Rng + ?Sized>(
    generator: &DMatrix<f64>,
    initial_state: State,
    horizon: f64,
    rng: &mut R,
) -> State {
    let mut state = initial_state;
    let mut clock = 0.0;
    loop {
        let rate = (-generator[(state, state)]).max(0.0);
        if rate <= 0.0 {
            return state;
        }
        clock += sample_exponential(rate, rng);
        if clock > horizon {
            return state;
        }
        match sample_next_state(generator, state, rate, rng) {
            Some(next) => state = next,
            None => return state,
        }
    }
}

fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    // random::<f64>() is in [0, 1); flipping keeps the logarithm finite.
    -(1.0 - rng.random::<f64>()).ln() / rate
}

fn sample_next_state<R: Rng + ?Sized>(
    generator: &DMatrix<f64>,
    from: State,
    rate: f64,
    rng: &mut R,
) -> Option<State> {
    let threshold = rng.random::<f64>() * rate;
    let mut cumulative = 0.0;
    let mut last_positive = None;
    for j in 0..generator.nrows() {
        if j == from {
            continue;
        }
        let q = generator[(from, j)];
        if q > 0.0 {
            cumulative += q;
            last_positive = Some(j);
            if threshold < cumulative {
                return Some(j);
            }
        }
    }
    // Off-diagonal sum can undershoot rate by rounding; fall back to the last
    // reachable state. None only if the row had no positive rates at all.
    last_positive
}
