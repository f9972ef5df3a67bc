//! Coefficient bundles for the slow-fast system and their validity checks.
//!
//! A [`SwitchingModel`] collects the homogenization drift `K`, the slow drift
//! `b`, the diffusion `sigma` and the two generator fields `Q` (fast scale)
//! and `Qt` (intermediate scale). Models are supplied through the built-in
//! registry ([`builtin_model`]); user extension is by code, not by config
//! files, which keeps every evaluator auditable.
//!
//! All evaluators must be pure functions of `(x, i)`; everything here is
//! immutable after construction and safe to share across workers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::chain::{invariant_measure, ChainError};

/// Index of a chain state. States are numbered `0..m0`.
pub type State = usize;

/// Tolerance for algebraic identities (row sums, exact rescalings).
pub const ALGEBRAIC_TOL: f64 = 1e-12;
/// Tolerance for checks that go through model evaluators.
pub const EVALUATOR_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("tolerance must be positive, got {tol}")]
    InvalidTolerance { tol: f64 },
    #[error("negative off-diagonal rate at ({row}, {col}): {value}")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} does not sum to zero: {value}")]
    RowSumNonzero { row: usize, value: f64 },
    #[error("eps must lie in (0, 1], got {eps}")]
    EpsilonOutOfRange { eps: f64 },
    #[error("generator dimensions differ: {left}x{left} vs {right}x{right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("unknown model {name:?}; known models: {known:?}")]
    UnknownModel { name: String, known: Vec<&'static str> },
    #[error("invalid parameter for model {model:?}: {message}")]
    InvalidParam { model: String, message: String },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// A conservative generator matrix: nonnegative off-diagonal rates and zero
/// row sums. Construct through [`validate_generator`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    entries: DMatrix<f64>,
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// Rate of leaving state `i`, i.e. `-q_ii` clamped to be nonnegative.
    pub fn exit_rate(&self, i: State) -> f64 {
        (-self.entries[(i, i)]).max(0.0)
    }

    /// Largest exit rate, the uniformization constant.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.dim()).map(|i| self.exit_rate(i)).fold(0.0, f64::max)
    }
}

/// Sum of all off-diagonal rates of a generator (equals minus its trace).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalRate(pub f64);

/// Checks that `entries` is a conservative generator.
///
/// Off-diagonal entries in `[-tol, 0)` are treated as rounding noise and
/// clamped to zero; anything more negative is rejected. Row sums must vanish
/// within `tol`.
pub fn validate_generator(entries: &DMatrix<f64>, tol: f64) -> Result<GeneratorMatrix, ModelError> {
    if !(tol > 0.0) {
        return Err(ModelError::InvalidTolerance { tol });
    }
    if entries.nrows() != entries.ncols() {
        return Err(ModelError::NotSquare { rows: entries.nrows(), cols: entries.ncols() });
    }
    let m0 = entries.nrows();
    for i in 0..m0 {
        for j in 0..m0 {
            if !entries[(i, j)].is_finite() {
                return Err(ModelError::NonFinite { row: i, col: j });
            }
        }
    }
    let mut clamped = entries.clone();
    for i in 0..m0 {
        let mut row_sum = 0.0;
        for j in 0..m0 {
            row_sum += entries[(i, j)];
            if i != j {
                let value = entries[(i, j)];
                if value < -tol {
                    return Err(ModelError::NegativeOffDiagonal { row: i, col: j, value });
                }
                if value < 0.0 {
                    clamped[(i, j)] = 0.0;
                }
            }
        }
        if row_sum.abs() > tol {
            return Err(ModelError::RowSumNonzero { row: i, value: row_sum });
        }
    }
    Ok(GeneratorMatrix { entries: clamped })
}

/// Sum of all off-diagonal rates, `sum_i sum_{j != i} q_ij = -trace`.
pub fn total_rate(generator: &GeneratorMatrix) -> TotalRate {
    let mut total = 0.0;
    let m0 = generator.dim();
    for i in 0..m0 {
        for j in 0..m0 {
            if i != j {
                total += generator.entries[(i, j)];
            }
        }
    }
    TotalRate(total)
}

/// The two-scale generator `eps^{-1} Q + eps^{-1/2} Qt`, computed entrywise.
///
/// Scaling amplifies any residual row-sum noise of the inputs, so the result
/// is re-validated with a correspondingly scaled tolerance.
pub fn effective_generator(
    fast: &GeneratorMatrix,
    mid: &GeneratorMatrix,
    eps: f64,
) -> Result<GeneratorMatrix, ModelError> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(ModelError::EpsilonOutOfRange { eps });
    }
    if fast.dim() != mid.dim() {
        return Err(ModelError::DimensionMismatch { left: fast.dim(), right: mid.dim() });
    }
    let entries = combine_generators(fast.entries(), mid.entries(), eps);
    let scale = eps.recip() + eps.sqrt().recip() + 1.0;
    validate_generator(&entries, ALGEBRAIC_TOL * scale)
}

/// Entrywise `eps^{-1} a + eps^{-1/2} b` without validation; the simulation
/// inner loop uses this on already-validated inputs.
pub(crate) fn combine_generators(fast: &DMatrix<f64>, mid: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let inv = eps.recip();
    let inv_sqrt = eps.sqrt().recip();
    let mut out = fast * inv;
    out.zip_apply(mid, |o, m| *o += inv_sqrt * m);
    out
}

/// Result of evaluating the centering condition `sum_i K(x, i) mu_i = 0`.
#[derive(Debug, Clone)]
pub struct CenteringReport {
    pub value: DVector<f64>,
    pub ok: bool,
}

impl CenteringReport {
    pub fn max_abs(&self) -> f64 {
        self.value.amax()
    }
}

/// Evaluates `sum_i K(x, i) mu^x_i` and compares its sup-norm against `tol`.
pub fn check_centering(
    model: &SwitchingModel,
    x: &DVector<f64>,
    tol: f64,
) -> Result<CenteringReport, ModelError> {
    let generator = model.fast_generator(x)?;
    let mu = invariant_measure(&generator)?;
    let mut value = DVector::zeros(model.slow_dim());
    for i in 0..model.state_count() {
        value.axpy(mu.weights()[i], &model.hom_drift(x, i), 1.0);
    }
    let ok = value.amax() <= tol;
    Ok(CenteringReport { value, ok })
}

type VecField = Arc<dyn Fn(&DVector<f64>, State) -> DVector<f64> + Send + Sync>;
type MatField = Arc<dyn Fn(&DVector<f64>, State) -> DMatrix<f64> + Send + Sync>;
type GenField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type GenJacField = Arc<dyn Fn(&DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;

/// Coefficient bundle of the slow-fast system.
///
/// All evaluators must be total on `R^n x {0..m0}` and pure. The generator
/// fields are validated on every query; analytic Jacobians are optional and
/// finite differences are used downstream when they are absent.
#[derive(Clone)]
pub struct SwitchingModel {
    name: String,
    slow_dim: usize,
    noise_dim: usize,
    state_count: usize,
    hom_drift: VecField,
    drift: VecField,
    diffusion: MatField,
    fast_generator: GenField,
    mid_generator: GenField,
    /// Per state: n x n matrix with entry `(l, k) = d K^l / d x_k`.
    hom_drift_jacobian: Option<MatField>,
    /// Per coordinate `k`: the m0 x m0 matrix `d Q / d x_k`.
    fast_generator_jacobian: Option<GenJacField>,
}

impl fmt::Debug for SwitchingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchingModel")
            .field("name", &self.name)
            .field("slow_dim", &self.slow_dim)
            .field("noise_dim", &self.noise_dim)
            .field("state_count", &self.state_count)
            .field("analytic_jacobians", &self.has_analytic_jacobians())
            .finish()
    }
}

impl SwitchingModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        slow_dim: usize,
        noise_dim: usize,
        state_count: usize,
        hom_drift: VecField,
        drift: VecField,
        diffusion: MatField,
        fast_generator: GenField,
        mid_generator: GenField,
    ) -> Self {
        assert!(slow_dim >= 1 && noise_dim >= 1 && state_count >= 2);
        Self {
            name: name.into(),
            slow_dim,
            noise_dim,
            state_count,
            hom_drift,
            drift,
            diffusion,
            fast_generator,
            mid_generator,
            hom_drift_jacobian: None,
            fast_generator_jacobian: None,
        }
    }

    pub fn with_hom_drift_jacobian(mut self, jacobian: MatField) -> Self {
        self.hom_drift_jacobian = Some(jacobian);
        self
    }

    pub fn with_fast_generator_jacobian(mut self, jacobian: GenJacField) -> Self {
        self.fast_generator_jacobian = Some(jacobian);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn slow_dim(&self) -> usize {
        self.slow_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    /// Homogenization drift `K(x, i)`.
    pub fn hom_drift(&self, x: &DVector<f64>, i: State) -> DVector<f64> {
        (self.hom_drift)(x, i)
    }

    /// `K(x, .)` as an `m0 x n` matrix with one row per state.
    pub fn hom_drift_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.state_count, self.slow_dim);
        for i in 0..self.state_count {
            out.row_mut(i).copy_from(&self.hom_drift(x, i).transpose());
        }
        out
    }

    /// Slow drift `b(x, i)`.
    pub fn drift(&self, x: &DVector<f64>, i: State) -> DVector<f64> {
        (self.drift)(x, i)
    }

    /// Diffusion coefficient `sigma(x, i)`, an `n x d` matrix.
    pub fn diffusion(&self, x: &DVector<f64>, i: State) -> DMatrix<f64> {
        (self.diffusion)(x, i)
    }

    /// Fast generator `Q(x)`, validated on every query.
    pub fn fast_generator(&self, x: &DVector<f64>) -> Result<GeneratorMatrix, ModelError> {
        validate_generator(&(self.fast_generator)(x), EVALUATOR_TOL)
    }

    /// Intermediate-scale generator `Qt(x)`, validated on every query.
    pub fn mid_generator(&self, x: &DVector<f64>) -> Result<GeneratorMatrix, ModelError> {
        validate_generator(&(self.mid_generator)(x), EVALUATOR_TOL)
    }

    pub(crate) fn fast_generator_raw(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.fast_generator)(x)
    }

    pub(crate) fn mid_generator_raw(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.mid_generator)(x)
    }

    /// Analytic `d K(x, i) / d x` when the model carries one.
    pub fn hom_drift_jacobian(&self, x: &DVector<f64>, i: State) -> Option<DMatrix<f64>> {
        self.hom_drift_jacobian.as_ref().map(|j| j(x, i))
    }

    /// Analytic `d Q(x) / d x_k` per coordinate when the model carries one.
    pub fn fast_generator_jacobian(&self, x: &DVector<f64>) -> Option<Vec<DMatrix<f64>>> {
        self.fast_generator_jacobian.as_ref().map(|j| j(x))
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.hom_drift_jacobian.is_some() && self.fast_generator_jacobian.is_some()
    }
}

const BUILTIN_NAMES: [&str; 5] = [
    "paper_example",
    "pure_diffusion",
    "state_dependent_demo",
    "broken_rowsum_demo",
    "non_centered_demo",
];

/// Names accepted by [`builtin_model`]. The `*_demo` entries ending in
/// `broken_rowsum` / `non_centered` intentionally violate the assumptions and
/// exist to exercise failure reporting.
pub fn builtin_model_names() -> &'static [&'static str] {
    &BUILTIN_NAMES
}

/// Built-in models that satisfy all assumptions; used by property suites.
pub fn well_formed_builtin_names() -> &'static [&'static str] {
    &BUILTIN_NAMES[..3]
}

/// Instantiates a model from the built-in registry.
///
/// * `paper_example` — 1-D, two states, `K = (1, -1)`, `b = 0`, `sigma = 1`,
///   symmetric unit-rate `Q`, `Qt = 0`. Its averaged equation is pure
///   diffusion with variance coefficient 2.
/// * `pure_diffusion` — `K = 0`, `Qt = 0`, constant drift and diagonal
///   diffusion; the averaged equation equals the original one. Parameters:
///   `n` (dimension, default 1), `drift` (per-coordinate constant, default 0),
///   `sigma` (diagonal scale, default 1).
/// * `state_dependent_demo` — 1-D, three states, smooth bounded
///   state-dependent `Q(x)`, nonzero `Qt(x)`, centered `K` by construction,
///   with analytic Jacobians.
/// * `broken_rowsum_demo`, `non_centered_demo` — deliberately invalid models
///   for exercising validation failures.
pub fn builtin_model(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<SwitchingModel, ModelError> {
    match name {
        "paper_example" => {
            reject_params(name, params)?;
            Ok(paper_example())
        }
        "pure_diffusion" => pure_diffusion(params),
        "state_dependent_demo" => {
            reject_params(name, params)?;
            Ok(state_dependent_demo())
        }
        "broken_rowsum_demo" => {
            reject_params(name, params)?;
            Ok(broken_rowsum_demo())
        }
        "non_centered_demo" => {
            reject_params(name, params)?;
            Ok(non_centered_demo())
        }
        _ => Err(ModelError::UnknownModel { name: name.to_owned(), known: BUILTIN_NAMES.to_vec() }),
    }
}

fn reject_params(model: &str, params: &BTreeMap<String, f64>) -> Result<(), ModelError> {
    if let Some(key) = params.keys().next() {
        return Err(ModelError::InvalidParam {
            model: model.to_owned(),
            message: format!("model takes no parameters, got {key:?}"),
        });
    }
    Ok(())
}

fn symmetric_two_state() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])
}

fn paper_example() -> SwitchingModel {
    let hom_drift: VecField =
        Arc::new(|_x, i| DVector::from_element(1, if i == 0 { 1.0 } else { -1.0 }));
    let drift: VecField = Arc::new(|_x, _i| DVector::zeros(1));
    let diffusion: MatField = Arc::new(|_x, _i| DMatrix::identity(1, 1));
    let fast: GenField = Arc::new(|_x| symmetric_two_state());
    let mid: GenField = Arc::new(|_x| DMatrix::zeros(2, 2));
    SwitchingModel::new("paper_example", 1, 1, 2, hom_drift, drift, diffusion, fast, mid)
        .with_hom_drift_jacobian(Arc::new(|_x, _i| DMatrix::zeros(1, 1)))
        .with_fast_generator_jacobian(Arc::new(|_x| vec![DMatrix::zeros(2, 2)]))
}

fn pure_diffusion(params: &BTreeMap<String, f64>) -> Result<SwitchingModel, ModelError> {
    let mut dim = 1usize;
    let mut drift_value = 0.0;
    let mut sigma_scale = 1.0;
    for (key, value) in params {
        match key.as_str() {
            "n" => {
                if value.fract() != 0.0 || *value < 1.0 || *value > 64.0 {
                    return Err(ModelError::InvalidParam {
                        model: "pure_diffusion".into(),
                        message: format!("n must be an integer in [1, 64], got {value}"),
                    });
                }
                dim = *value as usize;
            }
            "drift" => drift_value = *value,
            "sigma" => {
                if !(*value > 0.0) {
                    return Err(ModelError::InvalidParam {
                        model: "pure_diffusion".into(),
                        message: format!("sigma must be positive, got {value}"),
                    });
                }
                sigma_scale = *value;
            }
            other => {
                return Err(ModelError::InvalidParam {
                    model: "pure_diffusion".into(),
                    message: format!("unknown parameter {other:?}"),
                })
            }
        }
    }
    let n = dim;
    let hom_drift: VecField = Arc::new(move |_x, _i| DVector::zeros(n));
    let drift: VecField = Arc::new(move |_x, _i| DVector::from_element(n, drift_value));
    let diffusion: MatField = Arc::new(move |_x, _i| DMatrix::identity(n, n) * sigma_scale);
    let fast: GenField = Arc::new(|_x| symmetric_two_state());
    let mid: GenField = Arc::new(|_x| DMatrix::zeros(2, 2));
    Ok(
        SwitchingModel::new("pure_diffusion", n, n, 2, hom_drift, drift, diffusion, fast, mid)
            .with_hom_drift_jacobian(Arc::new(move |_x, _i| DMatrix::zeros(n, n)))
            .with_fast_generator_jacobian(Arc::new(move |_x| vec![DMatrix::zeros(2, 2); n])),
    )
}

/// Birth-death rates of the demo chain and their x-derivatives.
///
/// Upward rates `u0, u1` are smooth, bounded and bounded away from zero;
/// downward rates are 1. Detailed balance gives the closed-form invariant
/// measure `mu ~ (1, u0, u0 u1)` used to center the homogenization drift.
fn demo_rates(x: f64) -> (f64, f64, f64, f64) {
    let t0 = x.tanh();
    let t1 = (0.5 * x).tanh();
    let u0 = 1.0 + 0.25 * t0;
    let u1 = 1.0 + 0.25 * t1;
    let du0 = 0.25 * (1.0 - t0 * t0);
    let du1 = 0.125 * (1.0 - t1 * t1);
    (u0, u1, du0, du1)
}

fn demo_generator(x: f64) -> DMatrix<f64> {
    let (u0, u1, _, _) = demo_rates(x);
    DMatrix::from_row_slice(
        3,
        3,
        &[-u0, u0, 0.0, 1.0, -(1.0 + u1), u1, 0.0, 1.0, -1.0],
    )
}

/// Closed-form invariant measure of the demo generator and its derivative.
fn demo_measure(x: f64) -> ([f64; 3], [f64; 3]) {
    let (u0, u1, du0, du1) = demo_rates(x);
    let weights = [1.0, u0, u0 * u1];
    let dweights = [0.0, du0, du0 * u1 + u0 * du1];
    let total: f64 = weights.iter().sum();
    let dtotal: f64 = dweights.iter().sum();
    let mut mu = [0.0; 3];
    let mut dmu = [0.0; 3];
    for i in 0..3 {
        mu[i] = weights[i] / total;
        dmu[i] = (dweights[i] * total - weights[i] * dtotal) / (total * total);
    }
    (mu, dmu)
}

const DEMO_STATE_WEIGHTS: [f64; 3] = [1.0, -0.3, -0.5];

fn demo_hom_drift(x: f64, i: State) -> f64 {
    let (mu, _) = demo_measure(x);
    let mean: f64 = (0..3).map(|j| mu[j] * DEMO_STATE_WEIGHTS[j]).sum();
    let window = 1.0 + 0.5 * x.sin();
    (DEMO_STATE_WEIGHTS[i] - mean) * window
}

fn demo_hom_drift_derivative(x: f64, i: State) -> f64 {
    let (mu, dmu) = demo_measure(x);
    let mean: f64 = (0..3).map(|j| mu[j] * DEMO_STATE_WEIGHTS[j]).sum();
    let dmean: f64 = (0..3).map(|j| dmu[j] * DEMO_STATE_WEIGHTS[j]).sum();
    let window = 1.0 + 0.5 * x.sin();
    let dwindow = 0.5 * x.cos();
    (DEMO_STATE_WEIGHTS[i] - mean) * dwindow - dmean * window
}

fn state_dependent_demo() -> SwitchingModel {
    let hom_drift: VecField =
        Arc::new(|x, i| DVector::from_element(1, demo_hom_drift(x[0], i)));
    let drift: VecField =
        Arc::new(|x, i| DVector::from_element(1, -0.4 * x[0] + 0.1 * (i as f64 - 1.0)));
    let diffusion: MatField = Arc::new(|x, i| {
        DMatrix::from_element(1, 1, 1.0 + 0.2 / (1.0 + x[0] * x[0]) + 0.05 * i as f64)
    });
    let fast: GenField = Arc::new(|x| demo_generator(x[0]));
    let mid: GenField = Arc::new(|x| {
        let scale = 0.5 + 0.25 * x[0].tanh();
        DMatrix::from_row_slice(
            3,
            3,
            &[-1.0, 1.0, 0.0, 0.5, -1.0, 0.5, 0.0, 1.0, -1.0],
        ) * scale
    });
    let hom_jac: MatField =
        Arc::new(|x, i| DMatrix::from_element(1, 1, demo_hom_drift_derivative(x[0], i)));
    let fast_jac: GenJacField = Arc::new(|x| {
        let (_, _, du0, du1) = demo_rates(x[0]);
        vec![DMatrix::from_row_slice(
            3,
            3,
            &[-du0, du0, 0.0, 0.0, -du1, du1, 0.0, 0.0, 0.0],
        )]
    });
    SwitchingModel::new("state_dependent_demo", 1, 1, 3, hom_drift, drift, diffusion, fast, mid)
        .with_hom_drift_jacobian(hom_jac)
        .with_fast_generator_jacobian(fast_jac)
}

fn broken_rowsum_demo() -> SwitchingModel {
    let hom_drift: VecField = Arc::new(|_x, _i| DVector::zeros(1));
    let drift: VecField = Arc::new(|_x, _i| DVector::zeros(1));
    let diffusion: MatField = Arc::new(|_x, _i| DMatrix::identity(1, 1));
    let fast: GenField = Arc::new(|_x| DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 1.0, -1.0]));
    let mid: GenField = Arc::new(|_x| DMatrix::zeros(2, 2));
    SwitchingModel::new("broken_rowsum_demo", 1, 1, 2, hom_drift, drift, diffusion, fast, mid)
}

fn non_centered_demo() -> SwitchingModel {
    let hom_drift: VecField =
        Arc::new(|_x, i| DVector::from_element(1, if i == 0 { 1.0 } else { 0.0 }));
    let drift: VecField = Arc::new(|_x, _i| DVector::zeros(1));
    let diffusion: MatField = Arc::new(|_x, _i| DMatrix::identity(1, 1));
    let fast: GenField = Arc::new(|_x| symmetric_two_state());
    let mid: GenField = Arc::new(|_x| DMatrix::zeros(2, 2));
    SwitchingModel::new("non_centered_demo", 1, 1, 2, hom_drift, drift, diffusion, fast, mid)
}
