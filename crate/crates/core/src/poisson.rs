//! The cell problem `-Q(x) phi(x, .) = K(x, .)` solved exactly by linear
//! algebra, cross-checked against the integral representation
//! `phi(x, i) = int_0^inf E K(x, a_t^{x,i}) dt` by Monte Carlo, and the
//! x-Jacobian of the solution.
//!
//! The solution of the cell problem is unique only up to a constant per
//! column; the canonical gauge used throughout is mu-centering,
//! `sum_i mu_i phi(i, l) = 0`, which is exactly the gauge of the integral
//! representation (whose mu-average vanishes because the data is centered).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{invariant_measure, sample_chain_frozen, ChainError, InvariantMeasure};
use crate::model::{GeneratorMatrix, ModelError, State, SwitchingModel};
use crate::rng::{StreamFactory, PURPOSE_PHI_MC};
use crate::sde::MonteCarloEstimate;

/// Acceptable centering defect of the right-hand side.
const DATA_CENTERING_TOL: f64 = 1e-9;
/// Required residual and solution-centering accuracy of the linear solve.
const SOLVE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PoissonError {
    #[error("column {column} of the data is not centered: mu . K = {value}")]
    NotCentered { column: usize, value: f64 },
    #[error("cell-problem system is singular or ill-conditioned: {detail}")]
    SingularSystem { detail: String },
    #[error("finite-difference step {step} produced non-finite values")]
    StepTooSmall { step: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// The mu-centered cell-problem solution at a fixed slow state: an `m0 x n`
/// matrix whose column `l` solves `-Q phi^l = K^l` with `mu . phi^l = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    phi: DMatrix<f64>,
    residual: f64,
    centering_defect: f64,
}

impl PoissonSolution {
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `||Q phi + K||_max` achieved by the solve.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// `max_l |mu . phi^l|` achieved by the solve.
    pub fn centering_defect(&self) -> f64 {
        self.centering_defect
    }

    pub fn state_count(&self) -> usize {
        self.phi.nrows()
    }

    pub fn slow_dim(&self) -> usize {
        self.phi.ncols()
    }
}

/// Partial derivatives of the solution: `partial(k)[(i, l)] = d phi^l(x, i) / d x_k`,
/// in the same mu-centered gauge as [`PoissonSolution`].
#[derive(Debug, Clone, PartialEq)]
pub struct PhiJacobian {
    per_coordinate: Vec<DMatrix<f64>>,
}

impl PhiJacobian {
    pub fn partial(&self, k: usize) -> &DMatrix<f64> {
        &self.per_coordinate[k]
    }

    pub fn slow_dim(&self) -> usize {
        self.per_coordinate.len()
    }

    /// `sum_k d phi^l(x, i) / d x_k * v_k` for all `(i, l)` at once.
    pub fn contract(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.per_coordinate[0].clone() * v[0];
        for k in 1..self.per_coordinate.len() {
            out += &self.per_coordinate[k] * v[k];
        }
        out
    }
}

/// Solves the bordered system `{-Q y = rhs, mu . y = 0}` for every column of
/// `rhs` at once. The border absorbs any residual non-centering of the data
/// into a slack variable that must come out at rounding level.
fn solve_centered(
    generator: &GeneratorMatrix,
    mu: &InvariantMeasure,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, PoissonError> {
    let m0 = generator.dim();
    let cols = rhs.ncols();
    let mut system = DMatrix::zeros(m0 + 1, m0 + 1);
    system.view_mut((0, 0), (m0, m0)).copy_from(&(-generator.entries()));
    for i in 0..m0 {
        system[(i, m0)] = 1.0;
        system[(m0, i)] = mu.weights()[i];
    }
    let mut padded = DMatrix::zeros(m0 + 1, cols);
    padded.view_mut((0, 0), (m0, cols)).copy_from(rhs);
    let solution = system
        .lu()
        .solve(&padded)
        .ok_or_else(|| PoissonError::SingularSystem { detail: "bordered LU failed".into() })?;
    Ok(solution.view((0, 0), (m0, cols)).into_owned())
}

/// Solves `-Q(x) phi^l = K^l` column by column with mu-centering.
///
/// Requires the data to be centered (`|mu . K^l| <= 1e-9` per column) and
/// verifies that the residual `||Q phi + K||_max` and the centering defect
/// stay below 1e-10.
pub fn solve_cell_problem(
    generator: &GeneratorMatrix,
    data: &DMatrix<f64>,
    mu: &InvariantMeasure,
) -> Result<PoissonSolution, PoissonError> {
    for l in 0..data.ncols() {
        let value = mu.weights().dot(&data.column(l).into_owned());
        if value.abs() > DATA_CENTERING_TOL {
            return Err(PoissonError::NotCentered { column: l, value });
        }
    }
    let phi = solve_centered(generator, mu, data)?;

    let residual = (generator.entries() * &phi + data).amax();
    let centering_defect = (0..phi.ncols())
        .map(|l| mu.weights().dot(&phi.column(l).into_owned()).abs())
        .fold(0.0, f64::max);
    let scale = data.amax().max(1.0);
    if residual > SOLVE_TOL * scale || centering_defect > SOLVE_TOL * scale {
        return Err(PoissonError::SingularSystem {
            detail: format!("residual {residual}, centering defect {centering_defect}"),
        });
    }
    Ok(PoissonSolution { phi, residual, centering_defect })
}

/// Monte Carlo estimate of the truncated integral representation
/// `int_0^{t_max} E K^l(x, a_t^{x,i}) dt` from exact chain paths with exact
/// piecewise-constant time integration.
///
/// `t_max` should be chosen so that the ergodicity probe at `t_max` is below
/// 1e-8 (see [`crate::chain::mixing_horizon`]); the truncation bias is then
/// of that order. Replicas use independent streams derived from
/// `(seed, replica)` and parallelize deterministically.
pub fn phi_mc_estimate(
    model: &SwitchingModel,
    x: &DVector<f64>,
    initial_state: State,
    column: usize,
    t_max: f64,
    replicas: usize,
    seed: u64,
) -> Result<MonteCarloEstimate, PoissonError> {
    let generator = model.fast_generator(x)?;
    let data: Vec<f64> =
        (0..model.state_count()).map(|i| model.hom_drift(x, i)[column]).collect();
    let factory = StreamFactory::new(seed);
    let values: Result<Vec<f64>, ChainError> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = factory.stream(PURPOSE_PHI_MC, r as u64);
            let path = sample_chain_frozen(&generator, initial_state, t_max, &mut rng)?;
            Ok(path.integrate(|state| data[state]))
        })
        .collect();
    Ok(MonteCarloEstimate::from_samples(&values?))
}

/// Default central-difference step for [`phi_jacobian`].
pub fn default_fd_step(x: &DVector<f64>) -> f64 {
    1e-6 * (1.0 + x.norm())
}

/// The x-Jacobian of the cell-problem solution.
///
/// When the model carries analytic `dK` and `dQ`, differentiates the cell
/// problem: `-Q d_k phi^l = d_k K^l + (d_k Q) phi^l`, projecting the
/// right-hand side onto the range of `Q` (its mu-average is subtracted; for
/// exact data it already vanishes) and mu-centering the solution. Otherwise
/// falls back to central finite differences of [`solve_cell_problem`] with
/// step `fd_step`, re-gauged to mu(x)-centering so both routes agree.
pub fn phi_jacobian(
    model: &SwitchingModel,
    x: &DVector<f64>,
    fd_step: Option<f64>,
) -> Result<PhiJacobian, PoissonError> {
    let n = model.slow_dim();
    let generator = model.fast_generator(x)?;
    let mu = invariant_measure(&generator)?;
    let data = model.hom_drift_matrix(x);
    let solution = solve_cell_problem(&generator, &data, &mu)?;

    if model.has_analytic_jacobians() {
        let generator_partials = model
            .fast_generator_jacobian(x)
            .expect("analytic jacobians checked above");
        let mut per_coordinate = Vec::with_capacity(n);
        for (k, generator_partial) in generator_partials.iter().enumerate() {
            let m0 = model.state_count();
            let mut rhs = DMatrix::zeros(m0, n);
            for i in 0..m0 {
                let drift_partial = model
                    .hom_drift_jacobian(x, i)
                    .expect("analytic jacobians checked above");
                for l in 0..n {
                    rhs[(i, l)] = drift_partial[(l, k)];
                }
            }
            rhs += generator_partial * solution.phi();
            // Compatibility projection: subtract the mu-average per column.
            for l in 0..n {
                let mean = mu.weights().dot(&rhs.column(l).into_owned());
                for i in 0..m0 {
                    rhs[(i, l)] -= mean;
                }
            }
            per_coordinate.push(solve_centered(&generator, &mu, &rhs)?);
        }
        return Ok(PhiJacobian { per_coordinate });
    }

    let step = fd_step.unwrap_or_else(|| default_fd_step(x));
    let mut per_coordinate = Vec::with_capacity(n);
    for k in 0..n {
        let mut x_plus = x.clone();
        x_plus[k] += step;
        let mut x_minus = x.clone();
        x_minus[k] -= step;
        let plus = solve_at(model, &x_plus)?;
        let minus = solve_at(model, &x_minus)?;
        let mut diff = (plus.phi() - minus.phi()) / (2.0 * step);
        if diff.iter().any(|v| !v.is_finite()) {
            return Err(PoissonError::StepTooSmall { step });
        }
        // Central differences inherit the gauges at x +- step; project back
        // onto the mu(x)-centered gauge.
        for l in 0..n {
            let mean = mu.weights().dot(&diff.column(l).into_owned());
            for i in 0..model.state_count() {
                diff[(i, l)] -= mean;
            }
        }
        per_coordinate.push(diff);
    }
    Ok(PhiJacobian { per_coordinate })
}

/// Convenience: invariant measure + cell problem at one slow state.
pub(crate) fn solve_at(
    model: &SwitchingModel,
    x: &DVector<f64>,
) -> Result<PoissonSolution, PoissonError> {
    let generator = model.fast_generator(x)?;
    let mu = invariant_measure(&generator)?;
    let data = model.hom_drift_matrix(x);
    solve_cell_problem(&generator, &data, &mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ergodicity_probe, mixing_horizon};
    use crate::model::{builtin_model, validate_generator, well_formed_builtin_names};
    use rand::Rng;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn paper_parts() -> (GeneratorMatrix, DMatrix<f64>, InvariantMeasure) {
        let g = validate_generator(&DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]), 1e-12)
            .unwrap();
        let mu = invariant_measure(&g).unwrap();
        let data = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        (g, data, mu)
    }

    #[test]
    fn paper_solution_is_plus_minus_half() {
        let (g, data, mu) = paper_parts();
        let solution = solve_cell_problem(&g, &data, &mu).unwrap();
        assert!((solution.phi()[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((solution.phi()[(1, 0)] + 0.5).abs() < 1e-12);
        assert!(solution.residual() <= 1e-10);
        assert!(solution.centering_defect() <= 1e-10);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let (g, _, mu) = paper_parts();
        let data = DMatrix::zeros(2, 1);
        let solution = solve_cell_problem(&g, &data, &mu).unwrap();
        assert_eq!(solution.phi().amax(), 0.0);
    }

    #[test]
    fn non_centered_data_is_rejected() {
        let (g, _, mu) = paper_parts();
        let data = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        match solve_cell_problem(&g, &data, &mu) {
            Err(PoissonError::NotCentered { column: 0, value }) => {
                assert!((value - 0.5).abs() < 1e-12)
            }
            other => panic!("expected NotCentered, got {other:?}"),
        }
    }

    /// Simpson quadrature of `int_0^T exp(t Q) K dt` with the integrand
    /// propagated by RK4 on `Y' = Q Y`; an independent route to the solution.
    fn quadrature_oracle(generator: &GeneratorMatrix, data: &DMatrix<f64>) -> DMatrix<f64> {
        let probe = ergodicity_probe(generator, &[1.0, 2.0]).unwrap();
        let gap = (probe[0] / probe[1]).ln();
        let horizon = (60.0 / gap).clamp(10.0, 200.0);
        let step = 1e-3;
        let mut intervals = (horizon / step).ceil() as usize;
        if intervals % 2 == 1 {
            intervals += 1;
        }
        let h = horizon / intervals as f64;
        let q = generator.entries();
        let mut integrand = data.clone();
        let mut total = integrand.clone(); // Simpson weight 1 at t = 0
        for idx in 1..=intervals {
            let k1 = q * &integrand;
            let k2 = q * (&integrand + &k1 * (h / 2.0));
            let k3 = q * (&integrand + &k2 * (h / 2.0));
            let k4 = q * (&integrand + &k3 * h);
            integrand += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            let weight = if idx == intervals {
                1.0
            } else if idx % 2 == 1 {
                4.0
            } else {
                2.0
            };
            total += &integrand * weight;
        }
        total * (h / 3.0)
    }

    #[test]
    fn demo_solution_matches_quadrature_oracle() {
        let model = builtin_model("state_dependent_demo", &BTreeMap::new()).unwrap();
        let x = DVector::zeros(1);
        let generator = model.fast_generator(&x).unwrap();
        let mu = invariant_measure(&generator).unwrap();
        let data = model.hom_drift_matrix(&x);
        let solution = solve_cell_problem(&generator, &data, &mu).unwrap();
        let oracle = quadrature_oracle(&generator, &data);
        assert!(
            (solution.phi() - oracle).amax() < 1e-6,
            "linear solve and quadrature disagree: {:?} vs {:?}",
            solution.phi(),
            oracle
        );
    }

    #[test]
    fn mc_estimate_recovers_paper_value() {
        let model = builtin_model("paper_example", &BTreeMap::new()).unwrap();
        let x = DVector::zeros(1);
        let generator = model.fast_generator(&x).unwrap();
        let t_max = mixing_horizon(&generator, 1e-8).unwrap();
        let estimate = phi_mc_estimate(&model, &x, 0, 0, t_max, 4000, 101).unwrap();
        assert!(
            (estimate.mean - 0.5).abs() < 3.0 * estimate.std_err,
            "{} vs 0.5 (3se={})",
            estimate.mean,
            3.0 * estimate.std_err
        );
    }

    #[test]
    fn mc_estimate_zero_drift_is_exact() {
        let model = builtin_model("pure_diffusion", &BTreeMap::new()).unwrap();
        let estimate =
            phi_mc_estimate(&model, &DVector::zeros(1), 0, 0, 8.0, 1000, 7).unwrap();
        assert_eq!(estimate.mean, 0.0);
        assert_eq!(estimate.std_err, 0.0);
    }

    #[test]
    fn mc_truncation_bias_matches_closed_form() {
        // With the paper generator, E K(a_t) from state 0 equals e^{-2t}, so
        // truncating the integral at t_max leaves a bias of e^{-2 t_max} / 2.
        let model = builtin_model("paper_example", &BTreeMap::new()).unwrap();
        let t_max = 1.0;
        let estimate =
            phi_mc_estimate(&model, &DVector::zeros(1), 0, 0, t_max, 20000, 13).unwrap();
        let bias = (-2.0 * t_max).exp() / 2.0;
        assert!(
            (estimate.mean + bias - 0.5).abs() < 3.0 * estimate.std_err,
            "{} + {} vs 0.5 (3se={})",
            estimate.mean,
            bias,
            3.0 * estimate.std_err
        );
    }

    #[test]
    fn mc_agrees_with_linear_solve_on_demo() {
        let model = builtin_model("state_dependent_demo", &BTreeMap::new()).unwrap();
        let mut rng = StreamFactory::new(2024).stream(0, 0);
        for trial in 0..5 {
            let x = DVector::from_element(1, 3.0 * rng.random::<f64>() - 1.5);
            let i = rng.random_range(0..3);
            let generator = model.fast_generator(&x).unwrap();
            let mu = invariant_measure(&generator).unwrap();
            let data = model.hom_drift_matrix(&x);
            let solution = solve_cell_problem(&generator, &data, &mu).unwrap();
            let t_max = mixing_horizon(&generator, 1e-8).unwrap();
            let estimate =
                phi_mc_estimate(&model, &x, i, 0, t_max, 3000, 500 + trial).unwrap();
            let exact = solution.phi()[(i, 0)];
            assert!(
                (estimate.mean - exact).abs() < 3.0 * estimate.std_err,
                "trial {trial}: {} vs {} (3se={})",
                estimate.mean,
                exact,
                3.0 * estimate.std_err
            );
        }
    }

    #[test]
    fn jacobian_vanishes_for_constant_coefficients() {
        let model = builtin_model("paper_example", &BTreeMap::new()).unwrap();
        let jac = phi_jacobian(&model, &DVector::zeros(1), None).unwrap();
        assert!(jac.partial(0).amax() < 1e-12);

        // Same through the finite-difference route.
        let stripped = SwitchingModel::new(
            "paper_example_no_jac",
            1,
            1,
            2,
            Arc::new(|_x, i| DVector::from_element(1, if i == 0 { 1.0 } else { -1.0 })),
            Arc::new(|_x, _i| DVector::zeros(1)),
            Arc::new(|_x, _i| DMatrix::identity(1, 1)),
            Arc::new(|_x| DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])),
            Arc::new(|_x| DMatrix::zeros(2, 2)),
        );
        let jac = phi_jacobian(&stripped, &DVector::zeros(1), None).unwrap();
        assert!(jac.partial(0).amax() < 1e-9);
    }

    #[test]
    fn jacobian_of_linear_data_solves_differentiated_system() {
        // Constant Q with K linear in x: d_x phi equals the cell solution of
        // the slope, by differentiating the linear system by hand.
        let slope = [0.3, -0.3];
        let linear_model = SwitchingModel::new(
            "linear_drift",
            1,
            1,
            2,
            Arc::new(move |x: &DVector<f64>, i: usize| {
                DVector::from_element(1, slope[i] * x[0] + if i == 0 { 1.0 } else { -1.0 })
            }),
            Arc::new(|_x, _i| DVector::zeros(1)),
            Arc::new(|_x, _i| DMatrix::identity(1, 1)),
            Arc::new(|_x| DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])),
            Arc::new(|_x| DMatrix::zeros(2, 2)),
        );
        let x = DVector::from_element(1, 0.4);
        let generator = linear_model.fast_generator(&x).unwrap();
        let mu = invariant_measure(&generator).unwrap();
        let slope_data = DMatrix::from_row_slice(2, 1, &[slope[0], slope[1]]);
        let expected = solve_cell_problem(&generator, &slope_data, &mu).unwrap();

        // Finite-difference route (no analytic jacobians registered).
        let fd = phi_jacobian(&linear_model, &x, None).unwrap();
        assert!((fd.partial(0) - expected.phi()).amax() < 1e-7);

        // Analytic route.
        let analytic_model = linear_model
            .with_hom_drift_jacobian(Arc::new(move |_x, i| DMatrix::from_element(1, 1, slope[i])))
            .with_fast_generator_jacobian(Arc::new(|_x| vec![DMatrix::zeros(2, 2)]));
        let analytic = phi_jacobian(&analytic_model, &x, None).unwrap();
        assert!((analytic.partial(0) - expected.phi()).amax() < 1e-12);
    }

    #[test]
    fn analytic_and_fd_jacobians_agree_on_demo() {
        let model = builtin_model("state_dependent_demo", &BTreeMap::new()).unwrap();
        let stripped = SwitchingModel::new(
            "demo_no_jac",
            1,
            1,
            3,
            {
                let m = model.clone();
                Arc::new(move |x: &DVector<f64>, i: usize| m.hom_drift(x, i))
            },
            {
                let m = model.clone();
                Arc::new(move |x: &DVector<f64>, i: usize| m.drift(x, i))
            },
            {
                let m = model.clone();
                Arc::new(move |x: &DVector<f64>, i: usize| m.diffusion(x, i))
            },
            {
                let m = model.clone();
                Arc::new(move |x: &DVector<f64>| m.fast_generator_raw(x))
            },
            {
                let m = model.clone();
                Arc::new(move |x: &DVector<f64>| m.mid_generator_raw(x))
            },
        );
        for x in [-1.2, 0.0, 0.8] {
            let xv = DVector::from_element(1, x);
            let analytic = phi_jacobian(&model, &xv, None).unwrap();
            let fd = phi_jacobian(&stripped, &xv, None).unwrap();
            assert!(
                (analytic.partial(0) - fd.partial(0)).amax() < 1e-5,
                "x={x}: {:?} vs {:?}",
                analytic.partial(0),
                fd.partial(0)
            );
        }
    }

    #[test]
    fn residual_and_centering_hold_at_random_points() {
        let mut rng = StreamFactory::new(321).stream(0, 0);
        for name in well_formed_builtin_names() {
            let model = builtin_model(name, &BTreeMap::new()).unwrap();
            let mut max_phi: f64 = 0.0;
            let mut max_data: f64 = 0.0;
            let mut min_sv = f64::INFINITY;
            for _ in 0..100 {
                let x = DVector::from_fn(model.slow_dim(), |_, _| {
                    4.0 * rng.random::<f64>() - 2.0
                });
                let generator = model.fast_generator(&x).unwrap();
                let mu = invariant_measure(&generator).unwrap();
                let data = model.hom_drift_matrix(&x);
                let solution = solve_cell_problem(&generator, &data, &mu).unwrap();
                assert!(solution.residual() <= 1e-10);
                assert!(solution.centering_defect() <= 1e-10);

                max_phi = max_phi.max(solution.phi().amax());
                max_data = max_data.max(data.amax());
                let sv = generator.entries().clone().svd(false, false).singular_values;
                let top = sv.max();
                let smallest_nonzero =
                    sv.iter().copied().filter(|s| *s > 1e-12 * top).fold(f64::INFINITY, f64::min);
                min_sv = min_sv.min(smallest_nonzero);
            }
            // Sanity envelope, not a sharp bound.
            assert!(
                max_phi <= 10.0 * max_data / min_sv,
                "model {name}: max phi {max_phi} vs envelope {}",
                10.0 * max_data / min_sv
            );
        }
    }
}
