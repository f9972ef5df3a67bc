//! Simulation and homogenization of slow-fast SDEs with state-dependent switching.
//!
//! The slow component follows
//!
//! ```text
//! dX_t = eps^{-1/2} K(X_t, a_t) dt + b(X_t, a_t) dt + sigma(X_t, a_t) dW_t,
//! ```
//!
//! while the fast component `a_t` is a continuous-time Markov chain on a finite
//! state set whose generator `eps^{-1} Q(x) + eps^{-1/2} Qt(x)` depends on the
//! current slow state. As `eps -> 0` the slow component converges weakly to a
//! limiting diffusion whose drift and covariance are obtained by solving the
//! cell problem `-Q(x) phi = K(x, .)` and averaging against the invariant
//! measure of `Q(x)`.
//!
//! The crate provides:
//!
//! * [`model`] — coefficient bundles ([`SwitchingModel`]), generator
//!   validation and the built-in model registry;
//! * [`chain`] — invariant measures, uniformized transition matrices,
//!   ergodicity diagnostics and exact chain sampling;
//! * [`poisson`] — the cell-problem solver, its Monte Carlo cross-check and
//!   the solution Jacobian;
//! * [`averaging`] — assembly of the limit-equation coefficients and the
//!   symmetric matrix square root;
//! * [`sde`] — Euler–Maruyama samplers for both equations, weak-error studies
//!   over an `eps` grid and convergence-order fitting;
//! * [`cli`] — the configuration-driven command line front end.

pub mod averaging;
pub mod chain;
pub mod cli;
pub mod model;
pub mod poisson;
pub mod rng;
pub mod sde;

pub use averaging::{
    average, averaged_model, local_coefficients, sqrt_spd, AveragedCoefficients, AveragedDynamics,
    AveragedModel, AveragingError, LocalCoefficients,
};
pub use chain::{
    ergodicity_probe, invariant_measure, mixing_horizon, sample_chain_frozen, transition_matrix,
    ChainError, ChainPath, InvariantMeasure, TransitionMatrix,
};
pub use model::{
    builtin_model, builtin_model_names, check_centering, effective_generator, total_rate,
    validate_generator, CenteringReport, GeneratorMatrix, ModelError, State, SwitchingModel,
    TotalRate,
};
pub use poisson::{
    phi_jacobian, phi_mc_estimate, solve_cell_problem, PhiJacobian, PoissonError, PoissonSolution,
};
pub use rng::StreamFactory;
pub use sde::{
    analytic_example_error, fit_order, mc_expectation, simulate_averaged, simulate_slow_fast,
    weak_error_study, MonteCarloEstimate, OrderFit, PathSample, SdeError, SimConfig, StepRule,
    StudyConfig, TestFunction, WeakErrorRow, WeakErrorStudy,
};
