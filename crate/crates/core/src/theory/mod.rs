//! Numerical witnesses for the theory: the low-frequency tilting bound, the
//! quadratic KL approximation, Stein's identity, reward-offset invariance of
//! the objective, gradient energy spectra and the MAC complexity model.

mod complexity;
mod kl;
mod objective;
mod prop1;
mod spectrum;
mod stein;
pub mod suite;

pub use complexity::{
    complexity_bench, default_grid, ComplexityReport, ComplexityRow, MacFit, TimingCheck,
    FIT_RESIDUAL_MAX, TIMING_MIN_TOKENS, TIMING_SLACK,
};
pub use kl::{
    linear_pushforward_kl, quadratic_kl_bound, verify_quadratic_kl, KlMethod, KlReport, McCheck,
};
pub use objective::{verify_objective_identity, ObjectiveProbe, ObjectiveReport, LOSS_SHIFT_TOL};
pub use prop1::{
    uniform_axis, verify_prop1, GridDensity, LowReward, Perturbation, Prop1Instance,
    GRID_HALF_WIDTH, MAX_GRID_DIM, NORMALIZATION_TOL, QUADRATURE_TOL,
};
pub use spectrum::{gradient_energy_spectrum, GradientEnergySpectrum};
pub use stein::{
    verify_stein, SteinReport, TraceMethod, EXACT_TRACE_MAX_DIM, HUTCHINSON_PROBES, STEIN_SIGMAS,
};

#[cfg(test)]
mod tests;
