//! Deterministic side of the small-noise analysis: piecewise-constant
//! controls, limit and skeleton integrators, and rate-function minimization.

mod control;
mod minimize;
mod skeleton;

pub use control::ControlGrid;
pub use minimize::{
    minimize_rate, MinimizeOptions, RateProblem, RateReport, RateTarget, StartDiagnostic,
};
pub(crate) use minimize::{energy_of, lbfgs_descend};
pub use skeleton::{solve_limit_ode, solve_mdp_skeleton, solve_skeleton, SkeletonSolution};
