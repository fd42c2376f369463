//! Maximal monotone operators with exact resolvents.
//!
//! The catalogue covers the constraint mechanisms the simulator needs:
//! normal cones of convex sets, subdifferentials of convex functions,
//! one-dimensional monotone graphs, and positive scalings / translations of
//! any of these. Every member has a resolvent J_alpha = (I + alpha A)^{-1}
//! computable to machine precision (closed form) or to a 1e-10 tier
//! (iterative projection / bracketed search), which keeps the penalized
//! time-stepping scheme exact per step.

mod convex;
mod func;
mod graph;
mod operator;

pub use convex::{ConvexSet, EXACT_SLACK, ITERATIVE_SLACK};
pub use func::{ConvexFn, SubgradInterval};
pub use graph::MonotoneGraph;
pub use operator::{
    check_resolvent_convergence, moreau_envelope, MonotoneOperator, OperatorKind,
    ResolventConvergenceReport,
};
