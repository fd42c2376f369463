//! Numerical laboratory for mean-field SDEs with maximal monotone constraints.
//!
//! The crate is organized around the pipeline used to study a multivalued
//! McKean-Vlasov equation
//!
//! ```text
//!     dX_t ∈ b(X_t, L(X_t)) dt + sqrt(eps) sigma(X_t, L(X_t)) dW_t − A(X_t) dt
//! ```
//!
//! where `A` is a maximal monotone operator (reflection at a convex boundary,
//! a subdifferential, or a monotone graph) and `L(X_t)` is the law of the
//! solution, approximated throughout by the empirical measure of an
//! interacting particle system.
//!
//! Modules:
//! - [`monotone`]: operators `A`, resolvents, Yosida approximations, Moreau
//!   envelopes, convex projections.
//! - [`measure`]: empirical measures with exact Wasserstein-2 distances.
//! - [`coeffs`]: drift/diffusion descriptors `b`, `sigma`, perturbation
//!   families, and sampled hypothesis diagnostics.
//! - [`sde`]: the interacting-particle Euler engine with explicit tracking of
//!   the finite-variation reflection process `K`, plus controlled and
//!   fluctuation-rescaled variants.
//! - [`variational`]: deterministic limit/skeleton solvers, control energies,
//!   and variational rate-function minimization.
//! - [`asymptotics`]: empirical large/moderate-deviation sweeps and the
//!   iterated-logarithm harness built on contraction families.
//!
//! Everything is `f64`. All stochastic entry points take an explicit
//! [`sde::RngSpec`] and are bit-deterministic: identical inputs produce
//! identical bytes regardless of the rayon worker count.

pub mod asymptotics;
pub mod coeffs;
pub mod error;
pub mod measure;
pub mod monotone;
pub mod sde;
pub mod variational;
pub(crate) mod vecops;

pub use error::{Error, Result};
