//! Error type shared by every module of the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by construction, validation, and simulation.
///
/// Variants are grouped by recoverability: everything except [`Error::NonFinite`]
/// and [`Error::Io`] is detectable before any compute starts.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A constructor or operation received an argument outside its contract.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// The requested combination of kinds has no supported algorithm.
    /// Raised at construction time, never mid-computation.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A point lies outside the domain required by the operation.
    #[error("domain violation: {0}")]
    Domain(String),

    /// Vector or matrix dimensions disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// Two empirical measures must carry the same number of atoms.
    #[error("particle count mismatch: {left} vs {right}")]
    ParticleCount { left: usize, right: usize },

    /// Time grids that must agree do not.
    #[error("grid mismatch: {0}")]
    Grid(String),

    /// A state or coefficient evaluated to NaN/inf during stepping.
    #[error("non-finite value at step {step}, particle {particle}")]
    NonFinite { step: usize, particle: usize },

    /// A scaling parameter sits outside its asymptotic regime.
    #[error("regime violation: {0}")]
    Regime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the error indicates a bad configuration rather than a
    /// failure that occurred while computing. The CLI maps this split onto
    /// exit codes.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::Io(_))
    }
}
