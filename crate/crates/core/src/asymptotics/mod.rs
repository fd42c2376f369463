//! Empirical verification harnesses for the three asymptotic regimes:
//! rare-event decay rates against the variational minimum, rescaled
//! fluctuation statistics against the linearized Gaussian limit, and the
//! iterated-logarithm pipeline built on contraction families.
//!
//! Every harness compares Monte Carlo output to an independently computed
//! oracle and reports gaps with propagated uncertainty; verdicts are data,
//! not assertions.

mod ldp;
mod lil;
mod mdp;

pub use ldp::{fit_rate, gaussian_upper_tail, ldp_sweep, LdpRow, LdpTable, RareEvent, RateFit,
    Verdict};
pub use lil::{lil_harness, lil_transform, limit_set_distance, ContractionFamily, LilHarnessOptions,
    LilRegime, LilReport, LilRow, LilSpec, LimitSetOptions, LimitSetReport};
pub use mdp::{mdp_sweep, LambdaRule, MdpRow, MdpStatistic, MdpTable};
