//! Variational diagnostic for the reaction term.
//!
//! A path (X, K) produced by a run against a maximal monotone A must satisfy
//! the discrete pairing sum_k <X_{k+1} - x, dK_k - y dt> >= -tol for every
//! graph sample (x, y) of A. The projection scheme satisfies each term
//! exactly; the penalized scheme evaluates the pairing one resolvent apart,
//! which costs an O(dt) slack built from path magnitudes.

use crate::error::{Error, Result};
use crate::vecops;

use super::PathEnsemble;

/// Outcome of the pairing check over all particles and graph samples.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KMonotonicityReport {
    pub particles: usize,
    pub samples: usize,
    /// Smallest pairing sum seen, after adding its tolerance; nonnegative
    /// means every check passed.
    pub worst_margin: f64,
    pub worst_particle: usize,
    pub worst_sample: usize,
    /// (particle, sample, pairing sum, tolerance) for every failed check.
    pub violations: Vec<(usize, usize, f64, f64)>,
}

impl KMonotonicityReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the reaction term of `ens` against graph samples of the operator
/// the run was constrained by. Requires a full-resolution recording, since
/// the pairing telescopes over every step.
pub fn k_monotonicity_diag(
    ens: &PathEnsemble,
    graph_samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<KMonotonicityReport> {
    let d = ens.dim();
    if graph_samples.is_empty() {
        return Err(Error::InvalidParameter {
            name: "graph_samples",
            reason: "need at least one graph sample".into(),
        });
    }
    for (x, y) in graph_samples {
        if x.len() != d || y.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: if x.len() != d { x.len() } else { y.len() },
            });
        }
    }
    if ens.recorded() < 2 || !ens.full_resolution() {
        return Err(Error::Grid(
            "diagnostic needs every step recorded (stride 1)".into(),
        ));
    }
    let dt = ens.dt;
    let steps = ens.recorded() - 1;

    let mut worst_margin = f64::INFINITY;
    let mut worst_particle = 0;
    let mut worst_sample = 0;
    let mut violations = Vec::new();
    for i in 0..ens.particles() {
        for (s, (x, y)) in graph_samples.iter().enumerate() {
            let mut sum = 0.0;
            let mut max_gap = 0.0_f64;
            for k in 0..steps {
                let xk1 = ens.state(i, k + 1);
                let kk = ens.k_state(i, k);
                let kk1 = ens.k_state(i, k + 1);
                let mut term = 0.0;
                for c in 0..d {
                    term += (xk1[c] - x[c]) * ((kk1[c] - kk[c]) - y[c] * dt);
                }
                sum += term;
                let gap = vecops::dist(xk1, x);
                if gap > max_gap {
                    max_gap = gap;
                }
            }
            let tol = dt
                * (1.0 + vecops::norm(y))
                * (1.0 + max_gap)
                * (1.0 + ens.k_tv_total(i));
            let margin = sum + tol;
            if margin < worst_margin {
                worst_margin = margin;
                worst_particle = i;
                worst_sample = s;
            }
            if sum < -tol {
                violations.push((i, s, sum, tol));
            }
        }
    }
    Ok(KMonotonicityReport {
        particles: ens.particles(),
        samples: graph_samples.len(),
        worst_margin,
        worst_particle,
        worst_sample,
        violations,
    })
}
