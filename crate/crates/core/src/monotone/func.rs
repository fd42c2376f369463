//! Convex functions from a closed catalogue, with value and proximal oracles.
//!
//! Every catalogue member is nonnegative (weighted norms, PSD quadratics,
//! indicators, and sums of those). Nonnegativity is what lets the sum prox
//! bracket its minimizer without extra assumptions.

use crate::error::{Error, Result};
use crate::monotone::convex::ConvexSet;
use crate::vecops;

/// Lower semicontinuous convex function on R^d.
#[derive(Debug, Clone)]
pub enum ConvexFn {
    /// weight * |x| (Euclidean norm), weight >= 0.
    AbsNorm { weight: f64, dim: usize },
    /// (1/2) <Qx, x> with Q symmetric PSD, row-major d x d.
    Quadratic { q: Vec<f64>, dim: usize },
    /// 0 on the set, +inf outside.
    Indicator { set: ConvexSet },
    /// Pointwise sum of catalogue members (same dimension).
    Sum { terms: Vec<ConvexFn> },
}

/// Subgradient interval of a 1-D convex function at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgradInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ConvexFn {
    pub fn abs_norm(weight: f64, dim: usize) -> Result<Self> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "weight",
                reason: format!("must be finite and nonnegative, got {weight}"),
            });
        }
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "must be positive".into(),
            });
        }
        Ok(ConvexFn::AbsNorm { weight, dim })
    }

    pub fn quadratic(q: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || q.len() != dim * dim {
            return Err(Error::Dimension {
                expected: dim * dim,
                got: q.len(),
            });
        }
        let scale = 1.0 + q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..dim {
            for j in 0..i {
                if (q[i * dim + j] - q[j * dim + i]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter {
                        name: "q",
                        reason: "matrix must be symmetric".into(),
                    });
                }
            }
        }
        if q.iter().any(|v| !v.is_finite()) || !vecops::is_psd(&q, dim, 1e-12 * scale) {
            return Err(Error::InvalidParameter {
                name: "q",
                reason: "matrix must be finite and positive semidefinite".into(),
            });
        }
        Ok(ConvexFn::Quadratic { q, dim })
    }

    pub fn indicator(set: ConvexSet) -> Self {
        ConvexFn::Indicator { set }
    }

    pub fn sum(terms: Vec<ConvexFn>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidParameter {
                name: "terms",
                reason: "must be nonempty".into(),
            });
        }
        let d = terms[0].dim();
        for t in &terms {
            if t.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: t.dim(),
                });
            }
        }
        Ok(ConvexFn::Sum { terms })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexFn::AbsNorm { dim, .. } | ConvexFn::Quadratic { dim, .. } => *dim,
            ConvexFn::Indicator { set } => set.dim(),
            ConvexFn::Sum { terms } => terms[0].dim(),
        }
    }

    /// Function value; +inf outside an indicator's set.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            ConvexFn::AbsNorm { weight, .. } => weight * vecops::norm(x),
            ConvexFn::Quadratic { q, dim } => {
                let mut qx = vec![0.0; *dim];
                vecops::mat_vec(q, x, &mut qx);
                0.5 * vecops::dot(&qx, x)
            }
            ConvexFn::Indicator { set } => {
                let tol = 1e-12 * (1.0 + vecops::norm(x));
                if set.contains(x, tol) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexFn::Sum { terms } => terms.iter().map(|t| t.value(x)).sum(),
        }
    }

    /// Whether prox is available in closed form (as opposed to the 1-D
    /// golden-section path used for sums).
    pub fn has_closed_prox(&self) -> bool {
        !matches!(self, ConvexFn::Sum { .. })
    }

    /// prox_{alpha f}(x) = argmin_y f(y) + |y - x|^2 / (2 alpha).
    ///
    /// Closed form for norms, quadratics, and indicators; one-dimensional
    /// sums fall back to golden-section search (iterative accuracy tier).
    /// Sums in dimension >= 2 are unsupported.
    pub fn prox(&self, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_alpha_dim(alpha, x.len(), self.dim())?;
        match self {
            ConvexFn::AbsNorm { weight, .. } => {
                let r = vecops::norm(x);
                let shrink = alpha * weight;
                if r <= shrink {
                    Ok(vec![0.0; x.len()])
                } else {
                    let t = 1.0 - shrink / r;
                    Ok(x.iter().map(|v| t * v).collect())
                }
            }
            ConvexFn::Quadratic { q, .. } => {
                let scaled: Vec<f64> = q.iter().map(|v| alpha * v).collect();
                vecops::solve_identity_plus_psd(&scaled, x).ok_or_else(|| {
                    Error::InvalidParameter {
                        name: "q",
                        reason: "I + alpha Q failed to factor".into(),
                    }
                })
            }
            ConvexFn::Indicator { set } => Ok(set.project(x)),
            ConvexFn::Sum { .. } => {
                if self.dim() != 1 {
                    return Err(Error::Unsupported(
                        "prox of a sum is only available in one dimension".into(),
                    ));
                }
                let y = self.prox_1d(alpha, x[0])?;
                Ok(vec![y])
            }
        }
    }

    /// Moreau envelope inf_y { f(y) + |y - x|^2 / (2 alpha) }.
    pub fn moreau_envelope(&self, alpha: f64, x: &[f64]) -> Result<f64> {
        check_alpha_dim(alpha, x.len(), self.dim())?;
        match self {
            ConvexFn::AbsNorm { weight, .. } => {
                // Huber function of the norm
                let r = vecops::norm(x);
                if r >= alpha * weight {
                    Ok(weight * r - alpha * weight * weight / 2.0)
                } else {
                    Ok(r * r / (2.0 * alpha))
                }
            }
            ConvexFn::Quadratic { .. } => {
                let p = self.prox(alpha, x)?;
                Ok(self.value(&p) + vecops::dist_sq(&p, x) / (2.0 * alpha))
            }
            ConvexFn::Indicator { set } => {
                let d = set.distance(x);
                Ok(d * d / (2.0 * alpha))
            }
            ConvexFn::Sum { terms } => {
                if self.dim() != 1 {
                    return Err(Error::Unsupported(
                        "envelope of a sum is only available in one dimension".into(),
                    ));
                }
                let y = self.prox_1d(alpha, x[0])?;
                let v: f64 = terms
                    .iter()
                    .map(|t| if matches!(t, ConvexFn::Indicator { .. }) { 0.0 } else { t.value(&[y]) })
                    .sum();
                Ok(v + (y - x[0]) * (y - x[0]) / (2.0 * alpha))
            }
        }
    }

    /// Effective domain as a convex set. Needed when the function backs an
    /// operator; only 1-D sums may combine indicator terms.
    pub fn domain(&self) -> Result<ConvexSet> {
        match self {
            ConvexFn::AbsNorm { dim, .. } | ConvexFn::Quadratic { dim, .. } => {
                Ok(ConvexSet::all(*dim))
            }
            ConvexFn::Indicator { set } => Ok(set.clone()),
            ConvexFn::Sum { terms } => {
                if self.dim() == 1 {
                    let (lo, hi) = self.feasible_interval();
                    if !(lo < hi) {
                        return Err(Error::InvalidParameter {
                            name: "terms",
                            reason: "sum domain has empty interior".into(),
                        });
                    }
                    ConvexSet::interval(lo, hi)
                } else if terms.iter().any(|t| matches!(t, ConvexFn::Indicator { .. })) {
                    Err(Error::Unsupported(
                        "domain of a multi-dimensional sum with indicators".into(),
                    ))
                } else {
                    Ok(ConvexSet::all(self.dim()))
                }
            }
        }
    }

    /// Subgradient interval at a 1-D point. Errors outside the domain.
    pub fn subgradient_interval_1d(&self, x: f64) -> Result<SubgradInterval> {
        if self.dim() != 1 {
            return Err(Error::Dimension {
                expected: 1,
                got: self.dim(),
            });
        }
        match self {
            ConvexFn::AbsNorm { weight, .. } => Ok(if x > 0.0 {
                SubgradInterval { lo: *weight, hi: *weight }
            } else if x < 0.0 {
                SubgradInterval { lo: -*weight, hi: -*weight }
            } else {
                SubgradInterval { lo: -*weight, hi: *weight }
            }),
            ConvexFn::Quadratic { q, .. } => {
                let v = q[0] * x;
                Ok(SubgradInterval { lo: v, hi: v })
            }
            ConvexFn::Indicator { set } => {
                let (lo, hi) = set.as_interval().expect("1-D set");
                if x < lo || x > hi {
                    return Err(Error::Domain(format!(
                        "{x} outside indicator interval [{lo}, {hi}]"
                    )));
                }
                let at_lo = x == lo;
                let at_hi = x == hi;
                Ok(SubgradInterval {
                    lo: if at_lo { f64::NEG_INFINITY } else { 0.0 },
                    hi: if at_hi { f64::INFINITY } else { 0.0 },
                })
            }
            ConvexFn::Sum { terms } => {
                let mut lo = 0.0;
                let mut hi = 0.0;
                for t in terms {
                    let s = t.subgradient_interval_1d(x)?;
                    lo += s.lo;
                    hi += s.hi;
                }
                Ok(SubgradInterval { lo, hi })
            }
        }
    }

    /// Intersection of the 1-D domains of all terms.
    fn feasible_interval(&self) -> (f64, f64) {
        match self {
            ConvexFn::Indicator { set } => set.as_interval().expect("1-D set"),
            ConvexFn::Sum { terms } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for t in terms {
                    let (l, h) = t.feasible_interval();
                    lo = lo.max(l);
                    hi = hi.min(h);
                }
                (lo, hi)
            }
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Prox for 1-D sums by bisection on the monotone inclusion
    /// 0 in y - x + alpha * df(y). Subgradient intervals are exact, so the
    /// root is located to machine precision rather than the sqrt(eps) floor
    /// of value-based search. Nonnegativity of the catalogue bounds the
    /// initial bracket: |y* - x| <= sqrt(2 alpha f(p) + (p-x)^2) for
    /// feasible p.
    fn prox_1d(&self, alpha: f64, x: f64) -> Result<f64> {
        let (dlo, dhi) = self.feasible_interval();
        if dlo > dhi {
            return Err(Error::Domain("empty feasible interval".into()));
        }
        let p = x.clamp(dlo, dhi);
        let fp = self.smooth_value_1d(p);
        let radius = (2.0 * alpha * fp + (p - x) * (p - x)).sqrt() + 1e-12;
        let mut lo = (x - radius).max(dlo);
        let mut hi = (x + radius).min(dhi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let iv = self.subgradient_interval_1d(mid)?;
            let glo = mid - x + alpha * iv.lo;
            let ghi = mid - x + alpha * iv.hi;
            if ghi < 0.0 {
                lo = mid;
            } else if glo > 0.0 {
                hi = mid;
            } else {
                return Ok(mid);
            }
            if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Sum of non-indicator term values; callers guarantee y is feasible.
    fn smooth_value_1d(&self, y: f64) -> f64 {
        match self {
            ConvexFn::Indicator { .. } => 0.0,
            ConvexFn::Sum { terms } => terms.iter().map(|t| t.smooth_value_1d(y)).sum(),
            other => other.value(&[y]),
        }
    }
}

fn check_alpha_dim(alpha: f64, got: usize, expected: usize) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            reason: format!("must be positive and finite, got {alpha}"),
        });
    }
    if got != expected {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// Golden-section minimization of a unimodal function on [lo, hi]. Kept as
/// an independent oracle for the exact bisection prox.
#[cfg(test)]
pub(crate) fn golden_section_min(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let tol = 1e-14 * (1.0 + lo.abs().max(hi.abs()));
    let mut a = lo;
    let mut b = hi;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
