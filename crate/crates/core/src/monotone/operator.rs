//! Maximal monotone operators assembled from a closed catalogue.
//!
//! Every kind in the catalogue has a resolvent that is either closed-form or
//! solvable by a bracketed 1-D search, so unsupported combinations are
//! rejected when the operator is built, never during a simulation step.

use super::convex::ConvexSet;
use super::func::ConvexFn;
use super::graph::MonotoneGraph;
use crate::error::{Error, Result};
use crate::vecops;

#[derive(Debug, Clone)]
pub enum OperatorKind {
    /// A(x) = {0}; the resolvent is the identity.
    Zero,
    /// Normal cone of the domain set; the resolvent is the metric projection.
    NormalCone,
    /// Subdifferential of a convex function; the resolvent is its prox.
    SubdiffConvex(ConvexFn),
    /// One-dimensional graph; the resolvent is exact piecewise inversion.
    Graph1D(MonotoneGraph),
    /// factor * base with factor > 0.
    Scaled {
        base: Box<MonotoneOperator>,
        factor: f64,
    },
    /// x -> base(x - shift).
    Translated {
        base: Box<MonotoneOperator>,
        shift: Vec<f64>,
    },
}

/// Maximal monotone operator with an explicit domain and a strictly interior
/// witness point. The witness anchors diagnostics that need a point where the
/// operator is locally bounded.
#[derive(Debug, Clone)]
pub struct MonotoneOperator {
    kind: OperatorKind,
    dim: usize,
    domain: ConvexSet,
    witness: Vec<f64>,
}

impl MonotoneOperator {
    pub fn zero(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "dimension must be positive".into(),
            });
        }
        Ok(MonotoneOperator {
            kind: OperatorKind::Zero,
            dim,
            domain: ConvexSet::all(dim),
            witness: vec![0.0; dim],
        })
    }

    pub fn normal_cone(set: ConvexSet) -> Result<Self> {
        let witness = set.interior_witness();
        Ok(MonotoneOperator {
            dim: set.dim(),
            witness,
            domain: set.clone(),
            kind: OperatorKind::NormalCone,
        })
    }

    pub fn subdiff(f: ConvexFn) -> Result<Self> {
        if !f.has_closed_prox() && f.dim() != 1 {
            return Err(Error::Unsupported(
                "sum functions above one dimension have no resolvent oracle".into(),
            ));
        }
        let domain = f.domain()?;
        let witness = domain.interior_witness();
        Ok(MonotoneOperator {
            dim: f.dim(),
            domain,
            witness,
            kind: OperatorKind::SubdiffConvex(f),
        })
    }

    pub fn graph1d(g: MonotoneGraph) -> Result<Self> {
        let (lo, hi) = g.domain();
        let domain = ConvexSet::interval(lo, hi)?;
        let witness = domain.interior_witness();
        Ok(MonotoneOperator {
            kind: OperatorKind::Graph1D(g),
            dim: 1,
            domain,
            witness,
        })
    }

    pub fn scaled(base: MonotoneOperator, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidParameter {
                name: "factor",
                reason: "scaling factor must be positive and finite".into(),
            });
        }
        Ok(MonotoneOperator {
            dim: base.dim,
            domain: base.domain.clone(),
            witness: base.witness.clone(),
            kind: OperatorKind::Scaled {
                base: Box::new(base),
                factor,
            },
        })
    }

    pub fn translated(base: MonotoneOperator, shift: Vec<f64>) -> Result<Self> {
        if shift.len() != base.dim {
            return Err(Error::Dimension {
                expected: base.dim,
                got: shift.len(),
            });
        }
        if shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "shift",
                reason: "shift must be finite".into(),
            });
        }
        let domain = base.domain.translate(&shift)?;
        let witness: Vec<f64> = base
            .witness
            .iter()
            .zip(&shift)
            .map(|(w, s)| w + s)
            .collect();
        Ok(MonotoneOperator {
            dim: base.dim,
            domain,
            witness,
            kind: OperatorKind::Translated {
                base: Box::new(base),
                shift,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> &ConvexSet {
        &self.domain
    }

    pub fn interior_witness(&self) -> &[f64] {
        &self.witness
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    /// Metric projection onto the closure of the domain.
    pub fn project_domain(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.domain.project(x))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "x",
                reason: "point must be finite".into(),
            });
        }
        Ok(())
    }

    fn check_alpha(alpha: f64) -> Result<()> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: "resolvent parameter must be positive and finite".into(),
            });
        }
        Ok(())
    }

    /// The unique y with x in y + alpha * A(y).
    pub fn resolvent(&self, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
        Self::check_alpha(alpha)?;
        self.check_point(x)?;
        self.resolvent_unchecked(alpha, x)
    }

    fn resolvent_unchecked(&self, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            OperatorKind::Zero => Ok(x.to_vec()),
            OperatorKind::NormalCone => Ok(self.domain.project(x)),
            OperatorKind::SubdiffConvex(f) => f.prox(alpha, x),
            OperatorKind::Graph1D(g) => Ok(vec![g.resolvent(alpha, x[0])]),
            OperatorKind::Scaled { base, factor } => {
                base.resolvent_unchecked(alpha * factor, x)
            }
            OperatorKind::Translated { base, shift } => {
                let inner = vecops::sub(x, shift);
                let mut y = base.resolvent_unchecked(alpha, &inner)?;
                for (yi, si) in y.iter_mut().zip(shift) {
                    *yi += si;
                }
                Ok(y)
            }
        }
    }

    /// Yosida approximation (x - J_alpha(x)) / alpha; lies in A(J_alpha(x)).
    pub fn yosida(&self, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
        let j = self.resolvent(alpha, x)?;
        Ok(x.iter()
            .zip(&j)
            .map(|(xi, ji)| (xi - ji) / alpha)
            .collect())
    }

    /// Least-norm element of A(x). Errors when x is outside the domain.
    ///
    /// For normal cones the answer is 0 everywhere on the domain: 0 belongs
    /// to every normal cone, including at the boundary.
    pub fn minimal_section(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let tol = super::convex::ITERATIVE_SLACK * (1.0 + vecops::norm(x));
        if !self.domain.contains(x, tol) {
            return Err(Error::Domain(
                "minimal section requested outside the operator domain".into(),
            ));
        }
        match &self.kind {
            OperatorKind::Zero | OperatorKind::NormalCone => Ok(vec![0.0; self.dim]),
            OperatorKind::SubdiffConvex(f) => min_norm_subgradient(f, x),
            OperatorKind::Graph1D(g) => Ok(vec![g.minimal_section(x[0])?]),
            OperatorKind::Scaled { base, factor } => {
                let mut v = base.minimal_section(x)?;
                for vi in v.iter_mut() {
                    *vi *= factor;
                }
                Ok(v)
            }
            OperatorKind::Translated { base, shift } => {
                base.minimal_section(&vecops::sub(x, shift))
            }
        }
    }
}

fn min_norm_subgradient(f: &ConvexFn, x: &[f64]) -> Result<Vec<f64>> {
    match f {
        ConvexFn::AbsNorm { weight, dim } => {
            let n = vecops::norm(x);
            if n == 0.0 {
                Ok(vec![0.0; *dim])
            } else {
                Ok(x.iter().map(|xi| weight * xi / n).collect())
            }
        }
        ConvexFn::Quadratic { q, dim } => {
            let mut out = vec![0.0; *dim];
            vecops::mat_vec(q, x, &mut out);
            Ok(out)
        }
        ConvexFn::Indicator { .. } => Ok(vec![0.0; x.len()]),
        ConvexFn::Sum { .. } => {
            if f.dim() == 1 {
                let iv = f.subgradient_interval_1d(x[0])?;
                Ok(vec![0.0_f64.clamp(iv.lo, iv.hi)])
            } else {
                Err(Error::Unsupported(
                    "minimal section of a multidimensional sum".into(),
                ))
            }
        }
    }
}

/// Moreau envelope of a convex function: inf_y { f(y) + |y - x|^2 / (2 alpha) }.
pub fn moreau_envelope(phi: &ConvexFn, alpha: f64, x: &[f64]) -> Result<f64> {
    phi.moreau_envelope(alpha, x)
}

/// Sup-errors of resolvents of a perturbed family against a limit operator.
#[derive(Debug, Clone)]
pub struct ResolventConvergenceReport {
    /// (epsilon, max over test points of |J_eps(x) - J(x)|), in grid order.
    pub errors: Vec<(f64, f64)>,
    /// True when the error sequence is nonincreasing along the grid.
    pub monotone_nonincreasing: bool,
}

/// Evaluates resolvent convergence of a family of operators toward a limit
/// on a decreasing epsilon grid. Diagnostic only: never fails on large errors.
pub fn check_resolvent_convergence(
    family: &dyn Fn(f64) -> Result<MonotoneOperator>,
    limit: &MonotoneOperator,
    alpha: f64,
    test_points: &[Vec<f64>],
    eps_grid: &[f64],
) -> Result<ResolventConvergenceReport> {
    MonotoneOperator::check_alpha(alpha)?;
    if test_points.is_empty() || eps_grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "grid",
            reason: "test points and epsilon grid must be nonempty".into(),
        });
    }
    for w in eps_grid.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::InvalidParameter {
                name: "eps_grid",
                reason: "epsilon grid must be strictly decreasing".into(),
            });
        }
    }
    if !(eps_grid[eps_grid.len() - 1] > 0.0) {
        return Err(Error::InvalidParameter {
            name: "eps_grid",
            reason: "epsilons must be positive".into(),
        });
    }
    let mut errors = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let op = family(eps)?;
        if op.dim() != limit.dim() {
            return Err(Error::Dimension {
                expected: limit.dim(),
                got: op.dim(),
            });
        }
        let mut sup = 0.0_f64;
        for p in test_points {
            let je = op.resolvent(alpha, p)?;
            let j = limit.resolvent(alpha, p)?;
            sup = sup.max(vecops::dist(&je, &j));
        }
        errors.push((eps, sup));
    }
    let monotone_nonincreasing = errors
        .windows(2)
        .all(|w| w[1].1 <= w[0].1 + 1e-12);
    Ok(ResolventConvergenceReport {
        errors,
        monotone_nonincreasing,
    })
}
