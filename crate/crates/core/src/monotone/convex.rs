//! Closed convex sets with exact metric projections.
//!
//! These sets carry the operator domains D(A) and the reflecting boundaries.
//! Every kind guarantees a nonempty interior at construction: a strictly
//! interior witness is either derivable (half-space, box, ball) or must be
//! supplied (intersections). Projections for half-space, box, and ball are
//! closed-form; intersections of half-spaces use Dykstra's alternating
//! projections and land in the iterative accuracy tier.

use crate::error::{Error, Result};
use crate::vecops;

/// Absolute slack accepted on exact (closed-form) identities.
pub const EXACT_SLACK: f64 = 1e-12;
/// Absolute slack accepted on iteratively computed quantities.
pub const ITERATIVE_SLACK: f64 = 1e-10;

const DYKSTRA_MAX_CYCLES: usize = 200_000;

/// A closed convex subset of R^d with nonempty interior.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    /// { x : <normal, x> <= offset }
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// Axis-aligned box; bounds may be -inf/+inf, but lower < upper strictly.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Euclidean ball of positive radius.
    Ball { center: Vec<f64>, radius: f64 },
    /// Intersection of finitely many half-spaces { x : <n_i, x> <= c_i },
    /// with a mandatory strictly interior witness.
    Intersection {
        half_spaces: Vec<(Vec<f64>, f64)>,
        witness: Vec<f64>,
    },
}

impl ConvexSet {
    /// Half-space { x : <normal, x> <= offset }.
    pub fn half_space(normal: Vec<f64>, offset: f64) -> Result<Self> {
        let s = ConvexSet::HalfSpace { normal, offset };
        s.validate()?;
        Ok(s)
    }

    /// Axis-aligned box with possibly infinite bounds.
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let s = ConvexSet::Box { lower, upper };
        s.validate()?;
        Ok(s)
    }

    /// Closed interval [lo, hi] in one dimension.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(vec![lo], vec![hi])
    }

    /// All of R^d.
    pub fn all(dim: usize) -> Self {
        ConvexSet::Box {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        let s = ConvexSet::Ball { center, radius };
        s.validate()?;
        Ok(s)
    }

    /// Intersection of half-spaces. The witness must satisfy every
    /// constraint strictly; it doubles as the interior point required of all
    /// operator domains.
    pub fn intersection(half_spaces: Vec<(Vec<f64>, f64)>, witness: Vec<f64>) -> Result<Self> {
        let s = ConvexSet::Intersection {
            half_spaces,
            witness,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::HalfSpace { normal, .. } => normal.len(),
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::Intersection { witness, .. } => witness.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexSet::HalfSpace { normal, offset } => {
                if normal.is_empty() || normal.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter {
                        name: "normal",
                        reason: "must be nonempty and finite".into(),
                    });
                }
                if vecops::norm(normal) == 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "normal",
                        reason: "must be nonzero".into(),
                    });
                }
                if !offset.is_finite() {
                    return Err(Error::InvalidParameter {
                        name: "offset",
                        reason: "must be finite".into(),
                    });
                }
            }
            ConvexSet::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::Dimension {
                        expected: lower.len().max(1),
                        got: upper.len(),
                    });
                }
                for i in 0..lower.len() {
                    if lower[i].is_nan() || upper[i].is_nan() {
                        return Err(Error::InvalidParameter {
                            name: "bounds",
                            reason: "NaN bound".into(),
                        });
                    }
                    // strict ordering keeps the interior nonempty
                    if !(lower[i] < upper[i]) {
                        return Err(Error::InvalidParameter {
                            name: "bounds",
                            reason: format!(
                                "coordinate {i}: lower {} must be < upper {}",
                                lower[i], upper[i]
                            ),
                        });
                    }
                }
            }
            ConvexSet::Ball { center, radius } => {
                if center.is_empty() || center.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter {
                        name: "center",
                        reason: "must be nonempty and finite".into(),
                    });
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "radius",
                        reason: format!("must be positive and finite, got {radius}"),
                    });
                }
            }
            ConvexSet::Intersection {
                half_spaces,
                witness,
            } => {
                if half_spaces.is_empty() {
                    return Err(Error::InvalidParameter {
                        name: "half_spaces",
                        reason: "must be nonempty".into(),
                    });
                }
                let d = witness.len();
                if d == 0 || witness.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter {
                        name: "witness",
                        reason: "must be nonempty and finite".into(),
                    });
                }
                for (i, (n, c)) in half_spaces.iter().enumerate() {
                    if n.len() != d {
                        return Err(Error::Dimension {
                            expected: d,
                            got: n.len(),
                        });
                    }
                    if n.iter().any(|v| !v.is_finite()) || vecops::norm(n) == 0.0 || !c.is_finite()
                    {
                        return Err(Error::InvalidParameter {
                            name: "half_spaces",
                            reason: format!("constraint {i} has a degenerate normal or offset"),
                        });
                    }
                    let slack = c - vecops::dot(n, witness);
                    if slack <= 0.0 {
                        return Err(Error::InvalidParameter {
                            name: "witness",
                            reason: format!(
                                "not strictly interior: constraint {i} slack {slack}"
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Metric projection onto the set.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            ConvexSet::HalfSpace { normal, offset } => {
                let excess = vecops::dot(normal, x) - offset;
                if excess <= 0.0 {
                    x.to_vec()
                } else {
                    let scale = excess / vecops::norm_sq(normal);
                    x.iter().zip(normal).map(|(xi, ni)| xi - scale * ni).collect()
                }
            }
            ConvexSet::Box { lower, upper } => x
                .iter()
                .enumerate()
                .map(|(i, &v)| v.clamp(lower[i], upper[i]))
                .collect(),
            ConvexSet::Ball { center, radius } => {
                let r = vecops::dist(x, center);
                if r <= *radius {
                    x.to_vec()
                } else {
                    let t = radius / r;
                    x.iter()
                        .zip(center)
                        .map(|(xi, ci)| ci + t * (xi - ci))
                        .collect()
                }
            }
            ConvexSet::Intersection { half_spaces, .. } => {
                dykstra_half_spaces(half_spaces, x)
            }
        }
    }

    /// Projection written into a caller buffer; allocation-free for the
    /// closed-form kinds, which keeps per-particle stepping cheap.
    pub fn project_to(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        match self {
            ConvexSet::HalfSpace { normal, offset } => {
                let excess = vecops::dot(normal, x) - offset;
                if excess <= 0.0 {
                    out.copy_from_slice(x);
                } else {
                    let scale = excess / vecops::norm_sq(normal);
                    for ((o, xi), ni) in out.iter_mut().zip(x).zip(normal) {
                        *o = xi - scale * ni;
                    }
                }
            }
            ConvexSet::Box { lower, upper } => {
                for i in 0..x.len() {
                    out[i] = x[i].clamp(lower[i], upper[i]);
                }
            }
            ConvexSet::Ball { center, radius } => {
                let r = vecops::dist(x, center);
                if r <= *radius {
                    out.copy_from_slice(x);
                } else {
                    let t = radius / r;
                    for ((o, xi), ci) in out.iter_mut().zip(x).zip(center) {
                        *o = ci + t * (xi - ci);
                    }
                }
            }
            ConvexSet::Intersection { half_spaces, .. } => {
                out.copy_from_slice(&dykstra_half_spaces(half_spaces, x));
            }
        }
    }

    /// Euclidean distance to the set.
    pub fn distance(&self, x: &[f64]) -> f64 {
        vecops::dist(x, &self.project(x))
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.distance(x) <= tol
    }

    /// A strictly interior point: the stored witness for intersections,
    /// derived in closed form otherwise.
    pub fn interior_witness(&self) -> Vec<f64> {
        match self {
            ConvexSet::HalfSpace { normal, offset } => {
                let scale = (offset - 1.0) / vecops::norm_sq(normal);
                normal.iter().map(|ni| scale * ni).collect()
            }
            ConvexSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(&l, &u)| match (l.is_finite(), u.is_finite()) {
                    (true, true) => 0.5 * (l + u),
                    (true, false) => l + 1.0,
                    (false, true) => u - 1.0,
                    (false, false) => 0.0,
                })
                .collect(),
            ConvexSet::Ball { center, .. } => center.clone(),
            ConvexSet::Intersection { witness, .. } => witness.clone(),
        }
    }

    /// The set shifted by +s: { x + s : x in self }.
    pub fn translate(&self, s: &[f64]) -> Result<ConvexSet> {
        if s.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: s.len(),
            });
        }
        Ok(match self {
            ConvexSet::HalfSpace { normal, offset } => ConvexSet::HalfSpace {
                normal: normal.clone(),
                offset: offset + vecops::dot(normal, s),
            },
            ConvexSet::Box { lower, upper } => ConvexSet::Box {
                lower: lower.iter().zip(s).map(|(l, si)| l + si).collect(),
                upper: upper.iter().zip(s).map(|(u, si)| u + si).collect(),
            },
            ConvexSet::Ball { center, radius } => ConvexSet::Ball {
                center: center.iter().zip(s).map(|(c, si)| c + si).collect(),
                radius: *radius,
            },
            ConvexSet::Intersection {
                half_spaces,
                witness,
            } => ConvexSet::Intersection {
                half_spaces: half_spaces
                    .iter()
                    .map(|(n, c)| (n.clone(), c + vecops::dot(n, s)))
                    .collect(),
                witness: witness.iter().zip(s).map(|(w, si)| w + si).collect(),
            },
        })
    }

    /// For one-dimensional sets, the interval [lo, hi] they describe.
    pub fn as_interval(&self) -> Option<(f64, f64)> {
        if self.dim() != 1 {
            return None;
        }
        match self {
            ConvexSet::HalfSpace { normal, offset } => {
                let n = normal[0];
                if n > 0.0 {
                    Some((f64::NEG_INFINITY, offset / n))
                } else {
                    Some((offset / n, f64::INFINITY))
                }
            }
            ConvexSet::Box { lower, upper } => Some((lower[0], upper[0])),
            ConvexSet::Ball { center, radius } => Some((center[0] - radius, center[0] + radius)),
            ConvexSet::Intersection { half_spaces, .. } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for (n, c) in half_spaces {
                    if n[0] > 0.0 {
                        hi = hi.min(c / n[0]);
                    } else {
                        lo = lo.max(c / n[0]);
                    }
                }
                Some((lo, hi))
            }
        }
    }
}

/// Dykstra's alternating projections onto an intersection of half-spaces.
/// Converges to the metric projection for any closed convex pieces; for
/// polyhedra convergence is geometric. Stops when a full cycle moves the
/// iterate by less than an absolute floor scaled to the input.
fn dykstra_half_spaces(half_spaces: &[(Vec<f64>, f64)], x0: &[f64]) -> Vec<f64> {
    let d = x0.len();
    let m = half_spaces.len();
    // quick exit when already feasible
    if half_spaces
        .iter()
        .all(|(n, c)| vecops::dot(n, x0) <= *c)
    {
        return x0.to_vec();
    }
    let mut x = x0.to_vec();
    let mut corrections = vec![0.0f64; m * d];
    let tol = 1e-15 * (1.0 + vecops::norm(x0));
    let mut y = vec![0.0f64; d];
    for _cycle in 0..DYKSTRA_MAX_CYCLES {
        let mut moved: f64 = 0.0;
        for (i, (n, c)) in half_spaces.iter().enumerate() {
            let q = &mut corrections[i * d..(i + 1) * d];
            for k in 0..d {
                y[k] = x[k] + q[k];
            }
            let excess = vecops::dot(n, &y) - c;
            if excess > 0.0 {
                let scale = excess / vecops::norm_sq(n);
                for k in 0..d {
                    let proj = y[k] - scale * n[k];
                    q[k] = y[k] - proj;
                    moved = moved.max((proj - x[k]).abs());
                    x[k] = proj;
                }
            } else {
                for k in 0..d {
                    moved = moved.max((y[k] - x[k]).abs());
                    x[k] = y[k];
                    q[k] = 0.0;
                }
            }
        }
        if moved <= tol {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_space_projection() {
        let h = ConvexSet::half_space(vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(h.project(&[-1.0, 2.0]), vec![-1.0, 2.0]);
        assert_eq!(h.project(&[3.0, 2.0]), vec![0.0, 2.0]);
        let w = h.interior_witness();
        assert!(vecops::dot(&[1.0, 0.0], &w) < 0.0);
    }

    #[test]
    fn box_rejects_empty_interior() {
        assert!(ConvexSet::boxed(vec![0.0], vec![0.0]).is_err());
        assert!(ConvexSet::boxed(vec![1.0], vec![0.0]).is_err());
        let b = ConvexSet::interval(0.0, f64::INFINITY).unwrap();
        assert_eq!(b.project(&[-2.0]), vec![0.0]);
        assert_eq!(b.project(&[2.0]), vec![2.0]);
    }

    #[test]
    fn ball_projection() {
        let b = ConvexSet::ball(vec![1.0, 1.0], 1.0).unwrap();
        let p = b.project(&[1.0, 3.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && (p[1] - 2.0).abs() < 1e-15);
        assert_eq!(b.project(&[1.2, 1.0]), vec![1.2, 1.0]);
    }

    #[test]
    fn intersection_requires_strict_witness() {
        // the nonnegative quadrant needs a strictly positive witness
        let halves = vec![(vec![-1.0, 0.0], 0.0), (vec![0.0, -1.0], 0.0)];
        assert!(ConvexSet::intersection(halves.clone(), vec![0.0, 0.0]).is_err());
        let q = ConvexSet::intersection(halves, vec![1.0, 1.0]).unwrap();
        let p = q.project(&[-1.0, -2.0]);
        assert!(p[0].abs() < 1e-10 && p[1].abs() < 1e-10);
    }

    #[test]
    fn dykstra_matches_closed_form_on_wedge() {
        // wedge { x <= 0 } ∩ { y <= 0 }: projection is the clamp
        let w = ConvexSet::intersection(
            vec![(vec![1.0, 0.0], 0.0), (vec![0.0, 1.0], 0.0)],
            vec![-1.0, -1.0],
        )
        .unwrap();
        for (x, expect) in [
            ([2.0, 3.0], [0.0, 0.0]),
            ([-1.0, 5.0], [-1.0, 0.0]),
            ([-0.5, -0.5], [-0.5, -0.5]),
        ] {
            let p = w.project(&x);
            assert!(
                vecops::dist(&p, &expect) < ITERATIVE_SLACK,
                "{x:?} -> {p:?}, expected {expect:?}"
            );
        }
    }

    #[test]
    fn projection_idempotent() {
        let sets = [
            ConvexSet::half_space(vec![1.0, 2.0], 1.5).unwrap(),
            ConvexSet::boxed(vec![-1.0, 0.0], vec![1.0, f64::INFINITY]).unwrap(),
            ConvexSet::ball(vec![0.5, -0.5], 2.0).unwrap(),
            ConvexSet::intersection(
                vec![(vec![1.0, 1.0], 1.0), (vec![-1.0, 1.0], 1.0)],
                vec![0.0, 0.0],
            )
            .unwrap(),
        ];
        let points: [[f64; 2]; 4] = [[3.0, 4.0], [-5.0, 2.0], [0.1, 0.2], [10.0, -10.0]];
        for s in &sets {
            for p in &points {
                let p1 = s.project(p);
                let p2 = s.project(&p1);
                let tol = match s {
                    ConvexSet::Intersection { .. } => ITERATIVE_SLACK,
                    _ => EXACT_SLACK,
                };
                assert!(vecops::dist(&p1, &p2) <= tol, "{s:?} at {p:?}");
            }
        }
    }

    #[test]
    fn translate_shifts_projections() {
        let b = ConvexSet::interval(0.0, 1.0).unwrap();
        let t = b.translate(&[2.0]).unwrap();
        assert_eq!(t.project(&[0.0]), vec![2.0]);
        assert_eq!(t.project(&[2.5]), vec![2.5]);
        assert_eq!(t.as_interval(), Some((2.0, 3.0)));
    }
}
