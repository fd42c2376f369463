//! Maximal monotone graphs on the real line.
//!
//! A graph is a nondecreasing piecewise-linear curve with optional vertical
//! segments at breakpoints and optional vertical rays at the domain ends.
//! Since y + alpha * A(y) is again such a curve and is strictly increasing,
//! resolvents invert it exactly, segment by segment.

use crate::error::{Error, Result};

/// One-dimensional maximal monotone graph.
///
/// At breakpoint `xs[i]` the graph contains the vertical segment
/// `[y_lo[i], y_hi[i]]`. Between consecutive breakpoints it is the chord from
/// `(xs[i], y_hi[i])` to `(xs[i+1], y_lo[i+1])`. Outside the breakpoints it
/// continues linearly with `left_slope` / `right_slope`, unless the first
/// `y_lo` is -inf (domain starts at `xs[0]`) or the last `y_hi` is +inf
/// (domain ends at `xs[last]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneGraph {
    xs: Vec<f64>,
    y_lo: Vec<f64>,
    y_hi: Vec<f64>,
    left_slope: f64,
    right_slope: f64,
}

impl MonotoneGraph {
    pub fn new(
        xs: Vec<f64>,
        y_lo: Vec<f64>,
        y_hi: Vec<f64>,
        left_slope: f64,
        right_slope: f64,
    ) -> Result<Self> {
        let n = xs.len();
        if n == 0 {
            return Err(Error::InvalidParameter {
                name: "xs",
                reason: "at least one breakpoint required".into(),
            });
        }
        if y_lo.len() != n || y_hi.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: y_lo.len().min(y_hi.len()),
            });
        }
        for i in 0..n {
            if !xs[i].is_finite() {
                return Err(Error::InvalidParameter {
                    name: "xs",
                    reason: "breakpoints must be finite".into(),
                });
            }
            if i > 0 && !(xs[i - 1] < xs[i]) {
                return Err(Error::InvalidParameter {
                    name: "xs",
                    reason: "breakpoints must be strictly increasing".into(),
                });
            }
            if y_lo[i].is_nan() || y_hi[i].is_nan() || !(y_lo[i] <= y_hi[i]) {
                return Err(Error::InvalidParameter {
                    name: "y",
                    reason: format!("need y_lo <= y_hi at breakpoint {i}"),
                });
            }
            if y_lo[i] == f64::NEG_INFINITY && i != 0 {
                return Err(Error::InvalidParameter {
                    name: "y_lo",
                    reason: "-inf only allowed at the first breakpoint".into(),
                });
            }
            if y_hi[i] == f64::INFINITY && i != n - 1 {
                return Err(Error::InvalidParameter {
                    name: "y_hi",
                    reason: "+inf only allowed at the last breakpoint".into(),
                });
            }
            if y_lo[i] == f64::INFINITY || y_hi[i] == f64::NEG_INFINITY {
                return Err(Error::InvalidParameter {
                    name: "y",
                    reason: "infinite values must point away from the graph".into(),
                });
            }
            if i + 1 < n && !(y_hi[i] <= y_lo[i + 1]) {
                return Err(Error::InvalidParameter {
                    name: "y",
                    reason: format!("monotonicity broken between breakpoints {i} and {}", i + 1),
                });
            }
        }
        if !(left_slope.is_finite() && left_slope >= 0.0)
            || !(right_slope.is_finite() && right_slope >= 0.0)
        {
            return Err(Error::InvalidParameter {
                name: "slope",
                reason: "end slopes must be finite and nonnegative".into(),
            });
        }
        let g = MonotoneGraph {
            xs,
            y_lo,
            y_hi,
            left_slope,
            right_slope,
        };
        let (lo, hi) = g.domain();
        if !(lo < hi) {
            return Err(Error::InvalidParameter {
                name: "xs",
                reason: "domain has empty interior".into(),
            });
        }
        Ok(g)
    }

    /// The subdifferential of |x|: sign with the full interval [-1, 1] at 0.
    pub fn sign() -> Self {
        MonotoneGraph::new(vec![0.0], vec![-1.0], vec![1.0], 0.0, 0.0).expect("static graph")
    }

    /// The normal cone of [lo, +inf) as a graph: a downward ray at lo, zero after.
    pub fn lower_barrier(lo: f64) -> Result<Self> {
        MonotoneGraph::new(vec![lo], vec![f64::NEG_INFINITY], vec![0.0], 0.0, 0.0)
    }

    /// Domain interval [lo, hi] (ends are the breakpoints carrying rays).
    pub fn domain(&self) -> (f64, f64) {
        let n = self.xs.len();
        let lo = if self.y_lo[0] == f64::NEG_INFINITY {
            self.xs[0]
        } else {
            f64::NEG_INFINITY
        };
        let hi = if self.y_hi[n - 1] == f64::INFINITY {
            self.xs[n - 1]
        } else {
            f64::INFINITY
        };
        (lo, hi)
    }

    /// The set A(x) as an interval. Errors when x is outside the domain.
    pub fn value_interval(&self, x: f64) -> Result<(f64, f64)> {
        let (dlo, dhi) = self.domain();
        if x < dlo || x > dhi || x.is_nan() {
            return Err(Error::Domain(format!("{x} outside domain [{dlo}, {dhi}]")));
        }
        let n = self.xs.len();
        if x < self.xs[0] {
            let v = self.y_lo[0] + self.left_slope * (x - self.xs[0]);
            return Ok((v, v));
        }
        if x > self.xs[n - 1] {
            let v = self.y_hi[n - 1] + self.right_slope * (x - self.xs[n - 1]);
            return Ok((v, v));
        }
        // x within [xs[0], xs[last]]
        let i = match self.xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => return Ok((self.y_lo[i], self.y_hi[i])),
            Err(i) => i - 1, // xs[i] < x < xs[i+1]
        };
        let m = (self.y_lo[i + 1] - self.y_hi[i]) / (self.xs[i + 1] - self.xs[i]);
        let v = self.y_hi[i] + m * (x - self.xs[i]);
        Ok((v, v))
    }

    /// Least-norm element of A(x).
    pub fn minimal_section(&self, x: f64) -> Result<f64> {
        let (lo, hi) = self.value_interval(x)?;
        Ok(if lo <= 0.0 && 0.0 <= hi {
            0.0
        } else if hi < 0.0 {
            hi
        } else {
            lo
        })
    }

    /// The unique y with x in y + alpha * A(y). Exact per segment.
    pub fn resolvent(&self, alpha: f64, x: f64) -> f64 {
        debug_assert!(alpha > 0.0);
        let n = self.xs.len();
        // left linear piece, only when the graph extends past the first breakpoint
        if self.y_lo[0].is_finite() {
            let bound = self.xs[0] + alpha * self.y_lo[0];
            if x <= bound {
                let ls = self.left_slope;
                return (x - alpha * (self.y_lo[0] - ls * self.xs[0])) / (1.0 + alpha * ls);
            }
        }
        for i in 0..n {
            // vertical segment at xs[i] covers [xs[i] + a*y_lo, xs[i] + a*y_hi]
            if x <= self.xs[i] + alpha * self.y_hi[i] {
                return self.xs[i];
            }
            if i + 1 < n {
                let next_lo = self.xs[i + 1] + alpha * self.y_lo[i + 1];
                if x < next_lo {
                    let m = (self.y_lo[i + 1] - self.y_hi[i]) / (self.xs[i + 1] - self.xs[i]);
                    return (x - alpha * (self.y_hi[i] - m * self.xs[i])) / (1.0 + alpha * m);
                }
            }
        }
        // right linear piece; y_hi[last] is finite here since +inf was matched above
        let rs = self.right_slope;
        let xl = self.xs[n - 1];
        (x - alpha * (self.y_hi[n - 1] - rs * xl)) / (1.0 + alpha * rs)
    }

    /// Convex potential with the graph as subdifferential, normalized so the
    /// potential vanishes at the first breakpoint. Piecewise-quadratic exact
    /// integration of the single-valued branch.
    pub fn potential(&self, y: f64) -> Result<f64> {
        let (dlo, dhi) = self.domain();
        if y < dlo || y > dhi || y.is_nan() {
            return Err(Error::Domain(format!("{y} outside domain [{dlo}, {dhi}]")));
        }
        let n = self.xs.len();
        if y < self.xs[0] {
            let t = y - self.xs[0];
            return Ok(self.y_lo[0] * t + 0.5 * self.left_slope * t * t);
        }
        let mut acc = 0.0;
        for i in 0..n {
            if i + 1 < n && y >= self.xs[i + 1] {
                // full chord segment
                let dx = self.xs[i + 1] - self.xs[i];
                acc += 0.5 * dx * (self.y_hi[i] + self.y_lo[i + 1]);
                continue;
            }
            let t = y - self.xs[i];
            if i + 1 < n {
                let m = (self.y_lo[i + 1] - self.y_hi[i]) / (self.xs[i + 1] - self.xs[i]);
                acc += self.y_hi[i] * t + 0.5 * m * t * t;
            } else {
                acc += self.y_hi[i] * t + 0.5 * self.right_slope * t * t;
            }
            return Ok(acc);
        }
        Ok(acc)
    }
}
