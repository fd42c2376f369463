//! Small dense-vector helpers used by the hot loops.
//!
//! States are flat `&[f64]` slices of length d (or n*d row-major). Summations
//! that feed determinism-sensitive results go through [`pairwise_sum_by`],
//! whose split points depend only on the index range, so the result is one
//! fixed floating-point expression no matter how many workers produced the
//! inputs.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// y += c * x
pub fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] += c * x[i];
    }
}

/// Row-major (d x d) matrix times vector.
pub fn mat_vec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    debug_assert_eq!(m.len(), d * d);
    debug_assert_eq!(out.len(), d);
    for i in 0..d {
        out[i] = dot(&m[i * d..(i + 1) * d], x);
    }
}

/// Frobenius norm of a row-major matrix.
pub fn frobenius(m: &[f64]) -> f64 {
    norm(m)
}

const PAIRWISE_LEAF: usize = 32;

/// Pairwise (cascade) sum of `f(i)` for `i` in `lo..hi`. Fixed recursion
/// shape: the split points depend only on the index range, so the result is
/// one deterministic floating-point expression.
pub fn pairwise_sum_by(lo: usize, hi: usize, f: &dyn Fn(usize) -> f64) -> f64 {
    let n = hi - lo;
    if n <= PAIRWISE_LEAF {
        let mut s = 0.0;
        for i in lo..hi {
            s += f(i);
        }
        s
    } else {
        let mid = lo + n / 2;
        pairwise_sum_by(lo, mid, f) + pairwise_sum_by(mid, hi, f)
    }
}

/// Solve (I + M) y = x for symmetric positive semidefinite M (row-major d x d)
/// by Cholesky of I + M, which is positive definite. Panics on dimension
/// mismatch; returns None if the factorization encounters a non-positive
/// pivot (M not PSD).
pub fn solve_identity_plus_psd(m: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let d = x.len();
    assert_eq!(m.len(), d * d);
    // a = I + M, factored in place as L L^T
    let mut a: Vec<f64> = m.to_vec();
    for i in 0..d {
        a[i * d + i] += 1.0;
    }
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if diag <= 0.0 {
            return None;
        }
        let l = diag.sqrt();
        a[j * d + j] = l;
        for i in (j + 1)..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / l;
        }
    }
    // forward then backward substitution
    let mut y = x.to_vec();
    for i in 0..d {
        for k in 0..i {
            let t = a[i * d + k] * y[k];
            y[i] -= t;
        }
        y[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            let t = a[k * d + i] * y[k];
            y[i] -= t;
        }
        y[i] /= a[i * d + i];
    }
    Some(y)
}

/// LDL^T check that a symmetric matrix is PSD up to `tol` on the pivots.
pub fn is_psd(m: &[f64], d: usize, tol: f64) -> bool {
    let mut a = m.to_vec();
    for j in 0..d {
        let pivot = a[j * d + j];
        if pivot < -tol {
            return false;
        }
        if pivot.abs() <= tol {
            // zero pivot: the whole row/column must vanish for PSD
            for i in (j + 1)..d {
                if a[i * d + j].abs() > tol.sqrt() {
                    return false;
                }
            }
            continue;
        }
        for i in (j + 1)..d {
            let factor = a[i * d + j] / pivot;
            for k in (j + 1)..d {
                a[i * d + k] -= factor * a[j * d + k];
            }
            a[i * d + j] = 0.0;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        let by = pairwise_sum_by(0, v.len(), &|i| v[i]);
        assert!((by - naive).abs() < 1e-9);
        // shifting the window shifts the split points with it
        let tail = pairwise_sum_by(100, v.len(), &|i| v[i]);
        assert!((by - tail - pairwise_sum_by(0, 100, &|i| v[i])).abs() < 1e-9);
    }

    #[test]
    fn solve_identity_plus_psd_roundtrip() {
        // M = [[1, 0.5], [0.5, 2]] is PD
        let m = [1.0, 0.5, 0.5, 2.0];
        let x = [1.0, -3.0];
        let y = solve_identity_plus_psd(&m, &x).unwrap();
        // (I+M) y should reproduce x
        let mut back = [0.0; 2];
        let a = [2.0, 0.5, 0.5, 3.0];
        mat_vec(&a, &y, &mut back);
        assert!((back[0] - x[0]).abs() < 1e-12);
        assert!((back[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn psd_detects_indefinite() {
        let good = [2.0, 1.0, 1.0, 2.0];
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert!(is_psd(&good, 2, 1e-12));
        assert!(!is_psd(&bad, 2, 1e-12));
        let singular = [1.0, 1.0, 1.0, 1.0];
        assert!(is_psd(&singular, 2, 1e-12));
    }
}
