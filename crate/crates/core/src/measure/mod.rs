//! Empirical measures and exact Wasserstein-2 distances.
//!
//! All laws in the simulator are equal-weight clouds of N points, so W2
//! reduces to an optimal assignment problem and can be computed exactly:
//! sorted pairing in one dimension, exhaustive search for small clouds, and
//! the Hungarian algorithm above that.

use crate::error::{Error, Result};
use crate::vecops;

/// Cloud of N points in R^d with equal weights 1/N. Point storage is flat,
/// row-major, so views over simulation state buffers stay cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "dimension must be positive".into(),
            });
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidParameter {
                name: "points",
                reason: format!("flat length {} is not a positive multiple of {dim}", points.len()),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "points",
                reason: "all points must be finite".into(),
            });
        }
        Ok(EmpiricalMeasure { dim, points })
    }

    pub fn from_points(pts: &[Vec<f64>]) -> Result<Self> {
        let dim = pts.first().map(|p| p.len()).unwrap_or(0);
        if pts.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidParameter {
                name: "points",
                reason: "points must share one dimension".into(),
            });
        }
        EmpiricalMeasure::new(dim, pts.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one point
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn flat(&self) -> &[f64] {
        &self.points
    }

    /// Mean of the cloud, one coordinate at a time with pairwise summation
    /// so the result is independent of point order only up to permutations
    /// of the input, never of scheduling.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len();
        (0..self.dim)
            .map(|c| vecops::pairwise_sum_by(0, n, &|i| self.points[i * self.dim + c]) / n as f64)
            .collect()
    }

    /// Second moment (1/N) sum |x_i|^2.
    pub fn second_moment(&self) -> f64 {
        let n = self.len();
        vecops::pairwise_sum_by(0, n, &|i| vecops::norm_sq(self.point(i))) / n as f64
    }
}

/// Exact W2 between equal-count clouds. Errors on mismatched counts or
/// dimensions; equal-weight assignment coupling only.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::Dimension {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if mu.len() != nu.len() {
        return Err(Error::ParticleCount {
            left: mu.len(),
            right: nu.len(),
        });
    }
    // canonical argument order makes the value bit-identical under swaps
    let (a, b) = if mu.flat() <= nu.flat() { (mu, nu) } else { (nu, mu) };
    let n = a.len();
    let avg = if a.dim() == 1 {
        let mut xs: Vec<f64> = a.flat().to_vec();
        let mut ys: Vec<f64> = b.flat().to_vec();
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
        vecops::pairwise_sum_by(0, n, &|i| {
            let d = xs[i] - ys[i];
            d * d
        }) / n as f64
    } else {
        let assignment = if n <= 8 {
            exhaustive_assignment(a, b)
        } else {
            hungarian_assignment(a, b)
        };
        vecops::pairwise_sum_by(0, n, &|i| vecops::dist_sq(a.point(i), b.point(assignment[i])))
            / n as f64
    };
    Ok(avg.max(0.0).sqrt())
}

/// Minimal-cost assignment by branch-and-bound over all permutations.
/// Exact oracle for small clouds.
fn exhaustive_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Vec<usize> {
    let n = a.len();
    let cost = |i: usize, j: usize| vecops::dist_sq(a.point(i), b.point(j));
    let mut best = f64::INFINITY;
    let mut best_perm = (0..n).collect::<Vec<_>>();
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(
        i: usize,
        n: usize,
        acc: f64,
        cost: &dyn Fn(usize, usize) -> f64,
        perm: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut f64,
        best_perm: &mut Vec<usize>,
    ) {
        if acc >= *best {
            return;
        }
        if i == n {
            *best = acc;
            best_perm.clone_from(perm);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                perm.push(j);
                rec(i + 1, n, acc + cost(i, j), cost, perm, used, best, best_perm);
                perm.pop();
                used[j] = false;
            }
        }
    }
    rec(0, n, 0.0, &cost, &mut perm, &mut used, &mut best, &mut best_perm);
    best_perm
}

/// Minimal-cost assignment via shortest augmenting paths with potentials.
/// O(n^3); exact up to floating-point comparisons of path lengths.
fn hungarian_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Vec<usize> {
    let n = a.len();
    let cost = |i: usize, j: usize| vecops::dist_sq(a.point(i), b.point(j));
    // 1-based columns; p[j] = row matched to column j, p[0] = current row
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![0_usize; n + 1];
    let mut way = vec![0_usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0_usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0_usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0_usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Comparison of the optimal coupling against the index pairing.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CouplingBoundReport {
    pub w2: f64,
    pub bound: f64,
    pub ok: bool,
}

/// Checks W2(emp X, emp Y) <= sqrt(mean |X_i - Y_i|^2): the index pairing is
/// one admissible coupling, so the optimal one can only do better.
pub fn w2_coupling_bound_check(
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
) -> Result<CouplingBoundReport> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    if x.len() != y.len() {
        return Err(Error::ParticleCount {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len();
    let mean_sq =
        vecops::pairwise_sum_by(0, n, &|i| vecops::dist_sq(x.point(i), y.point(i))) / n as f64;
    let bound = mean_sq.max(0.0).sqrt();
    let w2 = wasserstein2(x, y)?;
    Ok(CouplingBoundReport {
        w2,
        bound,
        ok: w2 <= bound + 1e-10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn m1(pts: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(1, pts.to_vec()).unwrap()
    }

    #[test]
    fn second_moment_examples() {
        assert_eq!(m1(&[0.0]).second_moment(), 0.0);
        let p = EmpiricalMeasure::new(2, vec![3.0, 4.0]).unwrap();
        assert_eq!(p.second_moment(), 25.0);
        assert!((m1(&[1.0, -1.0, 2.0]).second_moment() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn w2_identical_clouds_is_zero() {
        let mu = m1(&[0.4, -1.0, 2.0]);
        assert_eq!(wasserstein2(&mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn w2_sorted_pairing_1d() {
        let mu = m1(&[0.0, 1.0]);
        let nu = m1(&[1.0, 2.0]);
        assert!((wasserstein2(&mu, &nu).unwrap() - 1.0).abs() < 1e-15);
        // transposed pairing has distance zero as multisets
        let a = m1(&[0.0, 1.0]);
        let b = m1(&[1.0, 0.0]);
        assert_eq!(wasserstein2(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn w2_two_point_planar() {
        let mu = EmpiricalMeasure::new(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let nu = EmpiricalMeasure::new(2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((wasserstein2(&mu, &nu).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_counts_rejected() {
        let mu = m1(&[0.0]);
        let nu = m1(&[0.0, 1.0]);
        assert!(matches!(
            wasserstein2(&mu, &nu),
            Err(Error::ParticleCount { .. })
        ));
    }

    #[test]
    fn coupling_bound_examples() {
        let x = m1(&[0.5, -1.0]);
        let r = w2_coupling_bound_check(&x, &x).unwrap();
        assert_eq!((r.w2, r.bound), (0.0, 0.0));
        assert!(r.ok);

        let x = m1(&[0.0, 1.0]);
        let y = m1(&[1.0, 0.0]);
        let r = w2_coupling_bound_check(&x, &y).unwrap();
        assert_eq!(r.w2, 0.0);
        assert!((r.bound - 1.0).abs() < 1e-15);
        assert!(r.ok);

        let r = w2_coupling_bound_check(&m1(&[0.0]), &m1(&[2.0])).unwrap();
        assert!((r.w2 - 2.0).abs() < 1e-15);
        assert!((r.bound - 2.0).abs() < 1e-15);
        assert!(r.ok);
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmpiricalMeasure {
        let pts: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        EmpiricalMeasure::new(d, pts).unwrap()
    }

    #[test]
    fn hungarian_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [3, 5, 7, 8] {
            for d in [2, 3] {
                let a = random_cloud(&mut rng, n, d);
                let b = random_cloud(&mut rng, n, d);
                let pe = exhaustive_assignment(&a, &b);
                let ph = hungarian_assignment(&a, &b);
                let cost = |perm: &[usize]| -> f64 {
                    (0..n).map(|i| vecops::dist_sq(a.point(i), b.point(perm[i]))).sum()
                };
                assert!(
                    (cost(&pe) - cost(&ph)).abs() < 1e-10,
                    "n={n} d={d}: {} vs {}",
                    cost(&pe),
                    cost(&ph)
                );
            }
        }
    }

    #[test]
    fn sorted_pairing_matches_assignment_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 4, 6] {
            let a = random_cloud(&mut rng, n, 1);
            let b = random_cloud(&mut rng, n, 1);
            let direct = wasserstein2(&a, &b).unwrap();
            let perm = exhaustive_assignment(&a, &b);
            let total: f64 =
                (0..n).map(|i| vecops::dist_sq(a.point(i), b.point(perm[i]))).sum();
            let via_assign = (total / n as f64).sqrt();
            assert!((direct - via_assign).abs() < 1e-12, "n={n}: {direct} vs {via_assign}");
        }
    }

    #[test]
    fn metric_axioms_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let a = random_cloud(&mut rng, 12, 2);
            let b = random_cloud(&mut rng, 12, 2);
            let c = random_cloud(&mut rng, 12, 2);
            let ab = wasserstein2(&a, &b).unwrap();
            let ba = wasserstein2(&b, &a).unwrap();
            assert_eq!(ab, ba);
            let ac = wasserstein2(&a, &c).unwrap();
            let cb = wasserstein2(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-10);
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_cloud(&mut rng, 9, 2);
        let b = random_cloud(&mut rng, 9, 2);
        let v = [0.7, -2.3];
        let shift = |m: &EmpiricalMeasure| {
            let pts: Vec<f64> = m
                .flat()
                .chunks(2)
                .flat_map(|p| [p[0] + v[0], p[1] + v[1]])
                .collect();
            EmpiricalMeasure::new(2, pts).unwrap()
        };
        let d0 = wasserstein2(&a, &b).unwrap();
        let d1 = wasserstein2(&shift(&a), &shift(&b)).unwrap();
        assert!((d0 - d1).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(EmpiricalMeasure::new(1, vec![f64::NAN]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![1.0, f64::INFINITY]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![1.0]).is_err());
    }
}
