//! Iterated-logarithm pipeline: contraction families, the rescaling
//! transform, distance to the energy ball of skeletons, and the sampling
//! harness.
//!
//! The scaling normalization here deliberately omits the classical sqrt(2),
//! so the Brownian limit shape has |g(1)| up to sqrt(2) rather than 1; every
//! oracle in this module uses the same normalization.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sde::{simulate_with, RngSpec, SchemeSpec, SdeProblem, SimOptions};
use crate::variational::{
    energy_of, lbfgs_descend, solve_limit_ode, solve_skeleton, ControlGrid, SkeletonSolution,
};
use crate::vecops;

/// Radial system of contractions centered at x: G_a(y) = x + (y - x)/a.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ContractionFamily {
    center: Vec<f64>,
}

impl ContractionFamily {
    pub fn radial(center: Vec<f64>) -> Result<Self> {
        if center.is_empty() || center.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "center",
                reason: "center must be nonempty and finite".into(),
            });
        }
        Ok(ContractionFamily { center })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn apply(&self, a: f64, y: &[f64]) -> Result<Vec<f64>> {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::InvalidParameter {
                name: "a",
                reason: "contraction parameter must be positive and finite".into(),
            });
        }
        if y.len() != self.center.len() {
            return Err(Error::Dimension {
                expected: self.center.len(),
                got: y.len(),
            });
        }
        Ok(self
            .center
            .iter()
            .zip(y)
            .map(|(c, v)| c + (v - c) / a)
            .collect())
    }

    /// Checks the defining axioms on random samples: fixes the center, is
    /// ordered in the parameter, inverts through reciprocals, and composes
    /// continuously near parameter product one. Returns the worst slack.
    pub fn check_axioms(&self, samples: usize, seed: u64) -> Result<f64> {
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0_f64;
        for _ in 0..samples.max(1) {
            let y: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    3.0 * z
                })
                .collect();
            let a = 1.0 + 3.0 * rng.random::<f64>();
            let theta = 1.0 + (a - 1.0) * rng.random::<f64>();
            // center is fixed for every parameter
            let at_center = self.apply(a, &self.center)?;
            worst = worst.max(vecops::dist(&at_center, &self.center));
            // larger parameter contracts at least as much
            let da = vecops::dist(&self.apply(a, &y)?, &self.center);
            let dth = vecops::dist(&self.apply(theta, &y)?, &self.center);
            worst = worst.max(da - dth);
            // unit parameter is the identity, reciprocal composition inverts
            worst = worst.max(vecops::dist(&self.apply(1.0, &y)?, &y));
            let round = self.apply(a, &self.apply(1.0 / a, &y)?)?;
            worst = worst.max(vecops::dist(&round, &y));
            // composition moves points by exactly |1 - 1/(a theta)| |y - x|
            let b = 1.0 / theta + 1e-9;
            let comp = self.apply(a, &self.apply(b, &y)?)?;
            let predicted = (1.0 - 1.0 / (a * b)).abs() * vecops::dist(&y, &self.center);
            worst = worst.max((vecops::dist(&comp, &y) - predicted).abs());
        }
        Ok(worst)
    }
}

/// Which end of the time axis the rescaling probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LilRegime {
    /// u > e, scale sqrt(u log log u).
    LargeTime,
    /// u < 1/e, scale sqrt(u log log (1/u)).
    SmallTime,
}

/// Geometric grid u = c^j (large time) or u = c^-j (small time) with the
/// regime guard baked in.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LilSpec {
    pub regime: LilRegime,
    pub c: f64,
    pub j_lo: u32,
    pub j_hi: u32,
}

impl LilSpec {
    pub fn new(regime: LilRegime, c: f64, j_lo: u32, j_hi: u32) -> Result<Self> {
        let spec = LilSpec {
            regime,
            c,
            j_lo,
            j_hi,
        };
        if !(c.is_finite() && c > 1.0) {
            return Err(Error::InvalidParameter {
                name: "c",
                reason: "grid ratio must exceed 1".into(),
            });
        }
        if j_lo == 0 || j_lo > j_hi {
            return Err(Error::InvalidParameter {
                name: "j_range",
                reason: "need 1 <= j_lo <= j_hi".into(),
            });
        }
        // every grid point must sit strictly inside the regime; the nearest
        // to the boundary is j_lo on both ends
        spec.scale(spec.u_at(j_lo))?;
        Ok(spec)
    }

    pub fn u_at(&self, j: u32) -> f64 {
        match self.regime {
            LilRegime::LargeTime => self.c.powi(j as i32),
            LilRegime::SmallTime => self.c.powi(-(j as i32)),
        }
    }

    pub fn js(&self) -> impl Iterator<Item = u32> {
        self.j_lo..=self.j_hi
    }

    /// The normalizing scale at u; errors outside the regime, where the
    /// iterated logarithm is not positive.
    pub fn scale(&self, u: f64) -> Result<f64> {
        match self.regime {
            LilRegime::LargeTime => {
                if !(u.is_finite() && u > std::f64::consts::E) {
                    return Err(Error::Regime(format!(
                        "large-time scaling needs u > e, got {u}"
                    )));
                }
                Ok((u * u.ln().ln()).sqrt())
            }
            LilRegime::SmallTime => {
                if !(u.is_finite() && u > 0.0 && u < 1.0 / std::f64::consts::E) {
                    return Err(Error::Regime(format!(
                        "small-time scaling needs 0 < u < 1/e, got {u}"
                    )));
                }
                Ok((u * u.recip().ln().ln()).sqrt())
            }
        }
    }
}

/// Applies the contraction at the regime scale pointwise to a flat path.
/// The input spans [0, uT] on its own grid; the output is read on [0, T]
/// with the same node count (time relabeling t -> t/u).
pub fn lil_transform(
    y_path: &[f64],
    dim: usize,
    u: f64,
    spec: &LilSpec,
    family: &ContractionFamily,
) -> Result<Vec<f64>> {
    if dim == 0 || family.dim() != dim {
        return Err(Error::Dimension {
            expected: dim.max(1),
            got: family.dim(),
        });
    }
    if y_path.is_empty() || y_path.len() % dim != 0 {
        return Err(Error::InvalidParameter {
            name: "y_path",
            reason: "flat path length must be a positive multiple of the dimension".into(),
        });
    }
    let a = spec.scale(u)?;
    let mut out = Vec::with_capacity(y_path.len());
    for p in y_path.chunks(dim) {
        out.extend_from_slice(&family.apply(a, p)?);
    }
    Ok(out)
}

/// Options for the distance solver.
#[derive(Debug, Clone)]
pub struct LimitSetOptions {
    pub budget: f64,
    pub max_iter: usize,
    pub random_starts: usize,
    pub restart_scale: f64,
    pub seed: u64,
}

impl Default for LimitSetOptions {
    fn default() -> Self {
        LimitSetOptions {
            budget: 1.0,
            max_iter: 120,
            random_starts: 2,
            restart_scale: 0.5,
            seed: 0x11aa,
        }
    }
}

/// Distance from a path to the set of skeletons with control energy within
/// the budget, plus the witness that attains it.
#[derive(Debug)]
pub struct LimitSetReport {
    pub distance: f64,
    pub witness_h: ControlGrid,
    pub witness: SkeletonSolution,
    /// True when the best descent ran out of iterations; the distance is
    /// then an upper bound rather than a converged minimum.
    pub approximate: bool,
}

fn project_budget(v: &[f64], dt: f64, budget: f64) -> Vec<f64> {
    let e = energy_of(v, dt);
    if e <= budget || e == 0.0 {
        v.to_vec()
    } else {
        let s = (budget / e).sqrt();
        v.iter().map(|x| x * s).collect()
    }
}

/// Minimizes sup_t |q_t - Y^h_t| over controls with energy(h) <= budget.
/// The energy cap enters as an exact radial projection inside the
/// objective, so descent stays well-defined at the boundary.
pub fn limit_set_distance(
    q: &[f64],
    problem: &SdeProblem,
    scheme: &SchemeSpec,
    opts: &LimitSetOptions,
) -> Result<LimitSetReport> {
    let d = problem.dim();
    let steps = scheme.steps_for(problem.t_horizon)?;
    if q.len() != (steps + 1) * d {
        return Err(Error::Grid(format!(
            "path has {} values, grid needs {}",
            q.len(),
            (steps + 1) * d
        )));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "q",
            reason: "path must be finite".into(),
        });
    }
    if !(opts.budget.is_finite() && opts.budget > 0.0) {
        return Err(Error::InvalidParameter {
            name: "budget",
            reason: "energy budget must be positive".into(),
        });
    }
    let dt = scheme.dt;
    let x0 = solve_limit_ode(problem, scheme)?;
    let law = x0.dirac_law()?;

    let sup_dist = |v: &[f64]| -> f64 {
        let hv = project_budget(v, dt, opts.budget);
        let h = match ControlGrid::new(d, dt, hv) {
            Ok(h) => h,
            Err(_) => return 1e100,
        };
        let y = match solve_skeleton(problem, &h, &law, scheme) {
            Ok(y) => y,
            Err(_) => return 1e100,
        };
        let mut sup = 0.0_f64;
        for k in 0..=steps {
            sup = sup.max(vecops::dist(y.state(k), &q[k * d..(k + 1) * d]));
        }
        sup
    };

    // starts: rest, finite-difference tracking of q, then random
    let n = steps * d;
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n]];
    let mut tracking = vec![0.0; n];
    for k in 0..steps {
        for c in 0..d {
            tracking[k * d + c] = (q[(k + 1) * d + c] - q[k * d + c]) / dt;
        }
    }
    starts.push(tracking);
    for r in 0..opts.random_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64 + 1));
        starts.push(
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * opts.restart_scale
                })
                .collect(),
        );
    }

    let results: Vec<(Vec<f64>, f64, usize)> = starts
        .into_par_iter()
        .map(|mut v| {
            let iters = lbfgs_descend(&sup_dist, &mut v, opts.max_iter);
            let f = sup_dist(&v);
            (v, f, iters)
        })
        .collect();
    let best = results
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("distances are finite"))
        .expect("at least one start");

    let h_star = ControlGrid::new(d, dt, project_budget(&best.0, dt, opts.budget))?;
    let witness = solve_skeleton(problem, &h_star, &law, scheme)?;
    Ok(LimitSetReport {
        distance: best.1,
        witness_h: h_star,
        witness,
        approximate: best.2 >= opts.max_iter,
    })
}

/// Harness options: how many paths feed the variance statistic and how many
/// of them get the (expensive) distance treatment.
#[derive(Debug, Clone)]
pub struct LilHarnessOptions {
    pub dist_paths: usize,
    pub limit_set: LimitSetOptions,
}

impl Default for LilHarnessOptions {
    fn default() -> Self {
        LilHarnessOptions {
            dist_paths: 8,
            limit_set: LimitSetOptions::default(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LilRow {
    pub j: u32,
    pub u: f64,
    pub scale: f64,
    /// Sample variance (coordinate trace) of the transformed terminal value.
    pub var_q1: f64,
    /// Pipeline identity u / scale^2; for the Brownian configuration this
    /// is the exact terminal variance.
    pub brownian_var_oracle: f64,
    pub var_se: f64,
    pub max_abs_q1: f64,
    /// Soft shape bound exceeded (reported, never fatal).
    pub soft_bound_exceeded: bool,
    /// Sorted distances to the energy ball for the sampled paths.
    pub distances: Vec<f64>,
    pub median_distance: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LilReport {
    pub rows: Vec<LilRow>,
    /// sqrt(2) shape extreme, widened for desk-scale sampling noise.
    pub soft_bound: f64,
    /// Scales strictly increase along the grid (large time) or decrease
    /// (small time, where u shrinks).
    pub scale_monotone: bool,
}

/// Simulates paths over [0, uT] per grid point, transforms them to [0, T],
/// and reports the pipeline statistics: terminal variance against the
/// scaling identity, the shape extreme, and distances to the energy ball.
pub fn lil_harness(
    problem: &SdeProblem,
    spec: &LilSpec,
    family: &ContractionFamily,
    n_paths: usize,
    scheme: &SchemeSpec,
    rng: &RngSpec,
    opts: &LilHarnessOptions,
) -> Result<LilReport> {
    let d = problem.dim();
    if family.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: family.dim(),
        });
    }
    if n_paths < 2 {
        return Err(Error::InvalidParameter {
            name: "n_paths",
            reason: "need at least two paths".into(),
        });
    }
    let base_steps = scheme.steps_for(problem.t_horizon)?;
    let soft_bound = std::f64::consts::SQRT_2 * 1.25;

    let mut rows = Vec::new();
    for (idx, j) in spec.js().enumerate() {
        let u = spec.u_at(j);
        let scale = spec.scale(u)?;
        // stretch the horizon and the step together: node count stays
        // fixed, so the transformed path lives on the standard grid
        let mut p = problem.clone();
        p.t_horizon = u * problem.t_horizon;
        let mut sch = *scheme;
        sch.dt = u * scheme.dt;
        let ens = simulate_with(
            &p,
            &sch,
            n_paths,
            &rng.block(idx as u64)?,
            &SimOptions::default(),
        )?;

        let mut terminals = vec![0.0; n_paths * d];
        let mut max_abs_q1 = 0.0_f64;
        let mut transformed: Vec<Vec<f64>> = Vec::with_capacity(opts.dist_paths.min(n_paths));
        for i in 0..n_paths {
            let path = ens.particle_path(i);
            let q = lil_transform(&path, d, u, spec, family)?;
            let qt = &q[base_steps * d..(base_steps + 1) * d];
            terminals[i * d..(i + 1) * d].copy_from_slice(qt);
            max_abs_q1 = max_abs_q1.max(vecops::norm(qt));
            if transformed.len() < opts.dist_paths {
                transformed.push(q);
            }
        }
        let mut var_q1 = 0.0;
        for c in 0..d {
            let mean =
                vecops::pairwise_sum_by(0, n_paths, &|i| terminals[i * d + c]) / n_paths as f64;
            let ss = vecops::pairwise_sum_by(0, n_paths, &|i| {
                let dv = terminals[i * d + c] - mean;
                dv * dv
            });
            var_q1 += ss / (n_paths as f64 - 1.0);
        }
        let brownian_var_oracle = u / (scale * scale);
        let var_se = brownian_var_oracle * (2.0 / (n_paths as f64 - 1.0)).sqrt();

        let mut distances: Vec<f64> = transformed
            .iter()
            .map(|q| limit_set_distance(q, problem, scheme, &opts.limit_set).map(|r| r.distance))
            .collect::<Result<_>>()?;
        distances.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let median_distance = if distances.is_empty() {
            None
        } else {
            Some(distances[distances.len() / 2])
        };
        rows.push(LilRow {
            j,
            u,
            scale,
            var_q1,
            brownian_var_oracle,
            var_se,
            max_abs_q1,
            soft_bound_exceeded: max_abs_q1 > soft_bound,
            distances,
            median_distance,
        });
    }
    let scale_monotone = match spec.regime {
        LilRegime::LargeTime => rows.windows(2).all(|w| w[1].scale > w[0].scale),
        LilRegime::SmallTime => rows.windows(2).all(|w| w[1].scale < w[0].scale),
    };
    Ok(LilReport {
        rows,
        soft_bound,
        scale_monotone,
    })
}
