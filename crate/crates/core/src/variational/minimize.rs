//! Rate-function minimization over piecewise-constant controls.
//!
//! The target is a set of paths; the optimizer minimizes the control energy
//! plus an escalating quadratic penalty on the distance to the target,
//! descending with a limited-memory quasi-Newton step on the stacked control
//! vector and central finite-difference gradients. Multi-starts run in
//! parallel and each descent is deterministic given its start.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::sde::{SchemeSpec, SdeProblem};
use crate::vecops;

use super::skeleton::{solve_limit_ode, solve_skeleton, SkeletonSolution};
use super::ControlGrid;

/// Target set for the controlled skeleton.
#[derive(Debug, Clone)]
pub enum RateTarget {
    /// Terminal state in the half-space <normal, Y(T)> >= offset.
    HalfSpaceAtT { normal: Vec<f64>, offset: f64 },
    /// Terminal state within tol of a point.
    PointAtT { point: Vec<f64>, tol: f64 },
    /// Sup deviation from the limit path at least delta.
    TubeExit { delta: f64 },
    /// Whole path within sup-tol of a reference path on the grid.
    MatchPath { path: Vec<f64>, tol: f64 },
}

/// Optimizer knobs. Defaults implement the documented escalation schedule.
#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub rho0: f64,
    pub rho_factor: f64,
    pub rounds: usize,
    pub max_iter_per_round: usize,
    pub random_restarts: usize,
    pub restart_scale: f64,
    pub seed: u64,
    /// A control is accepted when its target violation is at most this.
    pub feasibility_slack: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            rho0: 10.0,
            rho_factor: 10.0,
            rounds: 5,
            max_iter_per_round: 120,
            random_restarts: 4,
            restart_scale: 0.5,
            seed: 0x5eed,
            feasibility_slack: 1e-4,
        }
    }
}

/// A rate-minimization instance: dynamics, target, grid, optimizer settings.
#[derive(Debug, Clone)]
pub struct RateProblem {
    pub problem: SdeProblem,
    pub target: RateTarget,
    pub scheme: SchemeSpec,
    pub options: MinimizeOptions,
}

impl RateProblem {
    pub fn new(problem: SdeProblem, target: RateTarget, scheme: SchemeSpec) -> Result<Self> {
        let rp = RateProblem {
            problem,
            target,
            scheme,
            options: MinimizeOptions::default(),
        };
        rp.validate()?;
        Ok(rp)
    }

    pub fn with_options(mut self, options: MinimizeOptions) -> Self {
        self.options = options;
        self
    }

    fn validate(&self) -> Result<()> {
        let d = self.problem.dim();
        let steps = self.scheme.steps_for(self.problem.t_horizon)?;
        match &self.target {
            RateTarget::HalfSpaceAtT { normal, offset } => {
                if normal.len() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        got: normal.len(),
                    });
                }
                if vecops::norm(normal) == 0.0
                    || normal.iter().any(|v| !v.is_finite())
                    || !offset.is_finite()
                {
                    return Err(Error::InvalidParameter {
                        name: "target",
                        reason: "half-space needs a finite nonzero normal and offset".into(),
                    });
                }
            }
            RateTarget::PointAtT { point, tol } => {
                if point.len() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        got: point.len(),
                    });
                }
                if !(tol.is_finite() && *tol > 0.0) || point.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter {
                        name: "target",
                        reason: "point target needs a finite point and tol > 0".into(),
                    });
                }
            }
            RateTarget::TubeExit { delta } => {
                if !(delta.is_finite() && *delta > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "target",
                        reason: "tube exit needs delta > 0".into(),
                    });
                }
            }
            RateTarget::MatchPath { path, tol } => {
                if path.len() != (steps + 1) * d {
                    return Err(Error::Grid(format!(
                        "reference path has {} values, grid needs {}",
                        path.len(),
                        (steps + 1) * d
                    )));
                }
                if !(tol.is_finite() && *tol > 0.0) || path.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter {
                        name: "target",
                        reason: "path target needs a finite path and tol > 0".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-start descent summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StartDiagnostic {
    pub start: usize,
    pub energy: f64,
    pub violation: f64,
    pub feasible: bool,
    pub iterations: usize,
}

/// Minimization outcome. `i_star` is the energy of the best feasible control
/// or infinity when no start reached the target within the slack.
#[derive(Debug)]
pub struct RateReport {
    pub h_star: ControlGrid,
    pub i_star: f64,
    pub y_star: SkeletonSolution,
    pub x0: SkeletonSolution,
    pub feasible: bool,
    pub violation: f64,
    pub diagnostics: Vec<StartDiagnostic>,
}

/// How far a skeleton is from the target set; zero on the set.
fn target_violation(target: &RateTarget, y: &SkeletonSolution, x0: &SkeletonSolution) -> f64 {
    match target {
        RateTarget::HalfSpaceAtT { normal, offset } => {
            let v = offset - vecops::dot(normal, y.terminal());
            (v / vecops::norm(normal)).max(0.0)
        }
        RateTarget::PointAtT { point, tol } => {
            (vecops::dist(y.terminal(), point) - tol).max(0.0)
        }
        RateTarget::TubeExit { delta } => {
            let mut sup = 0.0_f64;
            for k in 0..=y.steps() {
                sup = sup.max(vecops::dist(y.state(k), x0.state(k)));
            }
            (delta - sup).max(0.0)
        }
        RateTarget::MatchPath { path, tol } => {
            let d = y.dim();
            let mut sup = 0.0_f64;
            for k in 0..=y.steps() {
                sup = sup.max(vecops::dist(y.state(k), &path[k * d..(k + 1) * d]));
            }
            (sup - tol).max(0.0)
        }
    }
}

struct Objective<'a> {
    rp: &'a RateProblem,
    x0: &'a SkeletonSolution,
    law: &'a [EmpiricalMeasure],
    dim: usize,
    rho: f64,
}

impl Objective<'_> {
    /// Penalized objective at the stacked control vector; solver failures
    /// (non-finite escape under a wild control) count as a huge value so the
    /// line search backs away from them.
    fn eval(&self, v: &[f64]) -> f64 {
        let h = match ControlGrid::new(self.dim, self.rp.scheme.dt, v.to_vec()) {
            Ok(h) => h,
            Err(_) => return 1e100,
        };
        let y = match solve_skeleton(&self.rp.problem, &h, self.law, &self.rp.scheme) {
            Ok(y) => y,
            Err(_) => return 1e100,
        };
        let viol = target_violation(&self.rp.target, &y, self.x0);
        energy_of(v, self.rp.scheme.dt) + self.rho * viol * viol
    }
}

pub(crate) fn energy_of(v: &[f64], dt: f64) -> f64 {
    0.5 * dt * vecops::pairwise_sum_by(0, v.len(), &|i| v[i] * v[i])
}

/// Central finite-difference gradient with the documented relative step.
pub(crate) fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, v: &[f64], g: &mut [f64]) {
    let mut probe = v.to_vec();
    for i in 0..v.len() {
        let step = 1e-5 * (1.0 + v[i].abs());
        probe[i] = v[i] + step;
        let fp = f(&probe);
        probe[i] = v[i] - step;
        let fm = f(&probe);
        probe[i] = v[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
}

/// Two-loop L-BFGS with Armijo backtracking over a finite-difference
/// gradient. Returns iterations used.
pub(crate) fn lbfgs_descend(
    obj: &dyn Fn(&[f64]) -> f64,
    v: &mut Vec<f64>,
    max_iter: usize,
) -> usize {
    const M: usize = 8;
    let n = v.len();
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut g = vec![0.0; n];
    let mut f = obj(v);
    fd_gradient(obj, v, &mut g);
    for iter in 0..max_iter {
        let gnorm = vecops::norm(&g);
        if gnorm <= 1e-9 * (1.0 + f.abs()) {
            return iter;
        }
        // two-loop recursion for the search direction
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, yv) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / vecops::dot(yv, s);
            let a = rho * vecops::dot(s, &q);
            vecops::axpy(&mut q, -a, yv);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(yv)) = (s_hist.last(), y_hist.last()) {
            let gamma = vecops::dot(s, yv) / vecops::dot(yv, yv);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, yv), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let b = rho * vecops::dot(yv, &q);
            vecops::axpy(&mut q, a - b, s);
        }
        let mut dir: Vec<f64> = q.iter().map(|x| -x).collect();
        let mut slope = vecops::dot(&g, &dir);
        if !(slope < 0.0) {
            dir = g.iter().map(|x| -x).collect();
            slope = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
        }
        // Armijo backtracking
        let mut t = 1.0;
        let mut accepted = false;
        let mut f_new = f;
        let mut v_new = v.clone();
        for _ in 0..40 {
            for i in 0..n {
                v_new[i] = v[i] + t * dir[i];
            }
            f_new = obj(&v_new);
            if f_new <= f + 1e-4 * t * slope {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return iter;
        }
        let mut g_new = vec![0.0; n];
        fd_gradient(obj, &v_new, &mut g_new);
        let s: Vec<f64> = (0..n).map(|i| v_new[i] - v[i]).collect();
        let yv: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        if vecops::dot(&yv, &s) > 1e-12 * vecops::norm(&s) * vecops::norm(&yv) {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > M {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        *v = v_new;
        f = f_new;
        g = g_new;
        if vecops::norm(&g) * t <= 1e-13 * (1.0 + f.abs()) {
            return iter + 1;
        }
    }
    max_iter
}

/// Minimizes the control energy over controls whose skeleton hits the
/// target, by escalated quadratic penalty and multi-start descent.
pub fn minimize_rate(rp: &RateProblem) -> Result<RateReport> {
    rp.validate()?;
    let d = rp.problem.dim();
    let steps = rp.scheme.steps_for(rp.problem.t_horizon)?;
    let x0 = solve_limit_ode(&rp.problem, &rp.scheme)?;
    let law = x0.dirac_law()?;
    let opts = &rp.options;

    let n = steps * d;
    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n]];
    for r in 0..opts.random_restarts {
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

    let results: Vec<(usize, Vec<f64>, f64, f64, usize)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(idx, mut v)| {
            let mut iters = 0;
            let mut rho = opts.rho0;
            for _ in 0..opts.rounds {
                let obj = Objective {
                    rp,
                    x0: &x0,
                    law: &law,
                    dim: d,
                    rho,
                };
                iters += lbfgs_descend(&|v| obj.eval(v), &mut v, opts.max_iter_per_round);
                rho *= opts.rho_factor;
            }
            let h = ControlGrid::new(d, rp.scheme.dt, v.clone())
                .expect("descent preserves grid shape");
            let viol = match solve_skeleton(&rp.problem, &h, &law, &rp.scheme) {
                Ok(y) => target_violation(&rp.target, &y, &x0),
                Err(_) => f64::INFINITY,
            };
            let e = energy_of(&v, rp.scheme.dt);
            (idx, v, e, viol, iters)
        })
        .collect();

    let diagnostics: Vec<StartDiagnostic> = results
        .iter()
        .map(|(idx, _, e, viol, iters)| StartDiagnostic {
            start: *idx,
            energy: *e,
            violation: *viol,
            feasible: *viol <= opts.feasibility_slack,
            iterations: *iters,
        })
        .collect();

    // best feasible start by energy, first found wins ties
    let best = results
        .iter()
        .filter(|(_, _, _, viol, _)| *viol <= opts.feasibility_slack)
        .min_by(|a, b| a.2.partial_cmp(&b.2).expect("energies are finite"))
        .or_else(|| {
            // nothing feasible: report the closest approach
            results
                .iter()
                .min_by(|a, b| a.3.partial_cmp(&b.3).unwrap_or(std::cmp::Ordering::Equal))
        })
        .expect("at least the zero start ran");

    let h_star = ControlGrid::new(d, rp.scheme.dt, best.1.clone())?;
    let y_star = solve_skeleton(&rp.problem, &h_star, &law, &rp.scheme)?;
    let feasible = best.3 <= opts.feasibility_slack;
    let i_star = if feasible { best.2 } else { f64::INFINITY };
    Ok(RateReport {
        h_star,
        i_star,
        y_star,
        x0,
        feasible,
        violation: best.3,
        diagnostics,
    })
}
