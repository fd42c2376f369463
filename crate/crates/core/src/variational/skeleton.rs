//! Deterministic flows of the theory: the zero-noise limit path, the
//! controlled skeleton driving the rate function, and the linearized
//! fluctuation skeleton.
//!
//! The first two reuse the particle engine at eps = 0 with one particle, so
//! their discretization agrees bit for bit with the stochastic runs they
//! normalize. The fluctuation skeleton integrates a linearized flow with its
//! own loop because its drift uses the Jacobian of b, not b itself.

use crate::coeffs::MeanFieldCoefficients;
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::monotone::OperatorKind;
use crate::sde::{simulate, simulate_controlled, PathEnsemble, RngSpec, SchemeMethod, SchemeSpec,
    SdeProblem};
use crate::vecops;

use super::ControlGrid;

/// A deterministic path with its reaction bookkeeping: the limit path X0,
/// a controlled skeleton Y^h, or a fluctuation skeleton nu^psi.
#[derive(Debug, Clone)]
pub struct SkeletonSolution {
    dim: usize,
    dt: f64,
    /// Flat (steps+1) x d path.
    path: Vec<f64>,
    /// Flat (steps+1) x d cumulative reaction term.
    k_path: Vec<f64>,
    k_tv: f64,
    /// The control that produced the path; identically zero for limit paths.
    pub control: ControlGrid,
    /// Flat (steps+1) x d centers of the Dirac law the coefficients saw.
    law_centers: Vec<f64>,
    /// Distance-to-domain bound inherited from the scheme (0 for projection).
    pub domain_gap_bound: f64,
}

impl SkeletonSolution {
    fn from_single_particle(ens: &PathEnsemble, control: ControlGrid, law_centers: Vec<f64>) -> Self {
        SkeletonSolution {
            dim: ens.dim(),
            dt: ens.dt,
            path: ens.particle_path(0),
            k_path: (0..ens.recorded())
                .flat_map(|r| ens.k_state(0, r).to_vec())
                .collect(),
            k_tv: ens.k_tv_total(0),
            control,
            law_centers,
            domain_gap_bound: ens.domain_gap_bound,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.path.len() / self.dim - 1
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.path[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.steps())
    }

    pub fn k_state(&self, k: usize) -> &[f64] {
        &self.k_path[k * self.dim..(k + 1) * self.dim]
    }

    pub fn k_tv(&self) -> f64 {
        self.k_tv
    }

    pub fn path_flat(&self) -> &[f64] {
        &self.path
    }

    /// Flat (steps+1) x d centers of the Dirac law path the run was fed.
    pub fn law_centers(&self) -> &[f64] {
        &self.law_centers
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| k as f64 * self.dt).collect()
    }

    /// Sup distance to another skeleton on the shared grid.
    pub fn sup_distance(&self, other: &SkeletonSolution) -> Result<f64> {
        if self.dim != other.dim || self.path.len() != other.path.len() {
            return Err(Error::Grid(
                "skeletons live on different grids".into(),
            ));
        }
        let mut sup = 0.0_f64;
        for k in 0..=self.steps() {
            sup = sup.max(vecops::dist(self.state(k), other.state(k)));
        }
        Ok(sup)
    }

    /// The Dirac measure path along this skeleton, one atom per grid time.
    pub fn dirac_law(&self) -> Result<Vec<EmpiricalMeasure>> {
        (0..=self.steps())
            .map(|k| EmpiricalMeasure::new(self.dim, self.state(k).to_vec()))
            .collect()
    }
}

/// Zero-noise limit path: Euler integration of dx/dt in b(x, dirac_x) - A(x),
/// the measure argument frozen to the Dirac at the current state.
pub fn solve_limit_ode(problem: &SdeProblem, scheme: &SchemeSpec) -> Result<SkeletonSolution> {
    let mut p0 = problem.clone();
    p0.eps = 0.0;
    let ens = simulate(&p0, scheme, 1, &RngSpec::new(0))?;
    let path = ens.particle_path(0);
    let steps = scheme.steps_for(problem.t_horizon)?;
    let h0 = ControlGrid::zero(problem.dim(), scheme.dt, steps)?;
    Ok(SkeletonSolution::from_single_particle(&ens, h0, path))
}

/// Controlled skeleton: integrates dY/dt in b(Y, mu_t) + sigma(Y, mu_t) h - A(Y)
/// against the frozen law path `law_path` (the Dirac path of the limit ODE).
pub fn solve_skeleton(
    problem: &SdeProblem,
    h: &ControlGrid,
    law_path: &[EmpiricalMeasure],
    scheme: &SchemeSpec,
) -> Result<SkeletonSolution> {
    let mut p0 = problem.clone();
    p0.eps = 0.0;
    let ens = simulate_controlled(&p0, law_path, h, scheme, 1, &RngSpec::new(0))?;
    let mut centers = Vec::with_capacity(law_path.len() * problem.dim());
    for m in law_path {
        centers.extend_from_slice(&m.mean());
    }
    Ok(SkeletonSolution::from_single_particle(&ens, h.clone(), centers))
}

/// Linearized fluctuation skeleton: integrates
/// d(nu)/dt = grad_b(X0, dirac) nu + sigma(X0, dirac) psi - A(nu), nu(0) = 0,
/// with the constraint acting on nu through the chosen scheme.
pub fn solve_mdp_skeleton(
    problem: &SdeProblem,
    psi: &ControlGrid,
    x0: &SkeletonSolution,
    scheme: &SchemeSpec,
) -> Result<SkeletonSolution> {
    let d = problem.dim();
    let steps = scheme.steps_for(problem.t_horizon)?;
    scheme_supports(problem, scheme)?;
    if x0.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x0.dim(),
        });
    }
    if x0.steps() != steps || (x0.dt() - scheme.dt).abs() > 1e-12 * scheme.dt.max(1.0) {
        return Err(Error::Grid(
            "limit path grid does not match the solver grid".into(),
        ));
    }
    psi.check_grid(d, scheme.dt, steps)?;
    if problem.operator.domain().distance(&vec![0.0; d]) > 1e-12 {
        return Err(Error::Domain(
            "fluctuation skeleton starts at 0, which is outside the operator domain".into(),
        ));
    }

    let coeffs: &MeanFieldCoefficients = &problem.coeffs;
    let dt = scheme.dt;
    let alpha = scheme.alpha();
    let mut nu = vec![0.0; d];
    let mut k_cum = vec![0.0; d];
    let mut k_tv = 0.0;
    let mut max_yos = 0.0_f64;
    let mut path = Vec::with_capacity((steps + 1) * d);
    let mut k_path = Vec::with_capacity((steps + 1) * d);
    path.extend_from_slice(&nu);
    k_path.extend_from_slice(&k_cum);

    let mut drift = vec![0.0; d];
    let mut forcing = vec![0.0; d];
    let mut prop = vec![0.0; d];
    for k in 0..steps {
        let xk = x0.state(k);
        let dirac = EmpiricalMeasure::new(d, xk.to_vec())?;
        let grad = coeffs.grad_drift(xk, &dirac)?;
        vecops::mat_vec(&grad, &nu, &mut drift);
        coeffs.diffusion_apply_to(xk, xk, Some(&dirac), psi.value(k), &mut forcing);
        for c in 0..d {
            prop[c] = nu[c] + (drift[c] + forcing[c]) * dt;
        }
        let dk: Vec<f64> = match scheme.method {
            SchemeMethod::Penalized => {
                if matches!(problem.operator.kind(), OperatorKind::Zero) {
                    nu.copy_from_slice(&prop);
                    vec![0.0; d]
                } else {
                    let y = problem.operator.yosida(alpha, &nu)?;
                    max_yos = max_yos.max(vecops::norm(&y));
                    let dk: Vec<f64> = y.iter().map(|v| v * dt).collect();
                    for c in 0..d {
                        nu[c] = prop[c] - dk[c];
                    }
                    dk
                }
            }
            SchemeMethod::Projection => {
                let mut next = vec![0.0; d];
                problem.operator.domain().project_to(&prop, &mut next);
                let dk: Vec<f64> = (0..d).map(|c| prop[c] - next[c]).collect();
                nu.copy_from_slice(&next);
                dk
            }
        };
        k_tv += vecops::norm(&dk);
        for c in 0..d {
            k_cum[c] += dk[c];
        }
        if nu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k, particle: 0 });
        }
        path.extend_from_slice(&nu);
        k_path.extend_from_slice(&k_cum);
    }

    let domain_gap_bound = match scheme.method {
        SchemeMethod::Penalized => alpha * max_yos,
        SchemeMethod::Projection => 0.0,
    };
    Ok(SkeletonSolution {
        dim: d,
        dt,
        path,
        k_path,
        k_tv,
        control: psi.clone(),
        law_centers: x0.path_flat().to_vec(),
        domain_gap_bound,
    })
}

fn scheme_supports(problem: &SdeProblem, scheme: &SchemeSpec) -> Result<()> {
    // reuse the engine's compatibility rule by probing a zero-step run is
    // wasteful; replicate the single check instead
    if scheme.method == SchemeMethod::Projection {
        let mut kind = problem.operator.kind();
        loop {
            match kind {
                OperatorKind::NormalCone => return Ok(()),
                OperatorKind::SubdiffConvex(f)
                    if matches!(f, crate::monotone::ConvexFn::Indicator { .. }) =>
                {
                    return Ok(())
                }
                OperatorKind::Scaled { base, .. } | OperatorKind::Translated { base, .. } => {
                    kind = base.kind();
                }
                _ => {
                    return Err(Error::Unsupported(
                        "projection scheme requires a normal-cone operator".into(),
                    ))
                }
            }
        }
    }
    Ok(())
}
