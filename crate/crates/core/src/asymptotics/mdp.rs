//! Moderate-deviation sweeps: statistics of the rescaled fluctuation
//! process against its linearized Gaussian limit.
//!
//! All statistics are computed on the normalized fluctuation
//! (lambda/sqrt(eps)) M, whose limit law is scale-free: its covariance
//! solves V' = G V + V G' + sigma sigma' with G the drift Jacobian along
//! the limit path. Raw M carries the vanishing factor eps/lambda^2 and
//! would make every oracle trivially zero.

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::monotone::{ConvexSet, OperatorKind};
use crate::sde::{simulate_mdp, RngSpec, SchemeSpec, SdeProblem};
use crate::variational::solve_limit_ode;
use crate::vecops;

/// Fluctuation-scale rule lambda(eps).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LambdaRule {
    /// lambda(eps) = eps^exponent; the default exponent 1/4 sits strictly
    /// between the central-limit and large-deviation scales.
    PowerLaw { exponent: f64 },
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::PowerLaw { exponent: 0.25 }
    }
}

impl LambdaRule {
    pub fn eval(&self, eps: f64) -> f64 {
        match self {
            LambdaRule::PowerLaw { exponent } => eps.powf(*exponent),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LambdaRule::PowerLaw { exponent } => {
                if !(exponent.is_finite() && *exponent > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "lambda_rule",
                        reason: "power-law exponent must be positive".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// The scale separation requires lambda -> 0 and eps/lambda^2 -> 0 along
    /// the grid; checked as strict monotone decrease of both sequences.
    fn scale_separation_ok(&self, eps_grid: &[f64]) -> bool {
        let lam: Vec<f64> = eps_grid.iter().map(|&e| self.eval(e)).collect();
        let speed: Vec<f64> = eps_grid
            .iter()
            .zip(&lam)
            .map(|(&e, &l)| e / (l * l))
            .collect();
        lam.windows(2).all(|w| w[1] < w[0]) && speed.windows(2).all(|w| w[1] < w[0])
    }
}

/// Scalar statistic of the normalized terminal fluctuation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MdpStatistic {
    /// Trace of the sample covariance of the normalized terminal state.
    TerminalVariance,
    /// Mean of the normalized terminal state (signed in dimension one,
    /// Euclidean norm of the mean vector otherwise).
    TerminalMean,
    /// Empirical q-quantile of sup_t |normalized fluctuation|.
    SupNormQuantile { q: f64 },
}

impl MdpStatistic {
    fn validate(&self) -> Result<()> {
        if let MdpStatistic::SupNormQuantile { q } = self {
            if !(q.is_finite() && *q > 0.0 && *q < 1.0) {
                return Err(Error::InvalidParameter {
                    name: "statistic",
                    reason: "quantile level must lie in (0, 1)".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MdpRow {
    pub eps: f64,
    pub lambda: f64,
    /// eps / lambda^2, the deviation speed; must vanish along the grid.
    pub speed: f64,
    pub n: usize,
    pub value: f64,
    /// Linearized-limit prediction, when one is mechanically derivable.
    pub oracle: Option<f64>,
    pub abs_err: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MdpTable {
    pub statistic: MdpStatistic,
    pub rows: Vec<MdpRow>,
    /// False when the lambda rule violates the scale separation on this
    /// grid; the sweep still runs, the flag is the warning.
    pub scale_separation_ok: bool,
    /// Whether the oracle gap at the smallest eps is no worse than at the
    /// largest; absent without an oracle.
    pub improving: Option<bool>,
}

/// True when A is the normal cone of [0, inf) in dimension one, the case
/// with closed-form folded-Gaussian moments.
fn is_half_line_cone_at_zero(problem: &SdeProblem) -> bool {
    if problem.dim() != 1 {
        return false;
    }
    match problem.operator.kind() {
        OperatorKind::NormalCone => match problem.operator.domain() {
            ConvexSet::Box { lower, upper } => {
                lower.len() == 1 && lower[0] == 0.0 && upper[0] == f64::INFINITY
            }
            _ => false,
        },
        _ => false,
    }
}

/// Integrates V' = G V + V G' + sigma sigma' along the limit path on the
/// solver grid and returns trace V(T).
fn linearized_variance(problem: &SdeProblem, scheme: &SchemeSpec) -> Result<f64> {
    let d = problem.dim();
    let x0 = solve_limit_ode(problem, scheme)?;
    let steps = x0.steps();
    let dt = scheme.dt;
    let mut v = vec![0.0; d * d];
    let mut gv = vec![0.0; d * d];
    let mut sig_cols = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    let mut col = vec![0.0; d];
    for k in 0..steps {
        let xk = x0.state(k);
        let dirac = EmpiricalMeasure::new(d, xk.to_vec())?;
        let g = problem.coeffs.grad_drift(xk, &dirac)?;
        // sigma as a matrix, one basis vector at a time
        for j in 0..d {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            problem
                .coeffs
                .diffusion_apply_to(xk, xk, Some(&dirac), &e, &mut col);
            for i in 0..d {
                sig_cols[i * d + j] = col[i];
            }
        }
        // gv = G V
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += g[i * d + l] * v[l * d + j];
                }
                gv[i * d + j] = acc;
            }
        }
        for i in 0..d {
            for j in 0..d {
                let mut ss = 0.0;
                for l in 0..d {
                    ss += sig_cols[i * d + l] * sig_cols[j * d + l];
                }
                v[i * d + j] += (gv[i * d + j] + gv[j * d + i] + ss) * dt;
            }
        }
    }
    Ok((0..d).map(|i| v[i * d + i]).sum())
}

fn oracle_for(
    problem: &SdeProblem,
    statistic: &MdpStatistic,
    scheme: &SchemeSpec,
) -> Result<Option<f64>> {
    let folded = is_half_line_cone_at_zero(problem);
    let free = matches!(problem.operator.kind(), OperatorKind::Zero);
    if !free && !folded {
        return Ok(None);
    }
    let var = linearized_variance(problem, scheme)?;
    Ok(match statistic {
        MdpStatistic::TerminalVariance => {
            if free {
                Some(var)
            } else {
                // |N(0, V)| has variance V (1 - 2/pi)
                Some(var * (1.0 - 2.0 / std::f64::consts::PI))
            }
        }
        MdpStatistic::TerminalMean => {
            if free {
                Some(0.0)
            } else {
                Some((2.0 * var / std::f64::consts::PI).sqrt())
            }
        }
        MdpStatistic::SupNormQuantile { .. } => None,
    })
}

fn statistic_value(
    statistic: &MdpStatistic,
    terminals: &[f64],
    sups: Option<&[f64]>,
    n: usize,
    d: usize,
) -> f64 {
    match statistic {
        MdpStatistic::TerminalVariance => {
            let mut trace = 0.0;
            for c in 0..d {
                let mean = vecops::pairwise_sum_by(0, n, &|i| terminals[i * d + c]) / n as f64;
                let ss = vecops::pairwise_sum_by(0, n, &|i| {
                    let dv = terminals[i * d + c] - mean;
                    dv * dv
                });
                trace += ss / (n as f64 - 1.0);
            }
            trace
        }
        MdpStatistic::TerminalMean => {
            let mut mean = vec![0.0; d];
            for (c, m) in mean.iter_mut().enumerate() {
                *m = vecops::pairwise_sum_by(0, n, &|i| terminals[i * d + c]) / n as f64;
            }
            if d == 1 {
                mean[0]
            } else {
                vecops::norm(&mean)
            }
        }
        MdpStatistic::SupNormQuantile { q } => {
            let mut s = sups.expect("sup statistic tracks sups").to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).expect("sups are finite"));
            let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
            s[idx]
        }
    }
}

/// Simulates the fluctuation process along a decreasing eps grid and
/// compares the chosen statistic with the linearized-limit oracle.
#[allow(clippy::too_many_arguments)]
pub fn mdp_sweep(
    problem: &SdeProblem,
    lambda_rule: &LambdaRule,
    eps_grid: &[f64],
    statistic: &MdpStatistic,
    n_per_eps: usize,
    scheme: &SchemeSpec,
    rng: &RngSpec,
) -> Result<MdpTable> {
    lambda_rule.validate()?;
    statistic.validate()?;
    if eps_grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "eps_grid",
            reason: "need at least one noise level".into(),
        });
    }
    for w in eps_grid.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::InvalidParameter {
                name: "eps_grid",
                reason: "noise grid must be strictly decreasing".into(),
            });
        }
    }
    if eps_grid.iter().any(|e| !(e.is_finite() && *e > 0.0 && *e <= 1.0)) {
        return Err(Error::InvalidParameter {
            name: "eps_grid",
            reason: "noise levels must lie in (0, 1]".into(),
        });
    }
    if n_per_eps < 2 {
        return Err(Error::InvalidParameter {
            name: "n_per_eps",
            reason: "need at least two paths per level".into(),
        });
    }

    let d = problem.dim();
    let x0 = solve_limit_ode(problem, scheme)?;
    let oracle = oracle_for(problem, statistic, scheme)?;
    let needs_sup = matches!(statistic, MdpStatistic::SupNormQuantile { .. });
    let scale_separation_ok = lambda_rule.scale_separation_ok(eps_grid);

    let mut rows = Vec::with_capacity(eps_grid.len());
    for (idx, &eps) in eps_grid.iter().enumerate() {
        let lambda = lambda_rule.eval(eps);
        let mut p = problem.clone();
        p.eps = eps;
        let ens = simulate_mdp(
            &p,
            &problem.coeffs,
            lambda,
            x0.path_flat(),
            None,
            scheme,
            n_per_eps,
            &rng.block(idx as u64)?,
        )?;
        let norm_factor = lambda / eps.sqrt();
        let mut terminals = vec![0.0; n_per_eps * d];
        for i in 0..n_per_eps {
            for (c, v) in ens.terminal(i).iter().enumerate() {
                terminals[i * d + c] = v * norm_factor;
            }
        }
        let sups: Option<Vec<f64>> = needs_sup.then(|| {
            (0..n_per_eps)
                .map(|i| {
                    (0..ens.recorded())
                        .map(|r| vecops::norm(ens.state(i, r)) * norm_factor)
                        .fold(0.0_f64, f64::max)
                })
                .collect()
        });
        let value = statistic_value(statistic, &terminals, sups.as_deref(), n_per_eps, d);
        rows.push(MdpRow {
            eps,
            lambda,
            speed: eps / (lambda * lambda),
            n: n_per_eps,
            value,
            oracle,
            abs_err: oracle.map(|o| (value - o).abs()),
        });
    }
    let improving = match (rows.first(), rows.last()) {
        (Some(a), Some(b)) if rows.len() >= 2 => match (a.abs_err, b.abs_err) {
            (Some(ea), Some(eb)) => Some(eb <= ea + 1e-12),
            _ => None,
        },
        _ => None,
    };
    Ok(MdpTable {
        statistic: *statistic,
        rows,
        scale_separation_ok,
        improving,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::MeanFieldCoefficients;
    use crate::monotone::MonotoneOperator;

    fn problem(bx: f64, constrained: bool) -> SdeProblem {
        let op = if constrained {
            MonotoneOperator::normal_cone(ConvexSet::interval(0.0, f64::INFINITY).unwrap())
                .unwrap()
        } else {
            MonotoneOperator::zero(1).unwrap()
        };
        let c =
            MeanFieldCoefficients::affine(1, vec![0.0], vec![bx], vec![0.0], 1.0, 0.0, 0.0)
                .unwrap();
        SdeProblem::new(op, c, vec![0.0], 1.0, 1.0).unwrap()
    }

    #[test]
    fn quarter_power_rule_separates_scales() {
        let rule = LambdaRule::default();
        assert!(rule.scale_separation_ok(&[1e-2, 1e-3, 1e-4]));
        // at the CLT boundary the speed eps/lambda^2 freezes at 1
        let clt = LambdaRule::PowerLaw { exponent: 0.5 };
        assert!(!clt.scale_separation_ok(&[1e-2, 1e-3, 1e-4]));
        // beyond it the speed grows as eps shrinks
        let heavy = LambdaRule::PowerLaw { exponent: 0.6 };
        assert!(!heavy.scale_separation_ok(&[1e-2, 1e-3, 1e-4]));
    }

    #[test]
    fn linear_drift_variance_approaches_ou_limit() {
        let p = problem(-1.0, false);
        let scheme = SchemeSpec::penalized(0.01).unwrap();
        let table = mdp_sweep(
            &p,
            &LambdaRule::default(),
            &[1e-2, 1e-3],
            &MdpStatistic::TerminalVariance,
            4000,
            &scheme,
            &RngSpec::new(41),
        )
        .unwrap();
        assert!(table.scale_separation_ok);
        let oracle = table.rows[0].oracle.unwrap();
        let exact = (1.0 - (-2.0_f64).exp()) / 2.0;
        // the grid oracle integrates the same Euler grid, so it sits within
        // O(dt) of the continuum value
        assert!((oracle - exact).abs() < 0.01, "oracle {oracle}");
        for row in &table.rows {
            let se = oracle * (2.0 / (row.n as f64 - 1.0)).sqrt();
            assert!(
                row.abs_err.unwrap() < 4.0 * se + 0.01,
                "eps {}: value {} vs {oracle}",
                row.eps,
                row.value
            );
        }
    }

    #[test]
    fn driftless_normalized_variance_is_unit_for_every_eps() {
        let p = problem(0.0, false);
        let scheme = SchemeSpec::penalized(0.01).unwrap();
        let table = mdp_sweep(
            &p,
            &LambdaRule::default(),
            &[1e-1, 1e-3],
            &MdpStatistic::TerminalVariance,
            4000,
            &scheme,
            &RngSpec::new(43),
        )
        .unwrap();
        for row in &table.rows {
            let se = (2.0 / (row.n as f64 - 1.0)).sqrt();
            assert!((row.value - 1.0).abs() < 4.0 * se, "value {}", row.value);
            // grid integral of V' = 1 accumulates one ulp-scale error per step
            assert!((row.oracle.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflected_fluctuation_has_folded_mean() {
        let p = problem(0.0, true);
        let scheme = SchemeSpec::projection(0.005).unwrap();
        let table = mdp_sweep(
            &p,
            &LambdaRule::default(),
            &[1e-3],
            &MdpStatistic::TerminalMean,
            4000,
            &scheme,
            &RngSpec::new(47),
        )
        .unwrap();
        let row = &table.rows[0];
        let oracle = row.oracle.unwrap();
        assert!((oracle - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        // folded normal sd ~ 0.6; reflection at the grid scale biases by
        // O(sqrt(dt)), so allow CI plus a discretization term
        let se = 0.6 / (row.n as f64).sqrt();
        assert!(
            row.abs_err.unwrap() < 4.0 * se + 2.0 * scheme.dt.sqrt(),
            "value {} vs {oracle}",
            row.value
        );
    }

    #[test]
    fn sup_quantile_is_monotone_in_level() {
        let p = problem(0.0, false);
        let scheme = SchemeSpec::penalized(0.02).unwrap();
        let q50 = mdp_sweep(
            &p,
            &LambdaRule::default(),
            &[1e-2],
            &MdpStatistic::SupNormQuantile { q: 0.5 },
            500,
            &scheme,
            &RngSpec::new(5),
        )
        .unwrap();
        let q90 = mdp_sweep(
            &p,
            &LambdaRule::default(),
            &[1e-2],
            &MdpStatistic::SupNormQuantile { q: 0.9 },
            500,
            &scheme,
            &RngSpec::new(5),
        )
        .unwrap();
        assert!(q90.rows[0].value > q50.rows[0].value);
        assert!(q50.rows[0].oracle.is_none());
    }

    #[test]
    fn bad_quantile_rejected() {
        let p = problem(0.0, false);
        let scheme = SchemeSpec::penalized(0.1).unwrap();
        assert!(mdp_sweep(
            &p,
            &LambdaRule::default(),
            &[1e-2],
            &MdpStatistic::SupNormQuantile { q: 1.5 },
            10,
            &scheme,
            &RngSpec::new(5),
        )
        .is_err());
    }
}
