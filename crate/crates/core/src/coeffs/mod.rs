//! Mean-field drift and diffusion coefficient families.
//!
//! Coefficients map (state, empirical law) to a drift vector or a d x d
//! diffusion matrix. The affine catalogue covers everything the experiment
//! configs need and keeps per-step evaluation allocation-free; bounded smooth
//! callbacks are accepted for library use. Hypothesis checks are sampled
//! diagnostics: the underlying conditions quantify over all of R^d and the
//! space of measures, so they can only ever be refuted, not verified.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::{wasserstein2, EmpiricalMeasure};
use crate::vecops;

/// Concave modulus of continuity with a linear continuation above the
/// cutoff, keeping the derivative finite while preserving concavity.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Modulus {
    /// u -> slope * u.
    Linear { slope: f64 },
    /// u -> u ln(1/u) below eta, linear with the left derivative above.
    Log { eta: f64 },
    /// u -> u ln(1/u) ln(ln(1/u)) below eta, linear above.
    LogLog { eta: f64 },
}

impl Modulus {
    pub fn linear(slope: f64) -> Result<Self> {
        let m = Modulus::Linear { slope };
        m.validate()?;
        Ok(m)
    }

    pub fn log(eta: f64) -> Result<Self> {
        let m = Modulus::Log { eta };
        m.validate()?;
        Ok(m)
    }

    pub fn log_log(eta: f64) -> Result<Self> {
        let m = Modulus::LogLog { eta };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Modulus::Linear { slope } => {
                if !(slope.is_finite() && slope > 0.0) {
                    return Err(Error::InvalidParameter {
                        name: "slope",
                        reason: "must be positive and finite".into(),
                    });
                }
            }
            Modulus::Log { eta } => {
                // nondecreasing on (0, eta] needs ln(1/u) >= 1 there
                if !(eta.is_finite() && eta > 0.0 && eta < (-1.0_f64).exp()) {
                    return Err(Error::InvalidParameter {
                        name: "eta",
                        reason: "cutoff must lie in (0, 1/e)".into(),
                    });
                }
            }
            Modulus::LogLog { eta } => {
                if !(eta.is_finite() && eta > 0.0 && eta < (-1.0_f64).exp()) {
                    return Err(Error::InvalidParameter {
                        name: "eta",
                        reason: "cutoff must lie in (0, 1/e)".into(),
                    });
                }
                let l = (1.0 / eta).ln();
                if (l - 1.0) * l.ln() <= 1.0 {
                    return Err(Error::InvalidParameter {
                        name: "eta",
                        reason: "cutoff too large: continuation slope not positive".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Evaluates the modulus at u >= 0.
    pub fn eval(&self, u: f64) -> f64 {
        debug_assert!(u >= 0.0 && !u.is_nan());
        let u = u.max(0.0);
        if u == 0.0 {
            return 0.0;
        }
        match *self {
            Modulus::Linear { slope } => slope * u,
            Modulus::Log { eta } => {
                if u <= eta {
                    u * (1.0 / u).ln()
                } else {
                    let slope = (1.0 / eta).ln() - 1.0;
                    eta * (1.0 / eta).ln() + slope * (u - eta)
                }
            }
            Modulus::LogLog { eta } => {
                let f = |v: f64| {
                    let l = (1.0 / v).ln();
                    v * l * l.ln()
                };
                if u <= eta {
                    f(u)
                } else {
                    let l = (1.0 / eta).ln();
                    let slope = (l - 1.0) * l.ln() - 1.0;
                    f(eta) + slope * (u - eta)
                }
            }
        }
    }
}

pub type DriftFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum DriftSpec {
    /// b(x, mu) = b0 + Bx x + Bm mean(mu); matrices row-major d x d.
    Affine {
        b0: Vec<f64>,
        bx: Vec<f64>,
        bmean: Vec<f64>,
    },
    Callback(DriftFn),
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftSpec::Affine { b0, bx, bmean } => f
                .debug_struct("Affine")
                .field("b0", b0)
                .field("bx", bx)
                .field("bmean", bmean)
                .finish(),
            DriftSpec::Callback(_) => f.write_str("Callback(..)"),
        }
    }
}

#[derive(Clone)]
pub enum DiffusionSpec {
    /// sigma(x, mu) = s0 I + s1 diag(x) + s2 diag(mean(mu)).
    DiagAffine { s0: f64, s1: f64, s2: f64 },
    /// Full d x d row-major matrix callback.
    Callback(MatrixFn),
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffusionSpec::DiagAffine { s0, s1, s2 } => f
                .debug_struct("DiagAffine")
                .field("s0", s0)
                .field("s1", s1)
                .field("s2", s2)
                .finish(),
            DiffusionSpec::Callback(_) => f.write_str("Callback(..)"),
        }
    }
}

/// Drift/diffusion pair with an optional state gradient of the drift and a
/// declared linear-growth constant.
#[derive(Clone)]
pub struct MeanFieldCoefficients {
    dim: usize,
    pub(crate) drift: DriftSpec,
    pub(crate) diffusion: DiffusionSpec,
    grad_drift: Option<MatrixFn>,
    growth_l: f64,
}

impl fmt::Debug for MeanFieldCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeanFieldCoefficients")
            .field("dim", &self.dim)
            .field("drift", &self.drift)
            .field("diffusion", &self.diffusion)
            .field("grad_drift", &self.grad_drift.as_ref().map(|_| ".."))
            .field("growth_l", &self.growth_l)
            .finish()
    }
}

impl MeanFieldCoefficients {
    /// Affine catalogue entry. A valid growth constant is derived from the
    /// parameters, so the growth bound holds by construction.
    pub fn affine(
        dim: usize,
        b0: Vec<f64>,
        bx: Vec<f64>,
        bmean: Vec<f64>,
        s0: f64,
        s1: f64,
        s2: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "dimension must be positive".into(),
            });
        }
        if b0.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: b0.len(),
            });
        }
        if bx.len() != dim * dim || bmean.len() != dim * dim {
            return Err(Error::Dimension {
                expected: dim * dim,
                got: bx.len().min(bmean.len()),
            });
        }
        let all = b0
            .iter()
            .chain(&bx)
            .chain(&bmean)
            .chain([&s0, &s1, &s2]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "coefficients",
                    reason: "all parameters must be finite".into(),
                });
            }
        }
        // |b| <= |b0| + ||Bx|| |x| + ||Bm|| ||mu||_2 and
        // ||sigma||_F^2 <= 3 d max(s)^2 (1 + |x|^2 + ||mu||_2^2)
        let drift_l = vecops::norm(&b0)
            .max(vecops::frobenius(&bx))
            .max(vecops::frobenius(&bmean));
        let smax = s0.abs().max(s1.abs()).max(s2.abs());
        let growth_l = drift_l.max(3.0 * dim as f64 * smax * smax).max(1e-12);
        Ok(MeanFieldCoefficients {
            dim,
            drift: DriftSpec::Affine { b0, bx, bmean },
            diffusion: DiffusionSpec::DiagAffine { s0, s1, s2 },
            grad_drift: None,
            growth_l,
        })
    }

    /// Library-user entry point for bounded smooth callbacks. The growth
    /// constant is declared, not derived.
    pub fn from_callbacks(
        dim: usize,
        drift: DriftFn,
        diffusion: MatrixFn,
        grad_drift: Option<MatrixFn>,
        growth_l: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter {
                name: "dim",
                reason: "dimension must be positive".into(),
            });
        }
        if !(growth_l.is_finite() && growth_l > 0.0) {
            return Err(Error::InvalidParameter {
                name: "growth_l",
                reason: "declared growth constant must be positive".into(),
            });
        }
        Ok(MeanFieldCoefficients {
            dim,
            drift: DriftSpec::Callback(drift),
            diffusion: DiffusionSpec::Callback(diffusion),
            grad_drift,
            growth_l,
        })
    }

    /// Replaces the diffusion part, keeping drift and growth constant.
    pub fn with_diag_diffusion(mut self, s0: f64, s1: f64, s2: f64) -> Result<Self> {
        if ![s0, s1, s2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "diffusion",
                reason: "parameters must be finite".into(),
            });
        }
        self.diffusion = DiffusionSpec::DiagAffine { s0, s1, s2 };
        Ok(self)
    }

    /// Attaches an explicit drift gradient callback (d x d row-major).
    pub fn with_grad_drift(mut self, grad: MatrixFn) -> Self {
        self.grad_drift = Some(grad);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn growth_constant(&self) -> f64 {
        self.growth_l
    }

    /// True when a per-step empirical measure must be materialized.
    pub(crate) fn needs_measure(&self) -> bool {
        matches!(self.drift, DriftSpec::Callback(_))
            || matches!(self.diffusion, DiffusionSpec::Callback(_))
    }

    /// Allocation-free drift evaluation; `mean` is the precomputed cloud
    /// mean, `mu` is only required for callback coefficients.
    pub(crate) fn drift_to(
        &self,
        x: &[f64],
        mean: &[f64],
        mu: Option<&EmpiricalMeasure>,
        out: &mut [f64],
    ) {
        match &self.drift {
            DriftSpec::Affine { b0, bx, bmean } => {
                vecops::mat_vec(bx, x, out);
                let d = self.dim;
                for c in 0..d {
                    let mut acc = out[c] + b0[c];
                    for j in 0..d {
                        acc += bmean[c * d + j] * mean[j];
                    }
                    out[c] = acc;
                }
            }
            DriftSpec::Callback(f) => {
                let mu = mu.expect("callback drift requires a measure");
                out.copy_from_slice(&f(x, mu));
            }
        }
    }

    /// Applies sigma(x, mu) to the vector v (noise increment or control).
    pub(crate) fn diffusion_apply_to(
        &self,
        x: &[f64],
        mean: &[f64],
        mu: Option<&EmpiricalMeasure>,
        v: &[f64],
        out: &mut [f64],
    ) {
        match &self.diffusion {
            DiffusionSpec::DiagAffine { s0, s1, s2 } => {
                for c in 0..self.dim {
                    out[c] = (s0 + s1 * x[c] + s2 * mean[c]) * v[c];
                }
            }
            DiffusionSpec::Callback(f) => {
                let mu = mu.expect("callback diffusion requires a measure");
                let m = f(x, mu);
                vecops::mat_vec(&m, v, out);
            }
        }
    }

    /// Drift at (x, mu). Public single-point route.
    pub fn drift(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        self.check_inputs(x, mu)?;
        let mean = mu.mean();
        let mut out = vec![0.0; self.dim];
        self.drift_to(x, &mean, Some(mu), &mut out);
        Ok(out)
    }

    /// Full diffusion matrix at (x, mu), row-major d x d.
    pub fn diffusion_matrix(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        self.check_inputs(x, mu)?;
        match &self.diffusion {
            DiffusionSpec::DiagAffine { s0, s1, s2 } => {
                let mean = mu.mean();
                let d = self.dim;
                let mut m = vec![0.0; d * d];
                for c in 0..d {
                    m[c * d + c] = s0 + s1 * x[c] + s2 * mean[c];
                }
                Ok(m)
            }
            DiffusionSpec::Callback(f) => {
                let m = f(x, mu);
                if m.len() != self.dim * self.dim {
                    return Err(Error::Dimension {
                        expected: self.dim * self.dim,
                        got: m.len(),
                    });
                }
                Ok(m)
            }
        }
    }

    /// State gradient of the drift, row-major d x d with entry (i, j) equal
    /// to the derivative of component i in direction j. Affine entries are
    /// exact; callbacks use their attached gradient or central differences
    /// with step 1e-5 (1 + |x|).
    pub fn grad_drift(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        self.check_inputs(x, mu)?;
        if let DriftSpec::Affine { bx, .. } = &self.drift {
            return Ok(bx.clone());
        }
        if let Some(g) = &self.grad_drift {
            let m = g(x, mu);
            if m.len() != self.dim * self.dim {
                return Err(Error::Dimension {
                    expected: self.dim * self.dim,
                    got: m.len(),
                });
            }
            return Ok(m);
        }
        let d = self.dim;
        let step = 1e-5 * (1.0 + vecops::norm(x));
        let mut m = vec![0.0; d * d];
        let mut xp = x.to_vec();
        for j in 0..d {
            xp[j] = x[j] + step;
            let fp = self.drift(&xp, mu)?;
            xp[j] = x[j] - step;
            let fm = self.drift(&xp, mu)?;
            xp[j] = x[j];
            for i in 0..d {
                m[i * d + j] = (fp[i] - fm[i]) / (2.0 * step);
            }
        }
        Ok(m)
    }

    fn check_inputs(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if mu.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: mu.dim(),
            });
        }
        Ok(())
    }
}

pub type RhoFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type FamilyFn = Arc<dyn Fn(f64) -> Result<MeanFieldCoefficients> + Send + Sync>;

/// Family of perturbed coefficients indexed by the noise scale, with
/// declared sup-deviation bounds used by decay diagnostics.
#[derive(Clone)]
pub struct PerturbationFamily {
    base: MeanFieldCoefficients,
    make: FamilyFn,
    rho_b: RhoFn,
    rho_sigma: RhoFn,
}

impl fmt::Debug for PerturbationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbationFamily")
            .field("base", &self.base)
            .finish_non_exhaustive()
    }
}

impl PerturbationFamily {
    pub fn new(
        base: MeanFieldCoefficients,
        make: FamilyFn,
        rho_b: RhoFn,
        rho_sigma: RhoFn,
    ) -> Self {
        PerturbationFamily {
            base,
            make,
            rho_b,
            rho_sigma,
        }
    }

    /// The unperturbed family: identical coefficients at every scale.
    pub fn identity(base: MeanFieldCoefficients) -> Self {
        let b = base.clone();
        PerturbationFamily {
            base,
            make: Arc::new(move |_| Ok(b.clone())),
            rho_b: Arc::new(|_| 0.0),
            rho_sigma: Arc::new(|_| 0.0),
        }
    }

    /// Drift shifted by eps * v; deviation bounds eps |v| and 0.
    pub fn drift_shift(base: MeanFieldCoefficients, v: Vec<f64>) -> Result<Self> {
        if v.len() != base.dim() {
            return Err(Error::Dimension {
                expected: base.dim(),
                got: v.len(),
            });
        }
        let norm_v = vecops::norm(&v);
        let b = base.clone();
        let make: FamilyFn = Arc::new(move |eps: f64| {
            let mut out = b.clone();
            match &mut out.drift {
                DriftSpec::Affine { b0, .. } => {
                    for (c, vc) in b0.iter_mut().zip(&v) {
                        *c += eps * vc;
                    }
                    Ok(out)
                }
                DriftSpec::Callback(_) => Err(Error::Unsupported(
                    "drift shift applies to affine coefficients".into(),
                )),
            }
        });
        Ok(PerturbationFamily {
            base,
            make,
            rho_b: Arc::new(move |eps| eps.abs() * norm_v),
            rho_sigma: Arc::new(|_| 0.0),
        })
    }

    pub fn base(&self) -> &MeanFieldCoefficients {
        &self.base
    }

    pub fn at(&self, eps: f64) -> Result<MeanFieldCoefficients> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "eps",
                reason: "scale must be nonnegative and finite".into(),
            });
        }
        (self.make)(eps)
    }

    pub fn rho_b(&self, eps: f64) -> f64 {
        (self.rho_b)(eps)
    }

    pub fn rho_sigma(&self, eps: f64) -> f64 {
        (self.rho_sigma)(eps)
    }

    /// Measured sup-deviations (drift, diffusion Frobenius) over samples.
    pub fn measured_deviation(
        &self,
        eps: f64,
        samples: &[HypothesisSample],
    ) -> Result<(f64, f64)> {
        let pert = self.at(eps)?;
        let mut db = 0.0_f64;
        let mut ds = 0.0_f64;
        for s in samples {
            let b0 = self.base.drift(&s.x, &s.mu)?;
            let b1 = pert.drift(&s.x, &s.mu)?;
            db = db.max(vecops::dist(&b0, &b1));
            let m0 = self.base.diffusion_matrix(&s.x, &s.mu)?;
            let m1 = pert.diffusion_matrix(&s.x, &s.mu)?;
            ds = ds.max(vecops::dist(&m0, &m1));
        }
        Ok((db, ds))
    }
}

/// Sampled hypothesis identifiers for the coefficient diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Hypothesis {
    /// One-sided drift dissipativity against the modulus.
    H1,
    /// Squared diffusion difference against the modulus.
    H2,
    /// Lipschitz-in-measure plus one-sided linear drift bounds.
    B0,
    /// Joint Lipschitz bounds for drift and diffusion.
    B3,
}

/// One test tuple: two states and two laws.
#[derive(Debug, Clone)]
pub struct HypothesisSample {
    pub x: Vec<f64>,
    pub x2: Vec<f64>,
    pub mu: EmpiricalMeasure,
    pub nu: EmpiricalMeasure,
}

impl HypothesisSample {
    /// Uniform sampling helper for diagnostics and tests.
    pub fn random<R: rand::Rng>(
        rng: &mut R,
        count: usize,
        dim: usize,
        cloud: usize,
        radius: f64,
    ) -> Result<Vec<HypothesisSample>> {
        if count == 0 || cloud == 0 || !(radius > 0.0) {
            return Err(Error::InvalidParameter {
                name: "samples",
                reason: "need positive count, cloud size, and radius".into(),
            });
        }
        let point = |rng: &mut R| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-radius..radius)).collect()
        };
        (0..count)
            .map(|_| {
                let x = point(rng);
                let x2 = point(rng);
                let mu_pts: Vec<f64> = (0..cloud * dim)
                    .map(|_| rng.random_range(-radius..radius))
                    .collect();
                let nu_pts: Vec<f64> = (0..cloud * dim)
                    .map(|_| rng.random_range(-radius..radius))
                    .collect();
                Ok(HypothesisSample {
                    x,
                    x2,
                    mu: EmpiricalMeasure::new(dim, mu_pts)?,
                    nu: EmpiricalMeasure::new(dim, nu_pts)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Violation {
    pub hypothesis: Hypothesis,
    pub sample_index: usize,
    /// Scale of the family member that violated; absent for single coefficients.
    pub eps: Option<f64>,
    /// Positive amount by which the inequality failed.
    pub margin: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct HypothesisReport {
    pub checked: usize,
    pub violations: Vec<Violation>,
    /// Largest lhs - rhs seen across all checks; negative means all held.
    pub worst_margin: f64,
}

impl HypothesisReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Coefficients under test: a single set or a family along a scale grid.
pub enum CoefficientSource<'a> {
    Single(&'a MeanFieldCoefficients),
    Family {
        family: &'a PerturbationFamily,
        eps_grid: &'a [f64],
    },
}

/// Evaluates the selected inequalities on every sample and reports the worst
/// margins. Purely diagnostic: violations are collected, never fatal.
pub fn check_hypotheses(
    source: CoefficientSource<'_>,
    modulus: &Modulus,
    l: f64,
    samples: &[HypothesisSample],
    which: &[Hypothesis],
) -> Result<HypothesisReport> {
    if samples.is_empty() || which.is_empty() {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: "need at least one sample and one hypothesis".into(),
        });
    }
    if !(l.is_finite() && l > 0.0) {
        return Err(Error::InvalidParameter {
            name: "l",
            reason: "hypothesis constant must be positive".into(),
        });
    }
    modulus.validate()?;
    let mut report = HypothesisReport {
        checked: 0,
        violations: Vec::new(),
        worst_margin: f64::NEG_INFINITY,
    };
    match source {
        CoefficientSource::Single(c) => {
            check_one(c, None, modulus, l, samples, which, &mut report)?;
        }
        CoefficientSource::Family { family, eps_grid } => {
            if eps_grid.is_empty() {
                return Err(Error::InvalidParameter {
                    name: "eps_grid",
                    reason: "family checks need a nonempty grid".into(),
                });
            }
            for &eps in eps_grid {
                let c = family.at(eps)?;
                check_one(&c, Some(eps), modulus, l, samples, which, &mut report)?;
            }
        }
    }
    Ok(report)
}

fn check_one(
    c: &MeanFieldCoefficients,
    eps: Option<f64>,
    modulus: &Modulus,
    l: f64,
    samples: &[HypothesisSample],
    which: &[Hypothesis],
    report: &mut HypothesisReport,
) -> Result<()> {
    for (idx, s) in samples.iter().enumerate() {
        let dx = vecops::dist(&s.x, &s.x2);
        let w2 = wasserstein2(&s.mu, &s.nu)?;
        let rho_sum = l * (modulus.eval(dx * dx) + modulus.eval(w2 * w2));
        for &h in which {
            let margin = match h {
                Hypothesis::H1 => {
                    let bx = c.drift(&s.x, &s.mu)?;
                    let bx2 = c.drift(&s.x2, &s.nu)?;
                    let inner: f64 = s
                        .x
                        .iter()
                        .zip(&s.x2)
                        .zip(bx.iter().zip(&bx2))
                        .map(|((a, b), (u, v))| (a - b) * (u - v))
                        .sum();
                    inner - rho_sum
                }
                Hypothesis::H2 => {
                    let ma = c.diffusion_matrix(&s.x, &s.mu)?;
                    let mb = c.diffusion_matrix(&s.x2, &s.nu)?;
                    vecops::dist_sq(&ma, &mb) - rho_sum
                }
                Hypothesis::B0 => {
                    // Lipschitz in the measure at fixed state
                    let b_mu = c.drift(&s.x, &s.mu)?;
                    let b_nu = c.drift(&s.x, &s.nu)?;
                    let m1 = vecops::dist(&b_mu, &b_nu) - l * w2;
                    // one-sided linear bound in the state at fixed measure
                    let bx = c.drift(&s.x, &s.mu)?;
                    let bx2 = c.drift(&s.x2, &s.mu)?;
                    let inner: f64 = s
                        .x
                        .iter()
                        .zip(&s.x2)
                        .zip(bx.iter().zip(&bx2))
                        .map(|((a, b), (u, v))| (a - b) * (u - v))
                        .sum();
                    let m2 = inner - l * dx * dx;
                    m1.max(m2)
                }
                Hypothesis::B3 => {
                    let bx = c.drift(&s.x, &s.mu)?;
                    let bx2 = c.drift(&s.x2, &s.nu)?;
                    let m1 = vecops::dist(&bx, &bx2) - l * (dx + w2);
                    let ma = c.diffusion_matrix(&s.x, &s.mu)?;
                    let mb = c.diffusion_matrix(&s.x2, &s.nu)?;
                    let m2 = vecops::dist(&ma, &mb) - l * (dx + w2);
                    m1.max(m2)
                }
            };
            report.checked += 1;
            report.worst_margin = report.worst_margin.max(margin);
            if margin > 0.0 {
                report.violations.push(Violation {
                    hypothesis: h,
                    sample_index: idx,
                    eps,
                    margin,
                });
            }
        }
    }
    Ok(())
}

/// Worst growth-bound margins over samples: positive means the declared
/// constant is too small. First entry covers the drift bound
/// |b| <= L (1 + |x| + ||mu||_2), second the squared diffusion bound.
pub fn growth_margins(
    c: &MeanFieldCoefficients,
    samples: &[HypothesisSample],
) -> Result<(f64, f64)> {
    let l = c.growth_constant();
    let mut worst_b = f64::NEG_INFINITY;
    let mut worst_s = f64::NEG_INFINITY;
    for s in samples {
        let m2 = s.mu.second_moment();
        let b = c.drift(&s.x, &s.mu)?;
        worst_b = worst_b.max(vecops::norm(&b) - l * (1.0 + vecops::norm(&s.x) + m2.sqrt()));
        let m = c.diffusion_matrix(&s.x, &s.mu)?;
        let fro2 = vecops::norm_sq(&m);
        worst_s = worst_s.max(fro2 - l * (1.0 + vecops::norm_sq(&s.x) + m2));
    }
    Ok((worst_b, worst_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modulus_examples() {
        let lin = Modulus::linear(2.0).unwrap();
        assert_eq!(lin.eval(0.0), 0.0);
        assert_eq!(lin.eval(3.0), 6.0);

        let log = Modulus::log(0.01).unwrap();
        assert_eq!(log.eval(0.0), 0.0);
        // above the cutoff: eta ln(1/eta) + (ln(1/eta) - 1)(u - eta)
        let u = (-2.0_f64).exp();
        assert!((log.eval(u) - 0.497906722).abs() < 1e-8, "{}", log.eval(u));
    }

    #[test]
    fn modulus_concavity_and_monotonicity() {
        let moduli = [
            Modulus::linear(1.5).unwrap(),
            Modulus::log(0.01).unwrap(),
            Modulus::log_log(0.01).unwrap(),
        ];
        let grid: Vec<f64> = (0..60).map(|i| i as f64 * 0.01).collect();
        for m in &moduli {
            let mut prev = 0.0;
            for &u in &grid {
                let v = m.eval(u);
                assert!(v >= prev - 1e-14, "nondecreasing failed at {u}");
                assert!(u == 0.0 || v > 0.0);
                prev = v;
            }
            for &u in &grid[..30] {
                let v = u + 0.25;
                for t in [0.25, 0.5, 0.75] {
                    let mid = m.eval(t * u + (1.0 - t) * v);
                    assert!(
                        mid >= t * m.eval(u) + (1.0 - t) * m.eval(v) - 1e-10,
                        "concavity failed at u={u}"
                    );
                }
            }
        }
    }

    #[test]
    fn modulus_rejects_bad_cutoffs() {
        assert!(Modulus::log(0.5).is_err());
        assert!(Modulus::log(0.0).is_err());
        assert!(Modulus::log_log(0.2).is_err());
        assert!(Modulus::linear(0.0).is_err());
    }

    fn contraction_1d() -> MeanFieldCoefficients {
        // b = -x, sigma = I
        MeanFieldCoefficients::affine(1, vec![0.0], vec![-1.0], vec![0.0], 1.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn contraction_drift_has_no_violations() {
        let c = contraction_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = HypothesisSample::random(&mut rng, 25, 1, 6, 3.0).unwrap();
        let rho = Modulus::linear(1.0).unwrap();
        let rep = check_hypotheses(
            CoefficientSource::Single(&c),
            &rho,
            1.0,
            &samples,
            &[Hypothesis::H1, Hypothesis::H2],
        )
        .unwrap();
        assert!(rep.ok(), "violations: {:?}", rep.violations);
        assert!(rep.worst_margin <= 0.0);
    }

    #[test]
    fn superlinear_drift_is_reported() {
        let drift: DriftFn = Arc::new(|x: &[f64], _mu: &EmpiricalMeasure| vec![x[0] * x[0]]);
        let diffusion: MatrixFn = Arc::new(|_x: &[f64], _mu: &EmpiricalMeasure| vec![0.0]);
        let c =
            MeanFieldCoefficients::from_callbacks(1, drift, diffusion, None, 100.0).unwrap();
        let delta = EmpiricalMeasure::new(1, vec![0.0]).unwrap();
        let samples = vec![HypothesisSample {
            x: vec![2.0],
            x2: vec![0.0],
            mu: delta.clone(),
            nu: delta,
        }];
        let rho = Modulus::linear(1.0).unwrap();
        let rep = check_hypotheses(
            CoefficientSource::Single(&c),
            &rho,
            1.0,
            &samples,
            &[Hypothesis::H1],
        )
        .unwrap();
        // <2 - 0, 4 - 0> = 8 against 1 * rho(4) = 4
        assert_eq!(rep.violations.len(), 1);
        assert!((rep.worst_margin - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mean_coupled_diffusion_respects_h2() {
        // sigma = diag(mean), 1-D: |sigma(mu) - sigma(nu)|^2 <= W2^2
        let c =
            MeanFieldCoefficients::affine(1, vec![0.0], vec![0.0], vec![0.0], 0.0, 0.0, 1.0)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = HypothesisSample::random(&mut rng, 30, 1, 5, 2.0).unwrap();
        let rho = Modulus::linear(1.0).unwrap();
        let rep = check_hypotheses(
            CoefficientSource::Single(&c),
            &rho,
            1.0,
            &samples,
            &[Hypothesis::H2],
        )
        .unwrap();
        assert!(rep.ok(), "violations: {:?}", rep.violations);
    }

    #[test]
    fn growth_bound_holds_for_affine_catalogue() {
        let c = MeanFieldCoefficients::affine(
            2,
            vec![0.5, -1.0],
            vec![0.0, 1.0, -1.0, 0.0],
            vec![0.3, 0.0, 0.0, 0.3],
            0.7,
            0.2,
            0.1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let samples = HypothesisSample::random(&mut rng, 40, 2, 6, 5.0).unwrap();
        let (mb, ms) = growth_margins(&c, &samples).unwrap();
        assert!(mb <= 0.0, "drift margin {mb}");
        assert!(ms <= 0.0, "diffusion margin {ms}");
    }

    #[test]
    fn grad_drift_affine_exact_and_fd_close() {
        let c = MeanFieldCoefficients::affine(
            2,
            vec![0.0, 0.0],
            vec![0.0, 1.0, -2.0, 0.5],
            vec![0.0; 4],
            1.0,
            0.0,
            0.0,
        )
        .unwrap();
        let mu = EmpiricalMeasure::new(2, vec![0.0, 0.0]).unwrap();
        assert_eq!(c.grad_drift(&[0.3, -0.7], &mu).unwrap(), vec![0.0, 1.0, -2.0, 0.5]);

        // smooth callback without gradient: finite differences
        let drift: DriftFn =
            Arc::new(|x: &[f64], _mu: &EmpiricalMeasure| vec![x[0].sin(), x[0] * x[1]]);
        let diffusion: MatrixFn =
            Arc::new(|_x: &[f64], _mu: &EmpiricalMeasure| vec![1.0, 0.0, 0.0, 1.0]);
        let cb = MeanFieldCoefficients::from_callbacks(2, drift, diffusion, None, 10.0).unwrap();
        let x = [0.4, -1.2];
        let g = cb.grad_drift(&x, &mu).unwrap();
        let exact = [x[0].cos(), 0.0, x[1], x[0]];
        for (a, b) in g.iter().zip(exact) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn drift_shift_family_deviation_matches_declared() {
        let fam = PerturbationFamily::drift_shift(contraction_1d(), vec![2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples = HypothesisSample::random(&mut rng, 10, 1, 4, 2.0).unwrap();
        for eps in [0.5, 0.1, 0.01] {
            let (db, ds) = fam.measured_deviation(eps, &samples).unwrap();
            assert!(db <= fam.rho_b(eps) * (1.0 + 1e-6), "{db} vs {}", fam.rho_b(eps));
            assert!((db - 2.0 * eps).abs() < 1e-12);
            assert_eq!(ds, 0.0);
        }
    }

    #[test]
    fn identity_family_has_zero_deviation() {
        let fam = PerturbationFamily::identity(contraction_1d());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = HypothesisSample::random(&mut rng, 5, 1, 3, 1.0).unwrap();
        let (db, ds) = fam.measured_deviation(0.1, &samples).unwrap();
        assert_eq!((db, ds), (0.0, 0.0));
    }
}
