//! Experiment configuration: a strict TOML schema lowered into engine types,
//! plus the canonical 64-bit hash stamped into every artifact.
//!
//! The schema is deliberately a closed catalogue: everything nameable in a
//! config file lowers to engine constructors with closed-form oracles.
//! Callback coefficients exist only at the library level. Unknown keys are
//! hard errors at every nesting depth.
//!
//! The hash covers what determines the numbers: the command name, the shared
//! problem blocks, the rng block, and the active command's parameter block.
//! Output locations, thread counts, and inactive command blocks do not hash.
//! Two artifacts carry the same hash exactly when they came from runs that
//! compute the same thing.

use serde::{Deserialize, Serialize};

use mvlab::coeffs::{MeanFieldCoefficients, Modulus};
use mvlab::monotone::{ConvexFn, ConvexSet, MonotoneGraph, MonotoneOperator};
use mvlab::sde::{RngSpec, SchemeSpec, SdeProblem};
use mvlab::variational::{ControlGrid, MinimizeOptions, RateTarget};

use crate::CliError;

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SetSpec {
    HalfSpace { normal: Vec<f64>, offset: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Intersection {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
        witness: Vec<f64>,
    },
    All { dim: usize },
}

impl SetSpec {
    pub fn lower(&self) -> Result<ConvexSet, CliError> {
        let set = match self {
            SetSpec::HalfSpace { normal, offset } => {
                ConvexSet::half_space(normal.clone(), *offset)?
            }
            SetSpec::Box { lower, upper } => ConvexSet::boxed(lower.clone(), upper.clone())?,
            SetSpec::Ball { center, radius } => ConvexSet::ball(center.clone(), *radius)?,
            SetSpec::Intersection {
                normals,
                offsets,
                witness,
            } => {
                if normals.len() != offsets.len() {
                    return Err(bad(format!(
                        "intersection has {} normals but {} offsets",
                        normals.len(),
                        offsets.len()
                    )));
                }
                let hs = normals
                    .iter()
                    .cloned()
                    .zip(offsets.iter().copied())
                    .collect();
                ConvexSet::intersection(hs, witness.clone())?
            }
            SetSpec::All { dim } => ConvexSet::all(*dim),
        };
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    Zero { dim: usize },
    NormalCone { set: SetSpec },
    AbsSubdiff { dim: usize, weight: f64 },
    QuadraticSubdiff { dim: usize, q: Vec<f64> },
    IndicatorSubdiff { set: SetSpec },
    SignGraph,
    LowerBarrierGraph { lo: f64 },
    Graph {
        xs: Vec<f64>,
        y_lo: Vec<f64>,
        y_hi: Vec<f64>,
        left_slope: f64,
        right_slope: f64,
    },
    Scaled { factor: f64, base: Box<OperatorSpec> },
    Translated { shift: Vec<f64>, base: Box<OperatorSpec> },
}

impl OperatorSpec {
    pub fn lower(&self) -> Result<MonotoneOperator, CliError> {
        let op = match self {
            OperatorSpec::Zero { dim } => MonotoneOperator::zero(*dim)?,
            OperatorSpec::NormalCone { set } => MonotoneOperator::normal_cone(set.lower()?)?,
            OperatorSpec::AbsSubdiff { dim, weight } => {
                MonotoneOperator::subdiff(ConvexFn::abs_norm(*weight, *dim)?)?
            }
            OperatorSpec::QuadraticSubdiff { dim, q } => {
                MonotoneOperator::subdiff(ConvexFn::quadratic(q.clone(), *dim)?)?
            }
            OperatorSpec::IndicatorSubdiff { set } => {
                MonotoneOperator::subdiff(ConvexFn::indicator(set.lower()?))?
            }
            OperatorSpec::SignGraph => MonotoneOperator::graph1d(MonotoneGraph::sign())?,
            OperatorSpec::LowerBarrierGraph { lo } => {
                MonotoneOperator::graph1d(MonotoneGraph::lower_barrier(*lo)?)?
            }
            OperatorSpec::Graph {
                xs,
                y_lo,
                y_hi,
                left_slope,
                right_slope,
            } => MonotoneOperator::graph1d(MonotoneGraph::new(
                xs.clone(),
                y_lo.clone(),
                y_hi.clone(),
                *left_slope,
                *right_slope,
            )?)?,
            OperatorSpec::Scaled { factor, base } => {
                MonotoneOperator::scaled(base.lower()?, *factor)?
            }
            OperatorSpec::Translated { shift, base } => {
                MonotoneOperator::translated(base.lower()?, shift.clone())?
            }
        };
        Ok(op)
    }
}

/// Affine drift b(x, mu) = b0 + Bx x + Bm mean(mu) with diagonal diffusion
/// sigma = (s0 + s1 |x| + s2 ||mu||_2) I. Omitted blocks default to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffSpec {
    pub dim: usize,
    #[serde(default)]
    pub b0: Option<Vec<f64>>,
    #[serde(default)]
    pub bx: Option<Vec<f64>>,
    #[serde(default)]
    pub bmean: Option<Vec<f64>>,
    #[serde(default)]
    pub s0: f64,
    #[serde(default)]
    pub s1: f64,
    #[serde(default)]
    pub s2: f64,
}

impl CoeffSpec {
    pub fn lower(&self) -> Result<MeanFieldCoefficients, CliError> {
        let d = self.dim;
        let b0 = self.b0.clone().unwrap_or_else(|| vec![0.0; d]);
        let bx = self.bx.clone().unwrap_or_else(|| vec![0.0; d * d]);
        let bmean = self.bmean.clone().unwrap_or_else(|| vec![0.0; d * d]);
        Ok(MeanFieldCoefficients::affine(
            d, b0, bx, bmean, self.s0, self.s1, self.s2,
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub x0: Vec<f64>,
    pub t_horizon: f64,
    pub eps: f64,
    /// Optional per-particle starting points (rows); replaces x0 copies.
    #[serde(default)]
    pub cloud: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodSpec {
    Penalized,
    Projection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub method: MethodSpec,
    pub dt: f64,
    #[serde(default)]
    pub alpha_factor: Option<f64>,
}

impl SchemeConfig {
    pub fn lower(&self) -> Result<SchemeSpec, CliError> {
        let base = match self.method {
            MethodSpec::Penalized => SchemeSpec::penalized(self.dt)?,
            MethodSpec::Projection => {
                if self.alpha_factor.is_some() {
                    return Err(bad(
                        "alpha_factor only applies to the penalized scheme".to_string(),
                    ));
                }
                SchemeSpec::projection(self.dt)?
            }
        };
        match self.alpha_factor {
            Some(f) => Ok(base.with_alpha_factor(f)?),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngConfig {
    pub seed: u64,
    #[serde(default)]
    pub stream_block: u64,
}

impl RngConfig {
    pub fn lower(&self) -> Result<RngSpec, CliError> {
        Ok(RngSpec::new(self.seed).block(self.stream_block)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    pub n: usize,
    #[serde(default)]
    pub stride: usize,
    /// Also write the binary ensemble dump next to the CSV.
    #[serde(default)]
    pub binary: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlSpec {
    /// One value per coordinate, held on every step.
    Constant { values: Vec<f64> },
    /// Full steps x dim grid, row-major.
    Grid { values: Vec<f64> },
}

impl ControlSpec {
    pub fn lower(&self, dim: usize, dt: f64, steps: usize) -> Result<ControlGrid, CliError> {
        let grid = match self {
            ControlSpec::Constant { values } => ControlGrid::constant(dim, dt, steps, values)?,
            ControlSpec::Grid { values } => {
                let g = ControlGrid::new(dim, dt, values.clone())?;
                if g.steps() != steps {
                    return Err(bad(format!(
                        "control grid has {} steps, scheme grid has {steps}",
                        g.steps()
                    )));
                }
                g
            }
        };
        Ok(grid)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonParams {
    /// Control h feeding the first-order skeleton Y.
    #[serde(default)]
    pub control: Option<ControlSpec>,
    /// Forcing psi feeding the fluctuation skeleton nu.
    #[serde(default)]
    pub psi: Option<ControlSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    HalfSpaceAtT { normal: Vec<f64>, offset: f64 },
    PointAtT { point: Vec<f64>, tol: f64 },
    TubeExit { delta: f64 },
    MatchPath { path: Vec<f64>, tol: f64 },
}

impl TargetSpec {
    pub fn lower(&self) -> RateTarget {
        match self {
            TargetSpec::HalfSpaceAtT { normal, offset } => RateTarget::HalfSpaceAtT {
                normal: normal.clone(),
                offset: *offset,
            },
            TargetSpec::PointAtT { point, tol } => RateTarget::PointAtT {
                point: point.clone(),
                tol: *tol,
            },
            TargetSpec::TubeExit { delta } => RateTarget::TubeExit { delta: *delta },
            TargetSpec::MatchPath { path, tol } => RateTarget::MatchPath {
                path: path.clone(),
                tol: *tol,
            },
        }
    }
}

/// Optional optimizer overrides; everything unset keeps the engine default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerParams {
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub max_iter_per_round: Option<usize>,
    #[serde(default)]
    pub random_restarts: Option<usize>,
    #[serde(default)]
    pub restart_scale: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub feasibility_slack: Option<f64>,
}

impl OptimizerParams {
    pub fn lower(&self) -> MinimizeOptions {
        let mut o = MinimizeOptions::default();
        if let Some(v) = self.rounds {
            o.rounds = v;
        }
        if let Some(v) = self.max_iter_per_round {
            o.max_iter_per_round = v;
        }
        if let Some(v) = self.random_restarts {
            o.random_restarts = v;
        }
        if let Some(v) = self.restart_scale {
            o.restart_scale = v;
        }
        if let Some(v) = self.seed {
            o.seed = v;
        }
        if let Some(v) = self.feasibility_slack {
            o.feasibility_slack = v;
        }
        o
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateParams {
    pub target: TargetSpec,
    #[serde(default)]
    pub options: Option<OptimizerParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EventSpec {
    TerminalHalfSpace { normal: Vec<f64>, offset: f64 },
    SupTube { delta: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpParams {
    pub event: EventSpec,
    pub eps_grid: Vec<f64>,
    pub n: usize,
    /// Variational reference rate; present enables the extrapolation fit.
    #[serde(default)]
    pub i_star: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StatSpec {
    TerminalVariance,
    TerminalMean,
    SupNormQuantile { q: f64 },
}

fn default_lambda_exponent() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpParams {
    pub eps_grid: Vec<f64>,
    pub n: usize,
    pub statistic: StatSpec,
    #[serde(default = "default_lambda_exponent")]
    pub lambda_exponent: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeSpec {
    LargeTime,
    SmallTime,
}

fn default_dist_paths() -> usize {
    8
}

fn default_budget() -> f64 {
    1.0
}

fn default_max_iter() -> usize {
    120
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LilParams {
    pub regime: RegimeSpec,
    pub c: f64,
    pub j_lo: u32,
    pub j_hi: u32,
    pub n_paths: usize,
    /// Contraction center; defaults to the problem's starting point.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "default_dist_paths")]
    pub dist_paths: usize,
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypoName {
    H1,
    H2,
    B0,
    B3,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModulusSpec {
    Linear { slope: f64 },
    Log { eta: f64 },
    LogLog { eta: f64 },
}

impl ModulusSpec {
    pub fn lower(&self) -> Result<Modulus, CliError> {
        let m = match self {
            ModulusSpec::Linear { slope } => Modulus::linear(*slope)?,
            ModulusSpec::Log { eta } => Modulus::log(*eta)?,
            ModulusSpec::LogLog { eta } => Modulus::log_log(*eta)?,
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypoParams {
    pub which: Vec<HypoName>,
    pub modulus: ModulusSpec,
    pub l: f64,
    pub samples: usize,
    pub cloud: usize,
    pub radius: f64,
    pub sample_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoParams {
    pub n: usize,
    /// Graph sample points x; each is paired with the minimal section A0(x).
    /// Empty means the operator's interior witness alone.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagParams {
    #[serde(default)]
    pub hypotheses: Option<HypoParams>,
    #[serde(default)]
    pub monotonicity: Option<MonoParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub operator: OperatorSpec,
    pub coeffs: CoeffSpec,
    pub problem: ProblemSpec,
    pub scheme: SchemeConfig,
    pub rng: RngConfig,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub simulate: Option<SimulateParams>,
    #[serde(default)]
    pub skeleton: Option<SkeletonParams>,
    #[serde(default)]
    pub rate: Option<RateParams>,
    #[serde(default)]
    pub ldp_sweep: Option<LdpParams>,
    #[serde(default)]
    pub mdp_sweep: Option<MdpParams>,
    #[serde(default)]
    pub lil: Option<LilParams>,
    #[serde(default)]
    pub diag: Option<DiagParams>,
}

pub const SCHEMA_VERSION: u32 = 1;

impl ExperimentConfig {
    /// Parses a TOML document with overrides already applied to the tree.
    pub fn from_value(value: toml::Value) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| bad(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "schema_version {} unsupported; this build reads {SCHEMA_VERSION}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Builds the continuous-time problem, validating every block.
    pub fn build_problem(&self) -> Result<SdeProblem, CliError> {
        let op = self.operator.lower()?;
        let coeffs = self.coeffs.lower()?;
        let p = SdeProblem::new(
            op,
            coeffs,
            self.problem.x0.clone(),
            self.problem.t_horizon,
            self.problem.eps,
        )?;
        match &self.problem.cloud {
            Some(rows) => {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Ok(p.with_initial_cloud(flat)?)
            }
            None => Ok(p),
        }
    }

    /// The 64-bit FNV-1a hash of the canonical form of everything that
    /// determines this command's numbers.
    pub fn semantic_hash(&self, command: &str) -> Result<u64, CliError> {
        fn enc<T: Serialize>(v: &T) -> Result<toml::Value, CliError> {
            toml::Value::try_from(v)
                .map_err(|e| CliError::Runtime(format!("hash encoding: {e}")))
        }
        let mut root = toml::map::Map::new();
        root.insert("command".into(), toml::Value::String(command.into()));
        root.insert(
            "schema_version".into(),
            toml::Value::Integer(self.schema_version as i64),
        );
        root.insert("operator".into(), enc(&self.operator)?);
        root.insert("coeffs".into(), enc(&self.coeffs)?);
        root.insert("problem".into(), enc(&self.problem)?);
        root.insert("scheme".into(), enc(&self.scheme)?);
        root.insert("rng".into(), enc(&self.rng)?);
        let params: Option<toml::Value> = match command {
            "simulate" => self.simulate.as_ref().map(enc).transpose()?,
            "skeleton" => self.skeleton.as_ref().map(enc).transpose()?,
            "rate" => self.rate.as_ref().map(enc).transpose()?,
            "ldp-sweep" => self.ldp_sweep.as_ref().map(enc).transpose()?,
            "mdp-sweep" => self.mdp_sweep.as_ref().map(enc).transpose()?,
            "lil" => self.lil.as_ref().map(enc).transpose()?,
            "diag" => self.diag.as_ref().map(enc).transpose()?,
            other => return Err(bad(format!("unknown command {other}"))),
        };
        if let Some(p) = params {
            root.insert("params".into(), p);
        }
        let mut canon = String::new();
        canonical(&toml::Value::Table(root), &mut canon);
        Ok(fnv1a64(canon.as_bytes()))
    }
}

/// Canonical textual form: tables with sorted keys, arrays in order, floats
/// in shortest round-trip notation. Whitespace and input key order cannot
/// reach this representation.
fn canonical(v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::String(s) => out.push_str(&format!("{s:?}")),
        toml::Value::Integer(i) => out.push_str(&i.to_string()),
        toml::Value::Float(f) => out.push_str(&format!("{f:?}")),
        toml::Value::Boolean(b) => out.push_str(if *b { "t" } else { "f" }),
        toml::Value::Datetime(d) => out.push_str(&d.to_string()),
        toml::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical(item, out);
            }
            out.push(']');
        }
        toml::Value::Table(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{k:?}"));
                out.push(':');
                canonical(&map[k.as_str()], out);
            }
            out.push('}');
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parses the raw TOML text into a value tree, applies dotted-path
/// overrides, and returns the tree ready for strict deserialization.
pub fn parse_with_overrides(
    text: &str,
    overrides: &[String],
) -> Result<toml::Value, CliError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| bad(format!("config parse: {e}")))?;
    let mut value = toml::Value::Table(table);
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| bad(format!("override '{ov}' is not key=value")))?;
        let parsed = parse_override_value(raw.trim());
        set_path(&mut value, path.trim(), parsed)?;
    }
    Ok(value)
}

/// A bare override value parses as a TOML literal when it can, else as a
/// plain string, so `--set scheme.dt=0.01` and `--set scheme.method=projection`
/// both do the obvious thing.
fn parse_override_value(raw: &str) -> toml::Value {
    raw.parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, new: toml::Value) -> Result<(), CliError> {
    if path.is_empty() {
        return Err(bad("override key is empty".to_string()));
    }
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| bad(format!("override path '{path}' crosses a non-table at '{part}'")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), new);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("loop returns on the last segment");
}
