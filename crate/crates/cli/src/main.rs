//! Batch front-end: parse an experiment configuration, dispatch to the
//! engine, persist artifacts, append a manifest line.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, unreadable or
//! invalid config), 2 runtime abort (simulation blow-up, I/O while writing).

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation: {m}"),
            CliError::Runtime(m) => write!(f, "runtime: {m}"),
        }
    }
}

impl From<mvlab::Error> for CliError {
    fn from(e: mvlab::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mvlab",
    version,
    about = "Numerical laboratory for constrained mean-field SDEs"
)]
struct Cli {
    /// Experiment configuration file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, dotted path (repeatable): --set scheme.dt=0.01
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides config and MVLAB_OUT)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for --set rng.seed=<u64>
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker pool size; affects speed only, never results
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the interacting-particle simulation and export the ensemble
    Simulate,
    /// Solve the deterministic limit / controlled / fluctuation skeletons
    Skeleton,
    /// Minimize the control energy needed to reach a target
    Rate,
    /// Estimate -eps log p over a shrinking noise grid
    LdpSweep,
    /// Sample the rescaled fluctuation across a noise grid
    MdpSweep,
    /// Rescale long-horizon paths and measure distance to the energy ball
    Lil,
    /// Coefficient hypothesis checks and reaction-term monotonicity audit
    Diag,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Skeleton => "skeleton",
            Command::Rate => "rate",
            Command::LdpSweep => "ldp-sweep",
            Command::MdpSweep => "mdp-sweep",
            Command::Lil => "lil",
            Command::Diag => "diag",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        // --help / --version
        Err(e) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Validation(_) => ExitCode::from(1),
                CliError::Runtime(_) => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli
        .config
        .ok_or_else(|| CliError::Validation("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(&config_path).map_err(|e| {
        CliError::Validation(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("rng.seed={s}"));
    }
    let tree = config::parse_with_overrides(&text, &overrides)?;
    let cfg = config::ExperimentConfig::from_value(tree)?;

    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    }

    let out_dir = cli
        .out
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .or_else(|| std::env::var_os("MVLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mvlab-out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("output dir {}: {e}", out_dir.display())))?;

    let name = cli.command.name();
    let hash = cfg.semantic_hash(name)?;
    let started = Instant::now();
    let artifacts = commands::dispatch(cli.command.name(), &cfg, &out_dir, hash)?;
    let duration_ms = started.elapsed().as_millis() as u64;

    output::append_manifest(
        &out_dir,
        &output::ManifestLine {
            unix_time: output::unix_now(),
            command: name.to_string(),
            config_hash: format!("{hash:016x}"),
            seed: cfg.rng.seed,
            duration_ms,
            artifacts: artifacts
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        },
    )?;
    for a in &artifacts {
        println!("wrote {}", a.display());
    }
    Ok(())
}
