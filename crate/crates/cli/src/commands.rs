//! One function per subcommand: lower the config, run the engine, write
//! artifacts, return their paths for the manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mvlab::asymptotics::{
    fit_rate, ldp_sweep, lil_harness, mdp_sweep, ContractionFamily, LambdaRule,
    LilHarnessOptions, LilRegime, LilSpec, LimitSetOptions, MdpStatistic, RareEvent,
};
use mvlab::coeffs::{check_hypotheses, CoefficientSource, Hypothesis, HypothesisSample};
use mvlab::sde::{
    k_monotonicity_diag, simulate_with, write_binary, write_csv, SimOptions,
};
use mvlab::variational::{minimize_rate, solve_limit_ode, solve_mdp_skeleton, solve_skeleton, RateProblem};

use crate::config::{
    DiagParams, EventSpec, ExperimentConfig, HypoName, RegimeSpec, StatSpec,
};
use crate::output::{
    artifact, control_csv, opt_cell, skeleton_csv, table_csv, write_report, RunReport,
};
use crate::CliError;

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn flush(w: &mut BufWriter<File>, path: &Path) -> Result<(), CliError> {
    use std::io::Write;
    w.flush()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn dispatch(
    command: &str,
    cfg: &ExperimentConfig,
    out: &Path,
    hash: u64,
) -> Result<Vec<PathBuf>, CliError> {
    match command {
        "simulate" => run_simulate(cfg, out, hash),
        "skeleton" => run_skeleton(cfg, out, hash),
        "rate" => run_rate(cfg, out, hash),
        "ldp-sweep" => run_ldp(cfg, out, hash),
        "mdp-sweep" => run_mdp(cfg, out, hash),
        "lil" => run_lil(cfg, out, hash),
        "diag" => run_diag(cfg, out, hash),
        other => Err(bad(format!("unknown command {other}"))),
    }
}

fn run_simulate(cfg: &ExperimentConfig, out: &Path, hash: u64) -> Result<Vec<PathBuf>, CliError> {
    let p = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| bad("config has no [simulate] block"))?;
    let problem = cfg.build_problem()?;
    let scheme = cfg.scheme.lower()?;
    let rng = cfg.rng.lower()?;
    let opts = SimOptions {
        stride: p.stride,
        sup_dev_reference: None,
    };
    let ens = simulate_with(&problem, &scheme, p.n, &rng, &opts)?;

    let mut artifacts = Vec::new();
    let csv_path = artifact(out, "simulate", hash, "csv");
    let file = File::create(&csv_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    let mut w = BufWriter::new(file);
    write_csv(&ens, &mut w)?;
    flush(&mut w, &csv_path)?;
    artifacts.push(csv_path);
    if p.binary {
        let bin_path = artifact(out, "simulate", hash, "bin");
        let file = File::create(&bin_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", bin_path.display())))?;
        let mut w = BufWriter::new(file);
        write_binary(&ens, &mut w)?;
        flush(&mut w, &bin_path)?;
        artifacts.push(bin_path);
    }
    println!(
        "simulated {} particles, {} recorded times, K total variation bound {:.6e}",
        ens.particles(),
        ens.recorded(),
        ens.domain_gap_bound
    );
    Ok(artifacts)
}

fn run_skeleton(cfg: &ExperimentConfig, out: &Path, hash: u64) -> Result<Vec<PathBuf>, CliError> {
    let params = cfg.skeleton.clone().unwrap_or_default();
    let problem = cfg.build_problem()?;
    let scheme = cfg.scheme.lower()?;
    let steps = scheme.steps_for(problem.t_horizon)?;
    let d = problem.dim();

    let x0 = solve_limit_ode(&problem, &scheme)?;
    let mut artifacts = Vec::new();
    let x0_path = artifact(out, "skeleton-x0", hash, "csv");
    skeleton_csv(&x0_path, &x0)?;
    artifacts.push(x0_path);

    if let Some(spec) = &params.control {
        let h = spec.lower(d, scheme.dt, steps)?;
        let y = solve_skeleton(&problem, &h, &x0.dirac_law()?, &scheme)?;
        let y_path = artifact(out, "skeleton-yh", hash, "csv");
        skeleton_csv(&y_path, &y)?;
        artifacts.push(y_path);
        let h_path = artifact(out, "skeleton-control", hash, "csv");
        control_csv(&h_path, &h)?;
        artifacts.push(h_path);
        println!("controlled skeleton: energy {:.6}, K tv {:.6}", h.energy(), y.k_tv());
    }
    if let Some(spec) = &params.psi {
        let psi = spec.lower(d, scheme.dt, steps)?;
        let nu = solve_mdp_skeleton(&problem, &psi, &x0, &scheme)?;
        let nu_path = artifact(out, "skeleton-nu", hash, "csv");
        skeleton_csv(&nu_path, &nu)?;
        artifacts.push(nu_path);
        println!("fluctuation skeleton: forcing energy {:.6}", psi.energy());
    }
    Ok(artifacts)
}

fn run_rate(cfg: &ExperimentConfig, out: &Path, hash: u64) -> Result<Vec<PathBuf>, CliError> {
    let p = cfg
        .rate
        .as_ref()
        .ok_or_else(|| bad("config has no [rate] block"))?;
    let problem = cfg.build_problem()?;
    let scheme = cfg.scheme.lower()?;
    let opts = p.options.clone().unwrap_or_default().lower();
    let rp = RateProblem::new(problem, p.target.lower(), scheme)?.with_options(opts);
    let report = minimize_rate(&rp)?;

    let payload = json!({
        "i_star": if report.i_star.is_finite() { Some(report.i_star) } else { None },
        "feasible": report.feasible,
        "violation": report.violation,
        "terminal": report.y_star.terminal(),
        "k_tv": report.y_star.k_tv(),
        "energy": report.h_star.energy(),
        "diagnostics": report.diagnostics,
    });
    let json_path = artifact(out, "rate", hash, "json");
    write_report(
        &json_path,
        &RunReport::new("rate", hash, cfg.rng.seed, payload),
    )?;

    let d = report.y_star.dim();
    let path_csv = artifact(out, "rate-path", hash, "csv");
    let mut columns = vec!["time".to_string()];
    columns.extend((0..d).map(|c| format!("x0_{c}")));
    columns.extend((0..d).map(|c| format!("y{c}")));
    let col_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let times = report.x0.times();
    table_csv(
        &path_csv,
        &col_refs,
        (0..=report.x0.steps()).map(|k| {
            let mut row = vec![format!("{}", times[k])];
            row.extend(report.x0.state(k).iter().map(|v| format!("{v}")));
            row.extend(report.y_star.state(k).iter().map(|v| format!("{v}")));
            row
        }),
    )?;
    let control_path = artifact(out, "rate-control", hash, "csv");
    control_csv(&control_path, &report.h_star)?;

    if report.feasible {
        println!("rate minimum {:.6} (violation {:.3e})", report.i_star, report.violation);
    } else {
        println!(
            "target unreachable within slack: best violation {:.3e}",
            report.violation
        );
    }
    Ok(vec![json_path, path_csv, control_path])
}

fn run_ldp(cfg: &ExperimentConfig, out: &Path, hash: u64) -> Result<Vec<PathBuf>, CliError> {
    let p = cfg
        .ldp_sweep
        .as_ref()
        .ok_or_else(|| bad("config has no [ldp_sweep] block"))?;
    let problem = cfg.build_problem()?;
    let scheme = cfg.scheme.lower()?;
    let rng = cfg.rng.lower()?;
    let event = match &p.event {
        EventSpec::TerminalHalfSpace { normal, offset } => RareEvent::TerminalHalfSpace {
            normal: normal.clone(),
            offset: *offset,
        },
        EventSpec::SupTube { delta } => RareEvent::SupTube { delta: *delta },
    };
    let table = ldp_sweep(&problem, &event, &p.eps_grid, p.n, &scheme, &rng)?;
    let fit = p.i_star.map(|i| fit_rate(&table, i)).transpose()?;

    let payload = json!({ "rows": table.rows, "fit": fit });
    let json_path = artifact(out, "ldp-sweep", hash, "json");
    write_report(
        &json_path,
        &RunReport::new("ldp-sweep", hash, cfg.rng.seed, payload),
    )?;

    let csv_path = artifact(out, "ldp-sweep", hash, "csv");
    table_csv(
        &csv_path,
        &[
            "eps", "n", "hits", "p_hat", "ci_lo", "ci_hi", "rate", "rate_lo", "rate_hi",
            "low_hits",
        ],
        table.rows.iter().map(|r| {
            vec![
                format!("{}", r.eps),
                format!("{}", r.n),
                format!("{}", r.hits),
                format!("{}", r.p_hat),
                format!("{}", r.ci_lo),
                format!("{}", r.ci_hi),
                opt_cell(&r.rate),
                opt_cell(&r.rate_lo),
                opt_cell(&r.rate_hi),
                format!("{}", r.low_hits),
            ]
        }),
    )?;

    for r in &table.rows {
        println!(
            "eps {:.4}: {} / {} hits, rate {}",
            r.eps,
            r.hits,
            r.n,
            r.rate.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    if let Some(f) = &fit {
        println!("fit verdict: {:?}", f.verdict);
    }
    Ok(vec![json_path, csv_path])
}

fn run_mdp(cfg: &ExperimentConfig, out: &Path, hash: u64) -> Result<Vec<PathBuf>, CliError> {
    let p = cfg
        .mdp_sweep
        .as_ref()
        .ok_or_else(|| bad("config has no [mdp_sweep] block"))?;
    let problem = cfg.build_problem()?;
    let scheme = cfg.scheme.lower()?;
    let rng = cfg.rng.lower()?;
    let statistic = match &p.statistic {
        StatSpec::TerminalVariance => MdpStatistic::TerminalVariance,
        StatSpec::TerminalMean => MdpStatistic::TerminalMean,
        StatSpec::SupNormQuantile { q } => MdpStatistic::SupNormQuantile { q: *q },
    };
    let rule = LambdaRule::PowerLaw {
        exponent: p.lambda_exponent,
    };
    let table = mdp_sweep(&problem, &rule, &p.eps_grid, &statistic, p.n, &scheme, &rng)?;

    let payload = serde_json::to_value(&table)
        .map_err(|e| CliError::Runtime(format!("mdp payload: {e}")))?;
    let json_path = artifact(out, "mdp-sweep", hash, "json");
    write_report(
        &json_path,
        &RunReport::new("mdp-sweep", hash, cfg.rng.seed, payload),
    )?;

    let csv_path = artifact(out, "mdp-sweep", hash, "csv");
    table_csv(
        &csv_path,
        &["eps", "lambda", "speed", "n", "value", "oracle", "abs_err"],
        table.rows.iter().map(|r| {
            vec![
                format!("{}", r.eps),
                format!("{}", r.lambda),
                format!("{}", r.speed),
                format!("{}", r.n),
                format!("{}", r.value),
                opt_cell(&r.oracle),
                opt_cell(&r.abs_err),
            ]
        }),
    )?;

    for r in &table.rows {
        println!(
            "eps {:.2e}: lambda {:.4}, value {:.6}{}",
            r.eps,
            r.lambda,
            r.value,
            r.oracle
                .map_or(String::new(), |o| format!(", oracle {o:.6}"))
        );
    }
    println!(
        "scale separation {}",
        if table.scale_separation_ok { "ok" } else { "VIOLATED" }
    );
    Ok(vec![json_path, csv_path])
}

fn run_lil(cfg: &ExperimentConfig, out: &Path, hash: u64) -> Result<Vec<PathBuf>, CliError> {
    let p = cfg
        .lil
        .as_ref()
        .ok_or_else(|| bad("config has no [lil] block"))?;
    let problem = cfg.build_problem()?;
    let scheme = cfg.scheme.lower()?;
    let rng = cfg.rng.lower()?;
    let center = p.center.clone().unwrap_or_else(|| cfg.problem.x0.clone());
    let family = ContractionFamily::radial(center)?;
    let regime = match p.regime {
        RegimeSpec::LargeTime => LilRegime::LargeTime,
        RegimeSpec::SmallTime => LilRegime::SmallTime,
    };
    let spec = LilSpec::new(regime, p.c, p.j_lo, p.j_hi)?;
    let opts = LilHarnessOptions {
        dist_paths: p.dist_paths,
        limit_set: LimitSetOptions {
            budget: p.budget,
            max_iter: p.max_iter,
            ..LimitSetOptions::default()
        },
    };
    let report = lil_harness(&problem, &spec, &family, p.n_paths, &scheme, &rng, &opts)?;

    let payload = serde_json::to_value(&report)
        .map_err(|e| CliError::Runtime(format!("lil payload: {e}")))?;
    let json_path = artifact(out, "lil", hash, "json");
    write_report(
        &json_path,
        &RunReport::new("lil", hash, cfg.rng.seed, payload),
    )?;

    let csv_path = artifact(out, "lil", hash, "csv");
    table_csv(
        &csv_path,
        &[
            "j",
            "u",
            "scale",
            "var_q1",
            "brownian_var_oracle",
            "var_se",
            "max_abs_q1",
            "soft_bound_exceeded",
            "median_distance",
        ],
        report.rows.iter().map(|r| {
            vec![
                format!("{}", r.j),
                format!("{}", r.u),
                format!("{}", r.scale),
                format!("{}", r.var_q1),
                format!("{}", r.brownian_var_oracle),
                format!("{}", r.var_se),
                format!("{}", r.max_abs_q1),
                format!("{}", r.soft_bound_exceeded),
                opt_cell(&r.median_distance),
            ]
        }),
    )?;

    for r in &report.rows {
        println!(
            "j {}: u {:.3e}, var {:.4} (oracle {:.4}){}",
            r.j,
            r.u,
            r.var_q1,
            r.brownian_var_oracle,
            r.median_distance
                .map_or(String::new(), |m| format!(", median distance {m:.4}"))
        );
    }
    Ok(vec![json_path, csv_path])
}

fn run_diag(cfg: &ExperimentConfig, out: &Path, hash: u64) -> Result<Vec<PathBuf>, CliError> {
    let p: &DiagParams = cfg
        .diag
        .as_ref()
        .ok_or_else(|| bad("config has no [diag] block"))?;
    if p.hypotheses.is_none() && p.monotonicity.is_none() {
        return Err(bad(
            "[diag] needs a hypotheses block, a monotonicity block, or both",
        ));
    }
    let problem = cfg.build_problem()?;
    let mut payload = serde_json::Map::new();

    if let Some(h) = &p.hypotheses {
        let coeffs = cfg.coeffs.lower()?;
        let modulus = h.modulus.lower()?;
        let which: Vec<Hypothesis> = h
            .which
            .iter()
            .map(|n| match n {
                HypoName::H1 => Hypothesis::H1,
                HypoName::H2 => Hypothesis::H2,
                HypoName::B0 => Hypothesis::B0,
                HypoName::B3 => Hypothesis::B3,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(h.sample_seed);
        let samples = HypothesisSample::random(
            &mut rng,
            h.samples,
            problem.dim(),
            h.cloud,
            h.radius,
        )?;
        let report = check_hypotheses(
            CoefficientSource::Single(&coeffs),
            &modulus,
            h.l,
            &samples,
            &which,
        )?;
        println!(
            "hypotheses: {} checks, {} violations, worst margin {:.3e}",
            report.checked,
            report.violations.len(),
            report.worst_margin
        );
        payload.insert(
            "hypotheses".into(),
            serde_json::to_value(&report)
                .map_err(|e| CliError::Runtime(format!("diag payload: {e}")))?,
        );
    }

    if let Some(m) = &p.monotonicity {
        let scheme = cfg.scheme.lower()?;
        let rng = cfg.rng.lower()?;
        // full-resolution recording is what the pairing check needs
        let ens = simulate_with(&problem, &scheme, m.n, &rng, &SimOptions::default())?;
        let points: Vec<Vec<f64>> = if m.points.is_empty() {
            vec![problem.operator.interior_witness().to_vec()]
        } else {
            m.points.clone()
        };
        let samples: Vec<(Vec<f64>, Vec<f64>)> = points
            .into_iter()
            .map(|x| {
                let y = problem.operator.minimal_section(&x)?;
                Ok((x, y))
            })
            .collect::<Result<_, mvlab::Error>>()?;
        let report = k_monotonicity_diag(&ens, &samples)?;
        println!(
            "monotonicity: {} particles x {} samples, {} violations, worst margin {:.3e}",
            report.particles,
            report.samples,
            report.violations.len(),
            report.worst_margin
        );
        payload.insert(
            "monotonicity".into(),
            serde_json::to_value(&report)
                .map_err(|e| CliError::Runtime(format!("diag payload: {e}")))?,
        );
    }

    let json_path = artifact(out, "diag", hash, "json");
    write_report(
        &json_path,
        &RunReport::new(
            "diag",
            hash,
            cfg.rng.seed,
            serde_json::Value::Object(payload),
        ),
    )?;
    Ok(vec![json_path])
}

