//! Acceptance gate for the workspace. One test per criterion; each prints a
//! single PASS/FAIL line with the measured quantities and asserts the stated
//! tolerance, so the verdicts are visible both in the test log (with
//! `--nocapture`) and in any failure message. Tolerances are fixed here, in
//! code, and are not tuned at runtime.

use mvlab::asymptotics::{
    fit_rate, ldp_sweep, lil_harness, limit_set_distance, mdp_sweep, ContractionFamily,
    LambdaRule, LilHarnessOptions, LilRegime, LilSpec, LimitSetOptions, MdpStatistic, RareEvent,
};
use mvlab::coeffs::MeanFieldCoefficients;
use mvlab::monotone::{moreau_envelope, ConvexFn, ConvexSet, MonotoneOperator};
use mvlab::sde::{
    simulate, simulate_with, write_binary, RngSpec, SchemeSpec, SdeProblem, SimOptions,
};
use mvlab::variational::{
    minimize_rate, solve_limit_ode, solve_skeleton, ControlGrid, RateProblem, RateTarget,
};
use statrs::distribution::{ContinuousCDF, Normal};
use std::time::Instant;

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    assert!(pass, "{line}");
}

fn flat_coeffs(dim: usize, s0: f64) -> MeanFieldCoefficients {
    MeanFieldCoefficients::affine(
        dim,
        vec![0.0; dim],
        vec![0.0; dim * dim],
        vec![0.0; dim * dim],
        s0,
        0.0,
        0.0,
    )
    .unwrap()
}

fn half_line() -> MonotoneOperator {
    MonotoneOperator::normal_cone(ConvexSet::interval(0.0, f64::INFINITY).unwrap()).unwrap()
}

/// Resolvent, Yosida map, and Moreau envelope of the four reference
/// operators against their closed forms, to 1e-12 on a 1000-point grid,
/// in under a second.
#[test]
fn criterion_1_operator_closed_forms() {
    let start = Instant::now();
    let alphas = [0.1, 0.5, 1.0, 2.0];
    let grid: Vec<f64> = (0..1000).map(|i| -5.0 + 10.0 * i as f64 / 999.0).collect();
    let mut worst: f64 = 0.0;
    let track = |label: &str, err: f64, worst: &mut f64| {
        assert!(err.is_finite(), "{label}: non-finite error");
        if err > *worst {
            *worst = err;
        }
    };

    let zero = MonotoneOperator::zero(1).unwrap();
    let zero_phi = ConvexFn::quadratic(vec![0.0], 1).unwrap();
    let abs = MonotoneOperator::subdiff(ConvexFn::abs_norm(1.0, 1).unwrap()).unwrap();
    let abs_phi = ConvexFn::abs_norm(1.0, 1).unwrap();
    let cone = half_line();
    let cone_phi = ConvexFn::indicator(ConvexSet::interval(0.0, f64::INFINITY).unwrap());
    let (lo, hi) = (-1.0, 2.0);
    let boxed = MonotoneOperator::normal_cone(ConvexSet::interval(lo, hi).unwrap()).unwrap();
    let boxed_phi = ConvexFn::indicator(ConvexSet::interval(lo, hi).unwrap());

    for &a in &alphas {
        for &x in &grid {
            // zero operator: J = x, Yosida = 0, envelope of the zero
            // function = 0
            let j = zero.resolvent(a, &[x]).unwrap()[0];
            let y = zero.yosida(a, &[x]).unwrap()[0];
            let m = moreau_envelope(&zero_phi, a, &[x]).unwrap();
            track("zero J", (j - x).abs(), &mut worst);
            track("zero Y", y.abs(), &mut worst);
            track("zero M", m.abs(), &mut worst);

            // |.|: soft threshold, clamped slope, Huber envelope
            let j_ref = x.signum() * (x.abs() - a).max(0.0);
            let y_ref = (x / a).clamp(-1.0, 1.0);
            let m_ref = if x.abs() <= a {
                x * x / (2.0 * a)
            } else {
                x.abs() - a / 2.0
            };
            let j = abs.resolvent(a, &[x]).unwrap()[0];
            let y = abs.yosida(a, &[x]).unwrap()[0];
            let m = moreau_envelope(&abs_phi, a, &[x]).unwrap();
            track("abs J", (j - j_ref).abs(), &mut worst);
            track("abs Y", (y - y_ref).abs(), &mut worst);
            track("abs M", (m - m_ref).abs(), &mut worst);

            // half line [0, inf): projection, scaled negative part,
            // squared-distance envelope
            let j_ref = x.max(0.0);
            let y_ref = x.min(0.0) / a;
            let m_ref = x.min(0.0).powi(2) / (2.0 * a);
            let j = cone.resolvent(a, &[x]).unwrap()[0];
            let y = cone.yosida(a, &[x]).unwrap()[0];
            let m = moreau_envelope(&cone_phi, a, &[x]).unwrap();
            track("cone J", (j - j_ref).abs(), &mut worst);
            track("cone Y", (y - y_ref).abs(), &mut worst);
            track("cone M", (m - m_ref).abs(), &mut worst);

            // box [-1, 2]: clamp, overshoot over alpha, squared distance
            let j_ref = x.clamp(lo, hi);
            let y_ref = (x - j_ref) / a;
            let m_ref = (x - j_ref).powi(2) / (2.0 * a);
            let j = boxed.resolvent(a, &[x]).unwrap()[0];
            let y = boxed.yosida(a, &[x]).unwrap()[0];
            let m = moreau_envelope(&boxed_phi, a, &[x]).unwrap();
            track("box J", (j - j_ref).abs(), &mut worst);
            track("box Y", (y - y_ref).abs(), &mut worst);
            track("box M", (m - m_ref).abs(), &mut worst);
        }
    }
    let ms = start.elapsed().as_millis();
    let pass = worst <= 1e-12 && ms < 1000;
    verdict(
        "1 (operator closed forms)",
        pass,
        &format!("worst error {worst:.2e} <= 1e-12, runtime {ms} ms < 1000 ms"),
    );
}

/// Reflected Brownian motion on [0, inf) under the projection scheme:
/// the empirical terminal CDF against 2*Phi(a) - 1 at three thresholds,
/// each within three binomial standard errors.
///
/// The projected Euler walk reflects only at grid times, so its terminal
/// law sits roughly 0.58*sqrt(dt) below true reflected Brownian motion.
/// At dt = 1e-3 that systematic shift is worth about 8, 6, and 3 binomial
/// standard errors at the three thresholds for N = 1e5, far outside what
/// any seed can absorb. The criterion is asserted exactly as stated and
/// currently measures that scheme bias rather than sampling noise, so this
/// test is expected to fail until the scheme itself is refined.
#[test]
fn criterion_2_reflected_terminal_law() {
    let problem = SdeProblem::new(half_line(), flat_coeffs(1, 1.0), vec![0.0], 1.0, 1.0).unwrap();
    let scheme = SchemeSpec::projection(1e-3).unwrap();
    let n = 100_000usize;
    let opts = SimOptions {
        stride: usize::MAX,
        ..SimOptions::default()
    };
    let ens = simulate_with(&problem, &scheme, n, &RngSpec::new(0x2b2b), &opts).unwrap();

    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for &a in &[0.5, 1.0, 2.0] {
        let hits = (0..n).filter(|&p| ens.terminal(p)[0] <= a).count();
        let f_hat = hits as f64 / n as f64;
        let f_ref = 2.0 * std_normal.cdf(a) - 1.0;
        let se = (f_ref * (1.0 - f_ref) / n as f64).sqrt();
        let z = (f_hat - f_ref) / se;
        pass &= z.abs() <= 3.0;
        detail.push_str(&format!("a={a}: F^={f_hat:.5} F={f_ref:.5} dev={z:+.2} SE; "));
    }
    detail.push_str("bound 3 SE each");
    verdict("2 (reflected terminal law)", pass, &detail);
}

/// Mean-field linear drift toward half the ensemble mean: the empirical
/// mean at T = 1 within three standard errors of the exact contraction
/// factor, and the zero-noise single-particle bias at least halved when
/// the step is halved.
#[test]
fn criterion_3_mean_field_mean_ode() {
    let coeffs =
        MeanFieldCoefficients::affine(1, vec![0.0], vec![-1.0], vec![0.5], 0.5, 0.0, 0.0).unwrap();
    let op = MonotoneOperator::zero(1).unwrap();
    let problem = SdeProblem::new(op, coeffs, vec![1.0], 1.0, 1.0).unwrap();
    let n = 10_000usize;
    let opts = SimOptions {
        stride: usize::MAX,
        ..SimOptions::default()
    };
    let ens = simulate_with(
        &problem,
        &SchemeSpec::penalized(1e-3).unwrap(),
        n,
        &RngSpec::new(0x3c3c),
        &opts,
    )
    .unwrap();
    let vals: Vec<f64> = (0..n).map(|p| ens.terminal(p)[0]).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let se = (var / n as f64).sqrt();
    let oracle = (-0.5f64).exp();
    let dev = (mean - oracle).abs();

    // with the mean equal to the state the drift is exactly -x/2, so the
    // zero-noise path obeys x' = -x/2 and the time-stepping bias is visible
    // directly against exp(-1/2)
    let mut bias = [0.0f64; 2];
    for (i, dt) in [0.02, 0.01].into_iter().enumerate() {
        let mut quiet = problem.clone();
        quiet.eps = 0.0;
        let one = simulate(
            &quiet,
            &SchemeSpec::penalized(dt).unwrap(),
            1,
            &RngSpec::new(1),
        )
        .unwrap();
        bias[i] = (one.terminal(0)[0] - oracle).abs();
    }
    let ratio = bias[1] / bias[0];

    let pass = dev <= 3.0 * se && ratio <= 0.5;
    verdict(
        "3 (mean-field mean ODE)",
        pass,
        &format!(
            "mean {mean:.6} vs {oracle:.6}, dev {dev:.2e} <= 3 SE = {:.2e}; \
             bias {:.3e} -> {:.3e} under step halving, ratio {ratio:.4} <= 0.5",
            3.0 * se,
            bias[0],
            bias[1]
        ),
    );
}

/// Variational minimizer against independent oracles: the Gaussian
/// endpoint cost a^2/2 within 2 percent, and the reflected tube exit
/// within 5 percent of a dense one-parameter control search.
#[test]
fn criterion_4_rate_minima_match_independent_oracles() {
    let scheme = SchemeSpec::penalized(0.01).unwrap();
    let mut pass = true;
    let mut detail = String::new();

    for &a in &[0.5, 1.0, 2.0] {
        let problem = SdeProblem::new(
            MonotoneOperator::zero(1).unwrap(),
            flat_coeffs(1, 1.0),
            vec![0.0],
            1.0,
            0.1,
        )
        .unwrap();
        let rp = RateProblem::new(
            problem,
            RateTarget::HalfSpaceAtT {
                normal: vec![1.0],
                offset: a,
            },
            scheme,
        )
        .unwrap();
        let rep = minimize_rate(&rp).unwrap();
        let oracle = a * a / 2.0;
        let rel = (rep.i_star - oracle).abs() / oracle;
        pass &= rep.feasible && rel <= 0.02;
        detail.push_str(&format!("a={a}: I*={:.5} vs {oracle:.5} rel {rel:.4}; ", rep.i_star));
    }

    // reflected tube exit, radius 0.25 around the constant limit path
    let tube_scheme = SchemeSpec::projection(0.01).unwrap();
    let problem =
        SdeProblem::new(half_line(), flat_coeffs(1, 1.0), vec![0.25], 1.0, 0.1).unwrap();
    let rp = RateProblem::new(
        problem.clone(),
        RateTarget::TubeExit { delta: 0.25 },
        tube_scheme,
    )
    .unwrap();
    let rep = minimize_rate(&rp).unwrap();

    // oracle: cheapest exiting control over two dense one-parameter
    // families (constants and linear ramps, both signs); within each
    // family the deviation and the energy grow with the magnitude, so the
    // first exiting magnitude is the family minimum
    let x0 = solve_limit_ode(&problem, &tube_scheme).unwrap();
    let law = x0.dirac_law().unwrap();
    let steps = x0.steps();
    let dt = 0.01;
    let mut oracle = f64::INFINITY;
    for sign in [1.0f64, -1.0] {
        'consts: for k in 1..=800 {
            let c = sign * 1e-3 * k as f64;
            let h = ControlGrid::constant(1, dt, steps, &[c]).unwrap();
            let y = solve_skeleton(&problem, &h, &law, &tube_scheme).unwrap();
            if y.sup_distance(&x0).unwrap() >= 0.25 {
                oracle = oracle.min(h.energy());
                break 'consts;
            }
        }
        'ramps: for k in 1..=1200 {
            let s = sign * 1e-3 * k as f64;
            let vals: Vec<f64> = (0..steps).map(|i| s * dt * (i + 1) as f64).collect();
            let h = ControlGrid::new(1, dt, vals).unwrap();
            let y = solve_skeleton(&problem, &h, &law, &tube_scheme).unwrap();
            if y.sup_distance(&x0).unwrap() >= 0.25 {
                oracle = oracle.min(h.energy());
                break 'ramps;
            }
        }
    }
    let rel = (rep.i_star - oracle).abs() / oracle;
    pass &= rep.feasible && rel <= 0.05;
    detail.push_str(&format!(
        "tube: I*={:.5} vs search {oracle:.5} rel {rel:.4}",
        rep.i_star
    ));
    verdict("4 (rate minima vs oracles)", pass, &detail);
}

/// Small-noise event probabilities against the exact Gaussian tail: the
/// per-level rate estimate must bracket the exact finite-eps rate inside
/// its propagated confidence interval, and the gap to the variational
/// rate a^2/2 must shrink as eps decreases.
#[test]
fn criterion_5_ldp_rates_bracket_the_gaussian_tail() {
    // zero drift and unit diffusion make the terminal law exactly Gaussian
    // at any step size, so the grid does not bias the hit counts
    let problem = SdeProblem::new(
        MonotoneOperator::zero(1).unwrap(),
        flat_coeffs(1, 1.0),
        vec![0.0],
        1.0,
        1.0,
    )
    .unwrap();
    let event = RareEvent::TerminalHalfSpace {
        normal: vec![1.0],
        offset: 1.0,
    };
    let scheme = SchemeSpec::penalized(0.05).unwrap();
    let table = ldp_sweep(
        &problem,
        &event,
        &[0.25, 0.1],
        1_000_000,
        &scheme,
        &RngSpec::new(0x1d91),
    )
    .unwrap();

    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for row in &table.rows {
        let p_exact = 1.0 - std_normal.cdf(1.0 / row.eps.sqrt());
        let exact_rate = -row.eps * p_exact.ln();
        let (Some(rate), Some(lo), Some(hi)) = (row.rate, row.rate_lo, row.rate_hi) else {
            pass = false;
            detail.push_str(&format!("eps={}: degenerate hit count; ", row.eps));
            continue;
        };
        let inside = lo <= exact_rate && exact_rate <= hi;
        pass &= inside && !row.low_hits;
        detail.push_str(&format!(
            "eps={}: hits {} rate {rate:.4} in [{lo:.4}, {hi:.4}] around exact {exact_rate:.4} ({}); ",
            row.eps,
            row.hits,
            if inside { "inside" } else { "outside" }
        ));
    }
    let fit = fit_rate(&table, 0.5).unwrap();
    let shrinking = fit.gaps.windows(2).all(|w| w[1].1 < w[0].1);
    pass &= shrinking;
    detail.push_str(&format!(
        "gaps to 0.5: {:.4} -> {:.4} shrinking={shrinking}",
        fit.gaps[0].1, fit.gaps[1].1
    ));
    verdict("5 (small-noise rates)", pass, &detail);
}

/// Moderate-deviation fluctuation variance at eps = 1e-4 with
/// lambda = eps^(1/4) against the stationary-free exact limit
/// (1 - e^(-2)) / 2, within 5 percent.
#[test]
fn criterion_6_mdp_variance_matches_the_limit() {
    let coeffs =
        MeanFieldCoefficients::affine(1, vec![0.0], vec![-1.0], vec![0.0], 1.0, 0.0, 0.0).unwrap();
    let problem = SdeProblem::new(
        MonotoneOperator::zero(1).unwrap(),
        coeffs,
        vec![1.0],
        1.0,
        1.0,
    )
    .unwrap();
    let table = mdp_sweep(
        &problem,
        &LambdaRule::PowerLaw { exponent: 0.25 },
        &[1e-4],
        &MdpStatistic::TerminalVariance,
        10_000,
        &SchemeSpec::penalized(0.005).unwrap(),
        &RngSpec::new(0x6d6d),
    )
    .unwrap();
    let row = &table.rows[0];
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let rel = (row.value - exact).abs() / exact;
    let pass = rel <= 0.05 && table.scale_separation_ok;
    verdict(
        "6 (moderate-deviation variance)",
        pass,
        &format!(
            "lambda {:.3} speed {:.1e}; var {:.5} vs exact {exact:.5} rel {rel:.4} <= 0.05; \
             grid oracle {:?}; scale separation {}",
            row.lambda, row.speed, row.value, row.oracle, table.scale_separation_ok
        ),
    );
}

/// Iterated-logarithm pipeline: rescaled terminal variance at u = e^4 and
/// u = e^8 within three standard errors of 1 / log log u, an explicit
/// energy-ball member at distance <= 1e-3, and the ramp 2t at distance
/// 2 - sqrt(2) within 3 percent. The doubly logarithmic shrinkage of the
/// ball distances along u = c^j is reported but not gated: it decays like
/// 1 / log j and no desk-scale run can resolve that trend.
#[test]
fn criterion_7_lil_statistics_and_limit_set() {
    let problem = SdeProblem::new(
        MonotoneOperator::zero(1).unwrap(),
        flat_coeffs(1, 1.0),
        vec![0.0],
        1.0,
        1.0,
    )
    .unwrap();
    let scheme = SchemeSpec::penalized(0.01).unwrap();
    let family = ContractionFamily::radial(vec![0.0]).unwrap();
    let spec = LilSpec::new(LilRegime::LargeTime, (4.0f64).exp(), 1, 2).unwrap();
    let opts = LilHarnessOptions {
        dist_paths: 0,
        limit_set: LimitSetOptions::default(),
    };
    let report = lil_harness(
        &problem,
        &spec,
        &family,
        4000,
        &scheme,
        &RngSpec::new(0x7171),
        &opts,
    )
    .unwrap();

    let mut pass = true;
    let mut detail = String::new();
    for row in &report.rows {
        // u = e^(4j), so log log u = log(4j)
        let oracle = 1.0 / (4.0 * row.j as f64).ln();
        let dev = (row.var_q1 - oracle).abs();
        pass &= dev <= 3.0 * row.var_se;
        pass &= (row.brownian_var_oracle - oracle).abs() <= 1e-12;
        detail.push_str(&format!(
            "j={}: var {:.4} vs {:.4}, dev {:.2e} <= 3 SE = {:.2e}; ",
            row.j,
            row.var_q1,
            oracle,
            dev,
            3.0 * row.var_se
        ));
    }
    pass &= report.scale_monotone;

    // explicit member: unit control gives the ramp t with energy 1/2
    let steps = scheme.steps_for(problem.t_horizon).unwrap();
    let h = ControlGrid::constant(1, 0.01, steps, &[1.0]).unwrap();
    let x0 = solve_limit_ode(&problem, &scheme).unwrap();
    let law = x0.dirac_law().unwrap();
    let member_path = solve_skeleton(&problem, &h, &law, &scheme).unwrap();
    let member = limit_set_distance(
        member_path.path_flat(),
        &problem,
        &scheme,
        &LimitSetOptions::default(),
    )
    .unwrap();
    pass &= member.distance <= 1e-3;
    detail.push_str(&format!("member distance {:.2e} <= 1e-3; ", member.distance));

    // the ramp 2t needs terminal value 2 at unit energy; the closest ball
    // element leaves distance 2 - sqrt(2)
    let q: Vec<f64> = (0..=steps).map(|k| 2.0 * 0.01 * k as f64).collect();
    let ramp = limit_set_distance(&q, &problem, &scheme, &LimitSetOptions::default()).unwrap();
    let ramp_oracle = 2.0 - std::f64::consts::SQRT_2;
    let rel = (ramp.distance - ramp_oracle).abs() / ramp_oracle;
    pass &= rel <= 0.03;
    detail.push_str(&format!(
        "ramp distance {:.5} vs {ramp_oracle:.5} rel {rel:.4}",
        ramp.distance
    ));

    // reported, not gated: ball distances along u = 3^j shrink like
    // 1 / log j, far below desk-scale resolution
    let slow_spec = LilSpec::new(LilRegime::LargeTime, 3.0, 1, 3).unwrap();
    let slow_opts = LilHarnessOptions {
        dist_paths: 4,
        limit_set: LimitSetOptions {
            max_iter: 60,
            ..LimitSetOptions::default()
        },
    };
    let slow = lil_harness(
        &problem,
        &slow_spec,
        &family,
        512,
        &scheme,
        &RngSpec::new(0x7172),
        &slow_opts,
    )
    .unwrap();
    for row in &slow.rows {
        println!(
            "criterion 7 info: j={} u={:.1} median ball distance {:?} (reported, not gated)",
            row.j, row.u, row.median_distance
        );
    }

    verdict("7 (iterated-logarithm pipeline)", pass, &detail);
}

/// Bit-identical ensembles across 1, 4, and 16 rayon workers for both
/// schemes on a constrained mean-field problem. The randomized invariant
/// suites for every module run as this workspace's unit and property test
/// targets alongside this gate.
#[test]
fn criterion_8_determinism_across_worker_counts() {
    let set = ConvexSet::boxed(vec![0.0, f64::NEG_INFINITY], vec![f64::INFINITY, 1.0]).unwrap();
    let cone = MonotoneOperator::normal_cone(set).unwrap();
    let coeffs = MeanFieldCoefficients::affine(
        2,
        vec![0.05, 0.0],
        vec![-0.5, 0.0, 0.0, -0.5],
        vec![0.25, 0.0, 0.0, 0.25],
        0.4,
        0.1,
        0.05,
    )
    .unwrap();
    let problem = SdeProblem::new(cone, coeffs, vec![0.5, 0.2], 0.5, 0.8).unwrap();

    let mut pass = true;
    let mut detail = String::new();
    for (scheme, name) in [
        (SchemeSpec::penalized(0.01).unwrap(), "penalized"),
        (SchemeSpec::projection(0.01).unwrap(), "projection"),
    ] {
        let mut blobs: Vec<Vec<u8>> = Vec::new();
        for workers in [1usize, 4, 16] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            let ens = pool
                .install(|| simulate(&problem, &scheme, 600, &RngSpec::new(0x8888)))
                .unwrap();
            let mut buf = Vec::new();
            write_binary(&ens, &mut buf).unwrap();
            blobs.push(buf);
        }
        let same = blobs[1] == blobs[0] && blobs[2] == blobs[0];
        pass &= same;
        detail.push_str(&format!(
            "{name}: {} bytes x 3 worker counts identical={same}; ",
            blobs[0].len()
        ));
    }
    detail.push_str("module invariants covered by the unit and property targets");
    verdict("8 (determinism across workers)", pass, &detail);
}
