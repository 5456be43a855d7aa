//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Monte Carlo settings are fixed and seeded.

use std::time::Instant;

use mfg_noise_lab::linalg::{Mat, Vector};
use mfg_noise_lab::meanfield::*;
use mfg_noise_lab::nash_audit::*;
use mfg_noise_lab::riccati::*;
use mfg_noise_lab::simkit::*;
use mfg_noise_lab::stability::{is_rho_stabilizable, second_moment_trace, LinearNoisySystem};
use mfg_noise_lab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RHO: f64 = 0.6;
const RATE: f64 = 0.730250;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn integrator() -> GameParameters {
    GameParameters::integrator(RHO, 1.0, 1.0)
}

fn integrator_strategy(horizon: f64) -> Result<DecentralizedStrategy> {
    build_strategy(&solve_uniform_consistency(&integrator(), &TimeGrid::new(horizon, 0.01)?)?)
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let rho = 0.2 + 0.2 * i as f64;
            let r = 0.25 + 1.75 * j as f64 / 4.0;
            let (p, _) = solve_scalar_integrator_p(rho, r)?;
            let sol = solve_sare(&GameParameters::integrator(rho, r, 1.0), SareOptions::default())?;
            worst = worst.max((sol.p[(0, 0)] - p).abs());
        }
    }
    let (p, _) = solve_scalar_integrator_p(RHO, 1.0)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= 1e-8 && (p - 0.9253906).abs() <= 1e-6 && secs < 1.0,
        format!("max |solver - formula| = {worst:.2e}, p(0.6, 1) = {p:.9}, {secs:.2}s"),
    ))
}

fn random_system(rng: &mut ChaCha8Rng) -> Option<GameParameters> {
    let n = rng.gen_range(1..=4);
    let m = rng.gen_range(1..=n);
    let mut draw = |rows: usize, cols: usize, s: f64| Mat::from_fn(rows, cols, |_, _| rng.gen_range(-s..s));
    let a = draw(n, n, 0.8);
    let b = draw(n, m, 1.0) + Mat::identity(n, m);
    let c = draw(n, n, 0.3);
    let d = draw(n, m, 0.3);
    let w = draw(n, n, 0.5);
    let q = Mat::identity(n, n) + w.transpose() * w;
    let rho = rng.gen_range(0.0..1.0);
    let params = GameParameters::new(a, b, c, d, q, Mat::identity(m, m), rho, Vector::from_element(n, 1.0)).ok()?;
    is_rho_stabilizable(&params.system().ok()?, rho)
        .ok()
        .filter(|s| s.is_stabilizable())
        .map(|_| params)
}

fn criterion_2() -> Result<Verdict> {
    let start = Instant::now();
    let five = GameParameters::scalar(0.1, 1.0, 0.1, 1.0, 1.0, 1.0, RHO, 1.0);
    let sol = solve_sare(&five, SareOptions::default())?;
    let p = sol.p[(0, 0)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut solved = 0;
    while solved < 50 {
        if let Some(params) = random_system(&mut rng) {
            worst = worst.max(solve_sare(&params, SareOptions::default())?.residual);
            solved += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        (p - 1.0038518).abs() <= 1e-7 && sol.residual <= 1e-10 && worst <= 1e-9 && secs < 10.0,
        format!(
            "P = {p:.9} (residual {:.1e}), worst residual over 50 random systems {worst:.1e}, {secs:.2}s",
            sol.residual
        ),
    ))
}

fn fixed_point_error(mf: &MeanFieldSolution, x0: &Vector) -> f64 {
    let c = &mf.classes[0];
    let s = -(&c.sare.p * x0);
    (0..mf.grid.len())
        .map(|k| (mf.xbar.column(k) - x0).amax().max((c.s.column(k) - &s).amax()))
        .fold(0.0, f64::max)
}

fn criterion_3() -> Result<Verdict> {
    let start = Instant::now();
    let grid = TimeGrid::new(20.0, 0.01)?;
    let scalar = integrator();
    let x0 = Vector::from_vec(vec![1.0, -0.5]);
    let vector = GameParameters::multiple_integrator(
        Mat::identity(2, 2),
        Mat::identity(2, 2),
        Mat::identity(2, 2),
        RHO,
        x0.clone(),
    )?;
    let mut worst: f64 = 0.0;
    for params in [&scalar, &vector] {
        let uniform = solve_uniform_consistency(params, &grid)?;
        let picard = solve_heterogeneous_consistency(
            &[AgentClass::new("only", params.clone(), 1.0)],
            &grid,
            PicardOptions::default(),
        )?;
        for mf in [&uniform, &picard] {
            worst = worst.max(fixed_point_error(mf, &params.x0_mean));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= 1e-8 && secs < 5.0,
        format!("max deviation from (-P x0, x0) = {worst:.1e} (scalar and n=2, both solvers), {secs:.2}s"),
    ))
}

struct MomentRun {
    metrics: ConsensusMetrics,
    secs: f64,
}

fn moment_run() -> Result<MomentRun> {
    let start = Instant::now();
    let strategy = integrator_strategy(10.0)?;
    let mut cfg = SimulationConfig::new(50, InitialLaw::scalar_normal(1.0, 0.5), 10.0, 1e-3, 2000, 4);
    cfg.record_stride = Some(10);
    let ens = simulate_closed_loop(&cfg, &[integrator()], &strategy)?;
    let metrics = consensus_metrics(&ens)?;
    Ok(MomentRun {
        metrics,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_4(run: &MomentRun) -> Result<Verdict> {
    let m = &run.metrics;
    let mut ok = run.secs < 120.0;
    let mut parts = Vec::new();
    for t in [1.0, 3.0, 5.0] {
        let j = m.times.iter().position(|s| (s - t).abs() < 1e-9).expect("record node");
        let expect = 0.5 * (-RATE * t).exp();
        let z = (m.from_target[j] - expect) / m.from_target_stderr[j];
        ok &= z.abs() <= 3.0;
        parts.push(format!("t={t}: {:.5} vs {expect:.5} (z={z:+.2})", m.from_target[j]));
    }
    Ok(verdict(ok, format!("{}, {:.1}s", parts.join(", "), run.secs)))
}

fn criterion_5(run: &MomentRun) -> Result<Verdict> {
    let fit = &run.metrics.fit;
    let rel = (fit.rate + RATE).abs() / RATE;

    // r between the two thresholds: the gain exceeds the mean-square limit
    let r = -0.194;
    let (p, _) = solve_scalar_integrator_p(RHO, r)?;
    let k = p / (p + r);
    let times: Vec<f64> = (0..=1000).map(|j| j as f64 * 0.01).collect();
    let closed = LinearNoisySystem::scalar(-k, -k);
    let exact = second_moment_trace(&closed, &Mat::from_element(1, 1, 0.5), &times)?;
    let exact_fit = fit_decay_rate(&times, &exact, (2.5, 7.5))?;

    let params = GameParameters::integrator(RHO, r, 1.0);
    let strategy = build_strategy(&solve_uniform_consistency(&params, &TimeGrid::new(10.0, 0.01)?)?)?;
    let mut cfg = SimulationConfig::new(50, InitialLaw::scalar_normal(1.0, 0.5), 10.0, 1e-3, 200, 5);
    cfg.record_stride = Some(10);
    let mc = consensus_metrics(&simulate_closed_loop(&cfg, &[params], &strategy)?)
        .map(|m| format!("{:+.4}", m.fit.rate))
        .unwrap_or_else(|e| format!("unavailable ({e})"));

    Ok(verdict(
        rel <= 0.10 && exact_fit.rate >= -0.02,
        format!(
            "r=1: fitted {:+.4} vs {:+.6} ({:.1}% off); r=-0.194: mean-square law rate {:+.4} \
             (closed form {:+.4}), Monte Carlo fit {mc} is dominated by the lognormal tail",
            fit.rate,
            -RATE,
            100.0 * rel,
            exact_fit.rate,
            -p * (p + 2.0 * r) / (p + r).powi(2)
        ),
    ))
}

struct SizeRun {
    agents: usize,
    error: CostEstimate,
    energy: Vec<f64>,
    times: Vec<f64>,
}

fn size_runs() -> Result<(Vec<SizeRun>, f64)> {
    let start = Instant::now();
    let strategy = integrator_strategy(10.0)?;
    let mut out = Vec::new();
    for (i, agents) in [10usize, 50, 200].into_iter().enumerate() {
        let mut cfg = SimulationConfig::new(agents, InitialLaw::scalar_normal(1.0, 0.5), 10.0, 1e-2, 1000, 60 + i as u64);
        cfg.agent_statistics = true;
        let ens = simulate_closed_loop(&cfg, &[integrator()], &strategy)?;
        let xbar = Mat::from_element(1, ens.nodes(), 1.0);
        out.push(SizeRun {
            agents,
            error: mean_field_error(&ens, &xbar, RHO)?,
            energy: max_agent_energy_integral(&ens, RHO)?,
            times: ens.times.clone(),
        });
    }
    Ok((out, start.elapsed().as_secs_f64()))
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn criterion_6(runs: &[SizeRun], secs: f64) -> Result<Verdict> {
    let xs: Vec<f64> = runs.iter().map(|r| (r.agents as f64).ln()).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.error.mean.ln()).collect();
    let s = slope(&xs, &ys);
    let values: Vec<String> = runs
        .iter()
        .map(|r| format!("N={}: {:.3e}±{:.1e}", r.agents, r.error.mean, r.error.stderr))
        .collect();
    Ok(verdict(
        (s + 1.0).abs() <= 0.3 && secs < 180.0,
        format!("slope {s:+.3} ({}), {secs:.1}s", values.join(", ")),
    ))
}

fn criterion_7() -> Result<Verdict> {
    let start = Instant::now();
    let strategy = integrator_strategy(10.0)?;
    let families = vec![
        DeviationFamily::OffsetPaths(vec![
            Perturbation::constant(&[0.1]),
            Perturbation::constant(&[-0.1]),
            Perturbation::sinusoid(&[0.0], &[0.2], 1.0),
        ]),
        DeviationFamily::SaturatedFeedback {
            gains: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            offsets: vec![0.75, 1.0, 1.25],
            bound: 2.0,
            refine_steps: 8,
        },
        DeviationFamily::TrackingBestResponse { pilot_replications: 200 },
    ];
    let mut summary = Vec::new();
    let mut violations = Vec::new();
    let mut best_per_n = Vec::new();
    let mut eq200 = None;
    for (i, agents) in [10usize, 50, 200].into_iter().enumerate() {
        let cfg = SimulationConfig::new(agents, InitialLaw::scalar_normal(1.0, 0.5), 10.0, 5e-3, 2000, 70 + i as u64);
        let reports = estimate_nash_gaps(&cfg, &[integrator()], &strategy, 0, &families)?;
        for r in &reports {
            for c in r.candidates.iter().filter(|c| c.beats_equilibrium) {
                violations.push(format!("N={agents} {}", c.label));
            }
            if !r.excluded.is_empty() {
                violations.push(format!("N={agents} non-finite: {:?}", r.excluded));
            }
        }
        let best = reports
            .iter()
            .max_by(|a, b| a.gap.total_cmp(&b.gap))
            .cloned()
            .expect("families");
        summary.push(format!(
            "N={agents}: gap {:+.2e}±{:.1e} ({}), gap·√N {:+.2e}",
            best.gap,
            best.gap_stderr,
            best.family,
            best.gap * (agents as f64).sqrt()
        ));
        if agents == 200 {
            eq200 = Some(best.equilibrium_cost);
        }
        best_per_n.push(best);
    }
    let trend = scaled_gap_trend_ok(&best_per_n);
    let eq = eq200.expect("N=200 run");
    let value_ok = (eq.mean - 0.4626953).abs() <= 0.05 * 0.4626953 + 3.0 * eq.stderr;
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        violations.is_empty() && trend && value_ok && secs < 300.0,
        format!(
            "{}; violations {:?}; trend ok {trend}; J(û) at N=200 = {:.5}±{:.5} vs 0.4626953; {secs:.1}s",
            summary.join(", "),
            violations,
            eq.mean,
            eq.stderr
        ),
    ))
}

fn criterion_8() -> Result<Verdict> {
    let start = Instant::now();
    let params = integrator();
    let mf = solve_uniform_consistency(&params, &TimeGrid::new(15.0, 0.01)?)?;
    let problem = LimitProblem::from_solution(&mf, 0)?;
    let cfg = SimulationConfig::new(1, InitialLaw::scalar_normal(1.0, 0.5), 15.0, 1e-3, 1000, 8);
    let optimal = problem.optimal_policy(&cfg.grid()?)?;
    let shift = Perturbation::constant(&[0.1]);
    let shifted = Perturbed {
        base: &optimal,
        delta: &shift,
        scale: 1.0,
    };
    let excess = cost_excess(&problem, &shifted, &cfg)?;
    let z = (excess.mean - 0.0320898) / excess.stderr;

    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    let mut cfg20 = cfg.clone();
    cfg20.replications = 400;
    for j in 0..20 {
        let mut delta = Perturbation::sinusoid(&[rng.gen_range(-0.5..0.5)], &[rng.gen_range(-0.5..0.5)], rng.gen_range(0.0..3.0));
        if j % 2 == 1 {
            delta = delta.with_gain(&Mat::from_element(1, 1, rng.gen_range(-0.3..0.3)));
        }
        let pol = Perturbed {
            base: &optimal,
            delta: &delta,
            scale: 1.0,
        };
        cfg20.seed = 800 + j;
        let check = verify_completing_square(&problem, &pol, &cfg20)?;
        worst = worst.max(check.normalized_defect);
        failed += usize::from(!check.passed);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        z.abs() <= 3.0 && failed == 0,
        format!(
            "excess {:.7}±{:.1e} vs 0.0320898 (z={z:+.2}); 20 perturbations: worst normalized defect {worst:.2}, {failed} failed; {secs:.1}s",
            excess.mean, excess.stderr
        ),
    ))
}

fn criterion_9(run: &MomentRun) -> Result<Verdict> {
    let m = &run.metrics;
    let last = m.times.len() - 1;
    let ratio = m.from_target[last] / m.from_target[0];

    let k = solve_scalar_integrator_p(RHO, 1.0).map(|(p, _)| p / (p + 1.0))?;
    let mut cfg = SimulationConfig::new(50, InitialLaw::scalar_normal(1.0, 0.5), 10.0, 1e-2, 400, 9);
    cfg.noise = NoiseModel::Additive { sigma: 0.5 };
    let add = consensus_metrics(&simulate_additive_baseline(&cfg, k, &Vector::from_element(1, 1.0))?)?;
    let j = add.times.len() - 1;
    let z = (add.from_target[j] - 0.260098) / add.from_target_stderr[j];
    Ok(verdict(
        ratio <= 1e-2 && z.abs() <= 3.0 && add.from_target[j] >= 0.1,
        format!(
            "multiplicative deviation at T=10 is {ratio:.2e} of its initial value; additive {:.5}±{:.1e} vs 0.260098 (z={z:+.2})",
            add.from_target[j], add.from_target_stderr[j]
        ),
    ))
}

fn criterion_10(runs: &[SizeRun]) -> Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    let reference = runs[0].energy.last().copied().unwrap_or(f64::NAN);
    for run in runs {
        // the integrand e^{-ρt} max_i E(x² + u²) recovered from the running integral
        let n = run.times.len();
        let rate: Vec<f64> = (1..n)
            .map(|j| (run.energy[j] - run.energy[j - 1]) / (run.times[j] - run.times[j - 1]))
            .collect();
        let tail = &rate[rate.len() / 2..];
        let blocks: Vec<f64> = tail
            .chunks(tail.len() / 5)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let monotone = blocks.windows(2).all(|w| w[1] <= w[0] * 1.05);
        let total = *run.energy.last().unwrap();
        let bounded = total <= 2.0 * reference;
        ok &= monotone && bounded;
        parts.push(format!(
            "N={}: integral {total:.4}, tail non-increasing {monotone}",
            run.agents
        ));
    }
    Ok(verdict(ok, format!("{} (bound 2 × N=10 value)", parts.join(", "))))
}

fn report(id: &str, outcome: Result<Verdict>, failures: &mut usize) {
    match outcome {
        Ok(v) => {
            println!("{} criterion {id}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            *failures += usize::from(!v.pass);
        }
        Err(e) => {
            println!("FAIL criterion {id}: error {e}");
            *failures += 1;
        }
    }
}

fn main() {
    let mut failures = 0;
    report("1", criterion_1(), &mut failures);
    report("2", criterion_2(), &mut failures);
    report("3", criterion_3(), &mut failures);
    match moment_run() {
        Ok(run) => {
            report("4", criterion_4(&run), &mut failures);
            report("5", criterion_5(&run), &mut failures);
            report("9", criterion_9(&run), &mut failures);
        }
        Err(e) => {
            for id in ["4", "5", "9"] {
                report(id, Err(e.clone()), &mut failures);
            }
        }
    }
    match size_runs() {
        Ok((runs, secs)) => {
            report("6", criterion_6(&runs, secs), &mut failures);
            report("10", criterion_10(&runs), &mut failures);
        }
        Err(e) => {
            report("6", Err(e.clone()), &mut failures);
            report("10", Err(e), &mut failures);
        }
    }
    report("7", criterion_7(), &mut failures);
    report("8", criterion_8(), &mut failures);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
