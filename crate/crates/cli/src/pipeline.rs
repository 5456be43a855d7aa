//! Solver → consistency → simulation → audit pipelines.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mfg_noise_lab::linalg::{Mat, Vector};
use mfg_noise_lab::meanfield::{
    build_strategy, solve_heterogeneous_consistency, solve_uniform_consistency, MeanFieldSolution,
};
use mfg_noise_lab::nash_audit::{estimate_nash_gaps, scaled_gap_trend_ok, DeviationFamily, NashGapReport, Perturbation};
use mfg_noise_lab::riccati::{
    sare_residual, solve_sare, solve_scalar_integrator_p, GameParameters, SareOptions, SareSolution,
};
use mfg_noise_lab::simkit::{
    consensus_metrics, estimate_cost, mean_field_error, sample_path, simulate_additive_baseline, simulate_closed_loop,
    ConsensusMetrics, CostReference, NoiseModel, TrajectoryEnsemble,
};
use mfg_noise_lab::stability::{is_rho_stable, LinearNoisySystem};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::output::{num, OutDir, Table};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Audit {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn audit(name: &str, passed: bool, detail: impl Into<String>) -> Audit {
    Audit {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

pub struct Outcome {
    pub audits: Vec<Audit>,
    pub files: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.audits.iter().all(|a| a.passed)
    }
}

/// Where a run's configuration came from.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Preset(String),
    Config(String),
}

const SARE_TOL: f64 = 1e-9;
const REGRESSION_TOL: f64 = 1e-8;

/// Runs the experiment and writes its artifacts, `summary.json` and
/// `manifest.json` into `out`.
pub fn run(cfg: &ExperimentConfig, source: &Source, out: &Path) -> Result<Outcome> {
    cfg.check()?;
    let mut dir = OutDir::create(out)?;
    let (body, audits) = match cfg.experiment {
        ExperimentKind::ClosedLoop => closed_loop(cfg, &mut dir).context("closed-loop pipeline")?,
        ExperimentKind::AdditiveBaseline => additive_baseline(cfg, &mut dir).context("additive-baseline pipeline")?,
        ExperimentKind::NashSweep => nash_sweep(cfg, &mut dir).context("nash-sweep pipeline")?,
        ExperimentKind::RiccatiRegression => riccati_regression(cfg, &mut dir).context("riccati-regression pipeline")?,
    };
    let passed = audits.iter().all(|a| a.passed);
    let summary = json!({
        "experiment": cfg.experiment,
        "results": body,
        "audits": audits,
        "passed": passed,
    });
    dir.json("summary.json", &summary)?;
    let mut files = dir.files.clone();
    files.push("manifest.json".into());
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "source": source,
        "seed": cfg.simulation.seed,
        "config": cfg,
        "files": files,
    });
    dir.json("manifest.json", &manifest)?;
    Ok(Outcome { audits, files })
}

fn mat_json(m: &Mat) -> Value {
    json!(m.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

fn sare_json(label: &str, sol: &SareSolution) -> Value {
    json!({
        "label": label,
        "p": mat_json(&sol.p),
        "gain": mat_json(&sol.gain),
        "r_eff": mat_json(&sol.r_eff),
        "residual": sol.residual,
        "iterations": sol.iterations,
        "detectable": sol.detectable,
    })
}

fn sare_audit(labels: &[String], sols: &[&SareSolution]) -> Audit {
    let worst = sols.iter().map(|s| s.residual).fold(0.0, f64::max);
    let bad: Vec<&String> = labels.iter().zip(sols).filter(|(_, s)| !(s.residual <= SARE_TOL)).map(|(l, _)| l).collect();
    audit(
        "sare-residual",
        bad.is_empty(),
        format!("worst residual {worst:e} (tolerance {SARE_TOL:e}); failing classes {bad:?}"),
    )
}

fn finite_audit(ens: &TrajectoryEnsemble) -> Audit {
    audit(
        "finite-trajectories",
        ens.excluded.is_empty(),
        format!("{} of {} replications excluded as non-finite", ens.excluded.len(), ens.replications.len() + ens.excluded.len()),
    )
}

fn fit_json(m: &ConsensusMetrics) -> Value {
    json!({
        "rate": m.fit.rate,
        "rate_stderr": m.fit.rate_stderr,
        "ci": [m.fit.ci.0, m.fit.ci.1],
        "window": [m.fit.window.0, m.fit.window.1],
        "points": m.fit.points,
    })
}

fn state_labels(prefix: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![prefix.to_string()]
    } else {
        (0..n).map(|j| format!("{prefix}_{j}")).collect()
    }
}

/// One CSV per dumped replication: `t`, then every agent's components.
fn write_paths(dir: &mut OutDir, ens: &TrajectoryEnsemble) -> Result<()> {
    let n = ens.state_dim;
    for (k, dump) in ens.dumps.iter().enumerate() {
        let mut header = vec!["t".to_string()];
        for i in 0..ens.agents {
            header.extend(state_labels(&format!("x{i}"), n));
        }
        let mut table = Table::new(header);
        for (j, &t) in ens.times.iter().enumerate() {
            let mut row = vec![t];
            for x in &dump.states {
                row.extend(x.column(j).iter().copied());
            }
            table.push_numbers(row);
        }
        let name = if k == 0 { "paths.csv".to_string() } else { format!("paths_rep{}.csv", dump.replication) };
        dir.table(&name, &table)?;
    }
    Ok(())
}

/// Pooled deviations, their errors and the replication mean of `x^{(N)}`,
/// plus extra columns evaluated on the record nodes.
fn write_metrics(dir: &mut OutDir, ens: &TrajectoryEnsemble, m: &ConsensusMetrics, extra: &[(String, Vec<f64>)]) -> Result<()> {
    let n = ens.state_dim;
    let mut header: Vec<String> = ["t", "dev_target", "dev_target_stderr", "dev_average", "dev_average_stderr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(state_labels("avg", n));
    header.extend(extra.iter().map(|(name, _)| name.clone()));
    let mut table = Table::new(header);
    let kept = ens.population_average.len().max(1) as f64;
    for j in 0..m.times.len() {
        let mut row = vec![m.times[j], m.from_target[j], m.from_target_stderr[j], m.from_average[j], m.from_average_stderr[j]];
        for c in 0..n {
            row.push(ens.population_average.iter().map(|a| a[(c, j)]).sum::<f64>() / kept);
        }
        row.extend(extra.iter().map(|(_, v)| v[j]));
        table.push_numbers(row);
    }
    dir.table("metrics.csv", &table)
}

fn solve_limit(cfg: &ExperimentConfig, params: &[GameParameters]) -> Result<MeanFieldSolution> {
    let grid = cfg.solver_grid()?;
    let mf = if params.len() == 1 {
        solve_uniform_consistency(&params[0], &grid)?
    } else {
        solve_heterogeneous_consistency(&cfg.agent_classes()?, &grid, cfg.picard())?
    };
    Ok(mf)
}

fn closed_loop(cfg: &ExperimentConfig, dir: &mut OutDir) -> Result<(Value, Vec<Audit>)> {
    let params = cfg.game_parameters()?;
    let labels: Vec<String> = cfg.classes.iter().map(|c| c.label.clone()).collect();
    let mf = solve_limit(cfg, &params)?;
    let strategy = build_strategy(&mf)?;
    let mut sim = cfg.simulation_config(cfg.simulation.agents)?;
    sim.tracked_agents = vec![0];
    sim.dump_replications = cfg.simulation.path_replications;
    let ens = simulate_closed_loop(&sim, &params, &strategy)?;
    let metrics = consensus_metrics(&ens)?;
    let class0 = &params[sim.class(0)];
    let cost = estimate_cost(&ens, &class0.q, &class0.r, class0.rho, &CostReference::PopulationAverage, 0)?;
    let xbar = sample_path(&mf.grid, &mf.xbar, &ens.times)?;
    let mf_err = mean_field_error(&ens, &xbar, mf.rho)?;

    write_paths(dir, &ens)?;
    let extra: Vec<(String, Vec<f64>)> = state_labels("xbar", ens.state_dim)
        .into_iter()
        .enumerate()
        .map(|(c, name)| (name, xbar.row(c).iter().copied().collect()))
        .collect();
    write_metrics(dir, &ens, &metrics, &extra)?;

    let sols: Vec<&SareSolution> = mf.classes.iter().map(|c| &c.sare).collect();
    let mut audits = vec![sare_audit(&labels, &sols)];
    let fp_tol = (100.0 * cfg.solver.tol).max(1e-8);
    audits.push(audit(
        "fixed-point",
        mf.fixed_point_residual <= fp_tol,
        format!("residual {:e} after {} iterations (tolerance {fp_tol:e})", mf.fixed_point_residual, mf.iterations),
    ));
    audits.push(finite_audit(&ens));

    let last = metrics.times.len() - 1;
    let mut consensus = json!({
        "fit": fit_json(&metrics),
        "initial_deviation": metrics.from_target[0],
        "final_deviation": metrics.from_target[last],
        "final_deviation_stderr": metrics.from_target_stderr[last],
        "final_spread": metrics.from_average[last],
        "final_spread_stderr": metrics.from_average_stderr[last],
    });
    if params.iter().all(GameParameters::is_integrator) {
        // e = x - x̄₀ follows [A - BG, C - DG]; its mean-square exponent is exact
        let predicted: Vec<f64> = mf
            .classes
            .iter()
            .map(|c| {
                let sys = LinearNoisySystem::new(&c.params.a - &c.params.b * &c.sare.gain, &c.params.c - &c.params.d * &c.sare.gain)?;
                Ok(is_rho_stable(&sys, 0.0)?.spectral_abscissa)
            })
            .collect::<Result<_>>()?;
        consensus["predicted_rate"] = json!(predicted);
        let decays = metrics.fit.ci.1 < 0.0 && metrics.from_target[last] < metrics.from_target[0];
        audits.push(audit(
            "mean-square-consensus",
            decays,
            format!(
                "E|x_i - x0|^2 fitted rate {:+.4} (95% CI [{:+.4}, {:+.4}]), predicted {:?}; {:.3e} -> {:.3e}",
                metrics.fit.rate, metrics.fit.ci.0, metrics.fit.ci.1, predicted, metrics.from_target[0], metrics.from_target[last]
            ),
        ));
    } else {
        let shrinks = metrics.from_average[last] + 3.0 * metrics.from_average_stderr[last] < metrics.from_average[0];
        audits.push(audit(
            "agreement",
            shrinks,
            format!(
                "E|x_i - x^(N)|^2 {:.3e} -> {:.3e} (stderr {:.1e})",
                metrics.from_average[0], metrics.from_average[last], metrics.from_average_stderr[last]
            ),
        ));
    }

    let body = json!({
        "agents": sim.agents,
        "replications_kept": ens.kept(),
        "excluded_replications": ens.excluded,
        "record_stride": ens.record_stride,
        "classes": labels.iter().zip(&sols).map(|(l, s)| sare_json(l, s)).collect::<Vec<_>>(),
        "mean_field": {
            "fixed_point_residual": mf.fixed_point_residual,
            "iterations": mf.iterations,
            "warnings": mf.warnings,
            "error_vs_population": {"mean": mf_err.mean, "stderr": mf_err.stderr},
        },
        "consensus": consensus,
        "cost_agent0": {"mean": cost.mean, "stderr": cost.stderr, "truncation_bound": cost.tail_bound},
    });
    Ok((body, audits))
}

fn additive_baseline(cfg: &ExperimentConfig, dir: &mut OutDir) -> Result<(Value, Vec<Audit>)> {
    let base = cfg.baseline.as_ref().expect("checked");
    let params = cfg.game_parameters()?;
    let mut audits = Vec::new();
    let (gain, sare) = match base.gain {
        Some(k) => (k, None),
        None => {
            let sol = solve_sare(&params[0], SareOptions::default())?;
            if sol.gain.shape() != (1, 1) {
                bail!("baseline.gain: the class Riccati gain is not scalar; set the gain explicitly");
            }
            audits.push(sare_audit(&[cfg.classes[0].label.clone()], &[&sol]));
            (sol.gain[(0, 0)], Some(sol))
        }
    };
    if !(gain > 0.0) {
        bail!("baseline.gain: must be positive, got {gain}");
    }
    let target = Vector::from_vec(base.target.clone());
    let mut sim = cfg.simulation_config(cfg.simulation.agents)?;
    sim.class_of.clear();
    sim.noise = NoiseModel::Additive { sigma: base.sigma };
    sim.reference = Some(target.clone());
    sim.dump_replications = cfg.simulation.path_replications;
    let ens = simulate_additive_baseline(&sim, gain, &target)?;
    let metrics = consensus_metrics(&ens)?;
    let init = cfg.initial.as_ref().expect("checked");
    let cov0 = init.covariance.to_mat("initial.covariance")?;
    let offset: f64 = init.mean.iter().zip(&base.target).map(|(m, t)| (m - t).powi(2)).sum();
    let n = target.len() as f64;
    let stationary = n * base.sigma * base.sigma / (2.0 * gain);
    // Ornstein-Uhlenbeck second moment about the target
    let exact: Vec<f64> = ens
        .times
        .iter()
        .map(|&t| {
            let e = (-2.0 * gain * t).exp();
            (cov0.trace() + offset) * e + stationary * (1.0 - e)
        })
        .collect();

    write_paths(dir, &ens)?;
    write_metrics(dir, &ens, &metrics, &[("dev_target_exact".into(), exact.clone())])?;

    let last = metrics.times.len() - 1;
    let (fin, se) = (metrics.from_target[last], metrics.from_target_stderr[last]);
    audits.push(finite_audit(&ens));
    audits.push(audit(
        "no-consensus",
        fin - 3.0 * se >= 0.1 * n && stationary >= 0.1 * n,
        format!("E|x_i - target|^2 at T = {fin:.4e} ± {se:.1e}, stationary level {stationary:.4e}"),
    ));
    audits.push(audit(
        "stationary-variance",
        (fin - exact[last]).abs() <= 4.0 * se,
        format!("simulated {fin:.5e} vs exact {:.5e} (4 stderr = {:.1e})", exact[last], 4.0 * se),
    ));
    let body = json!({
        "agents": sim.agents,
        "sigma": base.sigma,
        "gain": gain,
        "riccati": sare.as_ref().map(|s| sare_json(&cfg.classes[0].label, s)),
        "replications_kept": ens.kept(),
        "stationary_deviation": stationary,
        "final_deviation": fin,
        "final_deviation_stderr": se,
        "final_deviation_exact": exact[last],
        "final_spread": metrics.from_average[last],
        "fit": fit_json(&metrics),
    });
    Ok((body, audits))
}

fn nash_families(cfg: &ExperimentConfig, r: usize) -> Vec<DeviationFamily> {
    let nash = cfg.nash.as_ref().expect("checked");
    let mut families = Vec::new();
    if !nash.offsets.is_empty() {
        families.push(DeviationFamily::OffsetPaths(
            nash.offsets.iter().map(|&c| Perturbation::constant(&vec![c; r])).collect(),
        ));
    }
    if !nash.gains.is_empty() && !nash.feedback_offsets.is_empty() {
        families.push(DeviationFamily::SaturatedFeedback {
            gains: nash.gains.clone(),
            offsets: nash.feedback_offsets.clone(),
            bound: nash.bound,
            refine_steps: nash.refine_steps,
        });
    }
    if nash.pilot_replications > 0 {
        families.push(DeviationFamily::TrackingBestResponse {
            pilot_replications: nash.pilot_replications,
        });
    }
    families
}

fn nash_sweep(cfg: &ExperimentConfig, dir: &mut OutDir) -> Result<(Value, Vec<Audit>)> {
    let nash = cfg.nash.as_ref().expect("checked");
    if cfg.classes.len() != 1 {
        bail!("classes: nash-sweep needs exactly one class");
    }
    let params = cfg.game_parameters()?;
    let mf = solve_limit(cfg, &params)?;
    let strategy = build_strategy(&mf)?;
    let families = nash_families(cfg, params[0].control_dim());
    if params[0].state_dim() != 1 {
        bail!("nash-sweep: the saturated feedback family needs scalar agents");
    }
    let mut table = Table::new([
        "agents", "seed", "family", "equilibrium_cost", "equilibrium_stderr", "best_cost", "best_stderr", "gap",
        "gap_stderr", "violation",
    ]);
    let mut all: Vec<NashGapReport> = Vec::new();
    let mut best_per_n = Vec::new();
    let mut violations = Vec::new();
    for (i, &agents) in nash.agent_counts.iter().enumerate() {
        let mut sim = cfg.simulation_config(agents)?;
        // one seed per population size, offset by its position in the sweep
        sim.seed = cfg.simulation.seed.wrapping_add(i as u64);
        let reports = estimate_nash_gaps(&sim, &params, &strategy, nash.agent, &families)?;
        for r in &reports {
            table.push(vec![
                agents.to_string(),
                r.seed.to_string(),
                r.family.clone(),
                num(r.equilibrium_cost.mean),
                num(r.equilibrium_cost.stderr),
                num(r.best_cost.mean),
                num(r.best_cost.stderr),
                num(r.gap),
                num(r.gap_stderr),
                u8::from(r.violation).to_string(),
            ]);
            for c in r.candidates.iter().filter(|c| c.beats_equilibrium) {
                violations.push(format!("N={agents} {}", c.label));
            }
            if !r.excluded.is_empty() {
                violations.push(format!("N={agents} non-finite {:?}", r.excluded));
            }
        }
        if let Some(best) = reports.iter().max_by(|a, b| a.gap.total_cmp(&b.gap)) {
            best_per_n.push(best.clone());
        }
        all.extend(reports);
    }
    dir.table("nash.csv", &table)?;
    let trend = scaled_gap_trend_ok(&best_per_n);
    let audits = vec![
        sare_audit(&[cfg.classes[0].label.clone()], &[&mf.classes[0].sare]),
        audit(
            "no-profitable-deviation",
            violations.is_empty(),
            format!("{} candidates beat the equilibrium by more than 3 pooled stderr: {violations:?}", violations.len()),
        ),
        audit(
            "gap-scaling",
            trend,
            best_per_n
                .iter()
                .map(|r| format!("N={}: gap·√N {:+.3e}", r.agents, r.gap * (r.agents as f64).sqrt()))
                .collect::<Vec<_>>()
                .join(", "),
        ),
    ];
    let body = json!({
        "riccati": sare_json(&cfg.classes[0].label, &mf.classes[0].sare),
        "reports": all,
    });
    Ok((body, audits))
}

fn riccati_regression(cfg: &ExperimentConfig, dir: &mut OutDir) -> Result<(Value, Vec<Audit>)> {
    let grid = cfg.regression.as_ref().expect("checked");
    let mut table = Table::new(["rho", "r", "p_formula", "p_solver", "residual"]);
    let mut worst_diff: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for &rho in &grid.rho {
        for &r in &grid.r {
            let (p, _) = solve_scalar_integrator_p(rho, r).with_context(|| format!("closed form at rho={rho}, r={r}"))?;
            let params = GameParameters::integrator(rho, r, 1.0);
            let sol = solve_sare(&params, SareOptions::default()).with_context(|| format!("solver at rho={rho}, r={r}"))?;
            let res = sare_residual(&params, &sol.p)?;
            worst_diff = worst_diff.max((sol.p[(0, 0)] - p).abs());
            worst_res = worst_res.max(res);
            table.push_numbers([rho, r, p, sol.p[(0, 0)], res]);
        }
    }
    dir.table("regression.csv", &table)?;
    let audits = vec![
        audit(
            "formula-agreement",
            worst_diff <= REGRESSION_TOL,
            format!("max |p_solver - p_formula| = {worst_diff:e} (tolerance {REGRESSION_TOL:e})"),
        ),
        audit("sare-residual", worst_res <= SARE_TOL, format!("worst residual {worst_res:e}")),
    ];
    let body = json!({
        "cases": grid.rho.len() * grid.r.len(),
        "max_difference": worst_diff,
        "max_residual": worst_res,
    });
    Ok((body, audits))
}
