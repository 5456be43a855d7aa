//! Built-in experiments.

use mfg_noise_lab::riccati::GameParameters;

use crate::config::{
    BaselineConfig, ClassConfig, ExperimentConfig, ExperimentKind, InitialConfig, MatrixSpec, NashConfig,
    ParamsConfig, RegressionConfig, SimulationSettings, SolverSettings,
};

pub const PRESETS: [&str; 5] = [
    "uniform-agents-fig1",
    "integrator-consensus-fig2",
    "additive-baseline-fig3",
    "nash-sweep",
    "riccati-regression",
];

const RHO: f64 = 0.6;

fn class(label: &str, params: GameParameters) -> ClassConfig {
    ClassConfig {
        label: label.into(),
        weight: 1.0,
        params: ParamsConfig::of(&params),
    }
}

fn initial() -> Option<InitialConfig> {
    Some(InitialConfig {
        mean: vec![1.0],
        covariance: MatrixSpec::Scalar(0.5),
    })
}

fn simulation(replications: usize) -> SimulationSettings {
    SimulationSettings {
        agents: 50,
        horizon: 10.0,
        dt: 0.01,
        replications,
        seed: 7,
        record_stride: Some(1),
        path_replications: 1,
    }
}

fn base(experiment: ExperimentKind, classes: Vec<ClassConfig>, replications: usize) -> ExperimentConfig {
    ExperimentConfig {
        experiment,
        classes,
        initial: initial(),
        simulation: simulation(replications),
        solver: SolverSettings::default(),
        baseline: None,
        nash: None,
        regression: None,
    }
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let cfg = match name {
        "uniform-agents-fig1" => base(
            ExperimentKind::ClosedLoop,
            vec![class("a=0.1", GameParameters::scalar(0.1, 1.0, 0.1, 1.0, 1.0, 1.0, RHO, 1.0))],
            200,
        ),
        "integrator-consensus-fig2" => base(
            ExperimentKind::ClosedLoop,
            vec![class("integrator", GameParameters::scalar(0.0, 1.0, 0.0, 0.5, 1.0, 1.0, RHO, 1.0))],
            200,
        ),
        "additive-baseline-fig3" => {
            let mut cfg = base(
                ExperimentKind::AdditiveBaseline,
                vec![class("integrator", GameParameters::integrator(RHO, 1.0, 1.0))],
                200,
            );
            cfg.baseline = Some(BaselineConfig {
                sigma: 0.5,
                gain: None,
                target: vec![1.0],
            });
            cfg
        }
        "nash-sweep" => {
            let mut cfg = base(
                ExperimentKind::NashSweep,
                vec![class("integrator", GameParameters::integrator(RHO, 1.0, 1.0))],
                400,
            );
            cfg.simulation.record_stride = Some(10);
            cfg.nash = Some(NashConfig {
                agent_counts: vec![10, 50, 200],
                agent: 0,
                offsets: vec![0.1, -0.1],
                gains: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                feedback_offsets: vec![0.75, 1.0, 1.25],
                bound: 2.0,
                refine_steps: 6,
                pilot_replications: 100,
            });
            cfg
        }
        "riccati-regression" => {
            let mut cfg = base(ExperimentKind::RiccatiRegression, Vec::new(), 1);
            cfg.initial = None;
            cfg.regression = Some(RegressionConfig {
                rho: (0..5).map(|i| 0.2 + 0.2 * i as f64).collect(),
                r: (0..5).map(|j| 0.25 + 1.75 * j as f64 / 4.0).collect(),
            });
            cfg
        }
        _ => return None,
    };
    Some(cfg)
}
