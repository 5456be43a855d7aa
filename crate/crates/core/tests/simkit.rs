use mfg_noise_lab::linalg::{Mat, Vector};
use mfg_noise_lab::meanfield::{build_strategy, solve_uniform_consistency, TimeGrid};
use mfg_noise_lab::riccati::{solve_scalar_integrator_p, GameParameters};
use mfg_noise_lab::simkit::*;
use mfg_noise_lab::Error;

fn integrator_run(agents: usize, reps: usize, initial: InitialLaw, seed: u64) -> (SimulationConfig, TrajectoryEnsemble) {
    let params = GameParameters::integrator(0.6, 1.0, 1.0);
    let grid = TimeGrid::new(5.0, 0.01).unwrap();
    let mf = solve_uniform_consistency(&params, &grid).unwrap();
    let strategy = build_strategy(&mf).unwrap();
    let mut cfg = SimulationConfig::new(agents, initial, 5.0, 0.01, reps, seed);
    cfg.tracked_agents = vec![0];
    cfg.agent_statistics = true;
    let ens = simulate_closed_loop(&cfg, &[params], &strategy).unwrap();
    (cfg, ens)
}

#[test]
fn agents_started_at_the_mean_stay_there() {
    let law = InitialLaw::Samples(vec![Vector::from_element(1, 1.0); 4]);
    let (cfg, ens) = integrator_run(4, 3, law, 1);
    let t = &ens.tracked[0];
    assert!(t.states.iter().all(|x| x.iter().all(|v| *v == 1.0)));
    assert!(t.controls.iter().all(|u| u.iter().all(|v| v.abs() < 1e-12)));
    let cost = estimate_cost(
        &ens,
        &Mat::identity(1, 1),
        &Mat::identity(1, 1),
        0.6,
        &CostReference::PopulationAverage,
        0,
    )
    .unwrap();
    assert!(cost.mean.abs() < 1e-20);
    assert_eq!(cfg.stride().unwrap(), 1);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let params = GameParameters::integrator(0.6, 1.0, 1.0);
    let grid = TimeGrid::new(2.0, 0.01).unwrap();
    let strategy = build_strategy(&solve_uniform_consistency(&params, &grid).unwrap()).unwrap();
    let mut cfg = SimulationConfig::new(7, InitialLaw::scalar_normal(1.0, 0.5), 2.0, 0.01, 37, 99);
    cfg.agent_statistics = true;
    cfg.tracked_agents = vec![3];
    cfg.dump_replications = 2;
    cfg.threads = Some(1);
    let one = simulate_closed_loop(&cfg, &[params.clone()], &strategy).unwrap();
    cfg.threads = Some(4);
    let four = simulate_closed_loop(&cfg, &[params], &strategy).unwrap();
    assert_eq!(one, four);
}

#[test]
fn population_average_is_the_agent_mean() {
    let (_, ens) = integrator_run(5, 2, InitialLaw::scalar_normal(1.0, 0.5), 3);
    assert!(ens.dumps.is_empty());
    let params = GameParameters::integrator(0.6, 1.0, 1.0);
    let grid = TimeGrid::new(1.0, 0.01).unwrap();
    let strategy = build_strategy(&solve_uniform_consistency(&params, &grid).unwrap()).unwrap();
    let mut cfg = SimulationConfig::new(5, InitialLaw::scalar_normal(1.0, 0.5), 1.0, 0.01, 2, 3);
    cfg.dump_replications = 2;
    let ens = simulate_closed_loop(&cfg, &[params], &strategy).unwrap();
    for (d, avg) in ens.dumps.iter().zip(&ens.population_average) {
        let mut sum = Mat::zeros(1, ens.nodes());
        for s in &d.states {
            sum += s;
        }
        assert_eq!(sum / 5.0, *avg);
    }
}

#[test]
fn single_agent_resimulation_is_bitwise_identical() {
    let params = GameParameters::integrator(0.6, 1.0, 1.0);
    let grid = TimeGrid::new(2.0, 0.01).unwrap();
    let strategy = build_strategy(&solve_uniform_consistency(&params, &grid).unwrap()).unwrap();
    let mut cfg = SimulationConfig::new(6, InitialLaw::scalar_normal(1.0, 0.5), 2.0, 0.01, 5, 11);
    cfg.tracked_agents = vec![4];
    cfg.record_stride = Some(1);
    let ens = simulate_closed_loop(&cfg, &[params.clone()], &strategy).unwrap();
    let dynamics = AgentDynamics::from_params(&params, cfg.noise).unwrap();
    let policy = AffineFeedback::from_strategy(&strategy, 0, &cfg.grid().unwrap());
    for (m, &rep) in ens.replications.iter().enumerate() {
        let (x, u) = simulate_single_agent(&cfg, &dynamics, &policy, 4, rep, 1).unwrap();
        assert_eq!(x, ens.tracked[0].states[m]);
        assert_eq!(u, ens.tracked[0].controls[m]);
    }
}

#[test]
fn second_moment_follows_geometric_law() {
    let (_, ens) = integrator_run(20, 400, InitialLaw::scalar_normal(1.0, 0.5), 5);
    let (p, _) = solve_scalar_integrator_p(0.6, 1.0).unwrap();
    let rate = p * (p + 2.0) / (p + 1.0).powi(2);
    let m = consensus_metrics(&ens).unwrap();
    for (j, &t) in m.times.iter().enumerate() {
        if [1.0, 2.0, 3.0].iter().any(|s| (t - s).abs() < 1e-9) {
            let expect = 0.5 * (-rate * t).exp();
            assert!((m.from_target[j] - expect).abs() <= 4.0 * m.from_target_stderr[j]);
        }
    }
}

#[test]
fn additive_baseline_reaches_ou_variance() {
    let k = 0.4806248;
    let mut cfg = SimulationConfig::new(20, InitialLaw::scalar_normal(1.0, 0.5), 10.0, 0.01, 200, 17);
    cfg.noise = NoiseModel::Additive { sigma: 0.5 };
    let ens = simulate_additive_baseline(&cfg, k, &Vector::from_element(1, 1.0)).unwrap();
    let m = consensus_metrics(&ens).unwrap();
    let last = m.from_target.len() - 1;
    let expect = 0.25 / (2.0 * k);
    assert!((m.from_target[last] - expect).abs() <= 4.0 * m.from_target_stderr[last]);

    cfg.noise = NoiseModel::Additive { sigma: 0.0 };
    let ens = simulate_additive_baseline(&cfg, k, &Vector::from_element(1, 1.0)).unwrap();
    let m = consensus_metrics(&ens).unwrap();
    let expect = 0.5 * (-2.0 * k * 10.0f64).exp();
    assert!((m.from_target[last] / expect - 1.0).abs() < 0.2);
}

#[test]
fn synthetic_exponential_fit_is_exact() {
    let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
    let values: Vec<f64> = times.iter().map(|t| 0.5 * (-0.73 * t).exp()).collect();
    let fit = fit_decay_rate(&times, &values, (2.5, 7.5)).unwrap();
    assert!((fit.rate + 0.73).abs() < 1e-12);
    assert!(fit.rate_stderr < 1e-10);
    let mut zeros = values.clone();
    zeros[40] = 0.0;
    let fit = fit_decay_rate(&times, &zeros, (2.5, 7.5)).unwrap();
    assert_eq!(fit.dropped_nonpositive, 1);
    assert!(fit_decay_rate(&times, &vec![0.0; 101], (2.5, 7.5)).is_err());
}

#[test]
fn explosive_steps_are_reported() {
    // huge multiplicative noise with a coarse step blows up
    let params = GameParameters::scalar(50.0, 0.0, 30.0, 0.0, 1.0, 1.0, 0.6, 1.0);
    let cfg = SimulationConfig::new(2, InitialLaw::scalar_normal(1.0, 0.5), 2000.0, 0.5, 4, 1);
    let dynamics = AgentDynamics::from_params(&params, cfg.noise).unwrap();
    let policy = AffineFeedback::constant(&Mat::zeros(1, 1), &Vector::zeros(1));
    let err = simulate_population(&cfg, &[dynamics], &[policy]).unwrap_err();
    assert!(matches!(err, Error::BlowUp { .. }));
}

#[test]
fn config_errors() {
    let params = GameParameters::integrator(0.6, 1.0, 1.0);
    let dynamics = AgentDynamics::from_params(&params, NoiseModel::Multiplicative).unwrap();
    let policy = AffineFeedback::constant(&Mat::zeros(1, 1), &Vector::zeros(1));
    let mut cfg = SimulationConfig::new(3, InitialLaw::scalar_normal(1.0, 0.5), 1.0, 0.01, 2, 1);
    cfg.class_of = vec![0, 1, 0];
    assert!(matches!(
        simulate_population(&cfg, &[dynamics.clone()], &[policy.clone()]),
        Err(Error::ClassMismatch(_))
    ));
    cfg.class_of.clear();
    cfg.record_stride = Some(7);
    assert!(simulate_population(&cfg, &[dynamics.clone()], &[policy.clone()]).is_err());
    cfg.record_stride = None;
    cfg.dump_replications = 2;
    cfg.dump_limit = 10;
    assert!(simulate_population(&cfg, &[dynamics.clone()], &[policy.clone()]).is_err());
    cfg.dump_limit = 1_000_000;
    let ens = simulate_population(&cfg, &[dynamics], &[policy]).unwrap();
    assert!(matches!(
        estimate_cost(&ens, &Mat::identity(1, 1), &Mat::identity(1, 1), 0.6, &CostReference::PopulationAverage, 0),
        Err(Error::MissingPaths(_))
    ));
}
