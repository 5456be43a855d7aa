use mfg_noise_lab::linalg::{self, Mat, Vector};
use mfg_noise_lab::riccati::*;
use mfg_noise_lab::stability::{is_rho_stabilizable, is_rho_stable, mean_square_operator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Random system whose open loop plus a Riccati solve is well posed; `None`
/// when the draw is not stabilizable.
fn random_game(rng: &mut ChaCha8Rng) -> Option<GameParameters> {
    let n = rng.gen_range(1..=4);
    let m = rng.gen_range(1..=n);
    let a = random_mat(rng, n, n, 0.8);
    let b = random_mat(rng, n, m, 1.0) + Mat::identity(n, m);
    let c = random_mat(rng, n, n, 0.3);
    let d = random_mat(rng, n, m, 0.3);
    let w = random_mat(rng, n, n, 0.5);
    let q = Mat::identity(n, n) + w.transpose() * w;
    let r = Mat::identity(m, m) * rng.gen_range(0.5..2.0);
    let rho = rng.gen_range(0.0..1.0);
    let params = GameParameters::new(a, b, c, d, q, r, rho, Vector::from_element(n, 1.0)).ok()?;
    is_rho_stabilizable(&params.system().ok()?, rho)
        .ok()
        .filter(|s| s.is_stabilizable())
        .map(|_| params)
}

#[test]
fn fifty_random_systems_reach_tight_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut solved = 0;
    while solved < 50 {
        let Some(params) = random_game(&mut rng) else { continue };
        let sol = solve_sare(&params, SareOptions::default()).unwrap();
        assert!(sol.residual <= 1e-9, "residual {}", sol.residual);
        assert!((sare_residual(&params, &sol.p).unwrap() - sol.residual).abs() < 1e-9);
        assert!(linalg::is_positive_definite(&sol.r_eff));
        let cl = params.system().unwrap().closed_loop(&(-&sol.gain)).unwrap();
        assert!(is_rho_stable(&cl, params.rho).unwrap().stable);
        solved += 1;
    }
}

#[test]
fn worked_example_quadratic_root() {
    let params = GameParameters::scalar(0.1, 1.0, 0.1, 1.0, 1.0, 1.0, 0.6, 1.0);
    let sol = solve_sare(&params, SareOptions::default()).unwrap();
    let root = (0.61 + (0.61f64 * 0.61 + 4.0 * 1.6).sqrt()) / 3.2;
    assert!((sol.p[(0, 0)] - root).abs() < 1e-10);
    assert!((root - 1.0038518).abs() < 1e-7);
    assert!(sol.residual <= 1e-10);
}

#[test]
fn worked_example_gain_riccati_and_hamiltonian() {
    let params = GameParameters::scalar(0.1, 1.0, 0.1, 1.0, 1.0, 1.0, 0.6, 1.0);
    let sol = solve_sare(&params, SareOptions::default()).unwrap();
    let h = hamiltonian_matrix(&sol.a_cl, &params.b, &sol.r_eff, &params.q, 0.6).unwrap();
    assert!(h.admissible);
    let k = solve_gain_riccati(&sol.a_cl, &params.b, &sol.r_eff, &params.q, 0.6).unwrap();
    assert!(gain_riccati_residual(&sol.a_cl, &params.b, &sol.r_eff, &params.q, 0.6, &k).unwrap() <= 1e-10);
}

fn similarity_case(seed: u64) -> Option<(GameParameters, Mat)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_game(&mut rng)?;
    let n = params.state_dim();
    let t = Mat::identity(n, n) + random_mat(&mut rng, n, n, 0.3);
    (linalg::min_singular_value(&linalg::to_complex(&t)) > 0.3).then_some((params, t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn integrator_closed_form_agrees(rho in 0.05f64..2.0, r in 0.05f64..3.0) {
        let (p, delta) = solve_scalar_integrator_p(rho, r).unwrap();
        prop_assert!(delta > 0.0 && p > 0.0 && p + r > 0.0);
        let sol = solve_sare(&GameParameters::integrator(rho, r, 1.0), SareOptions::default()).unwrap();
        prop_assert!((sol.p[(0, 0)] - p).abs() <= 1e-8);
        prop_assert!(scalar_integrator_residual(rho, r, p).abs() <= 1e-12);
    }

    #[test]
    fn negative_weights_above_the_threshold_stay_convex(rho in 0.1f64..2.0, frac in 0.02f64..0.98) {
        let r = convexity_threshold(rho) * (1.0 - frac);
        let (p, _) = solve_scalar_integrator_p(rho, r).unwrap();
        prop_assert!(p > 0.0 && p + r > 0.0);
    }

    #[test]
    fn scalar_solver_picks_the_maximal_root(
        a in -1.0f64..0.5, c in -0.5f64..0.5, d in -1.0f64..1.0, q in 0.1f64..2.0, r in 0.2f64..2.0, rho in 0.0f64..1.0
    ) {
        let params = GameParameters::scalar(a, 1.0, c, d, q, r, rho, 1.0);
        let sol = solve_sare(&params, SareOptions::default()).unwrap();
        let root = scalar_sare_max_root(&params).unwrap();
        prop_assert!((sol.p[(0, 0)] - root).abs() <= 1e-8 * root.abs().max(1.0));
    }

    #[test]
    fn similarity_transforms_congruently(seed in 0u64..10_000) {
        let Some((params, t)) = similarity_case(seed) else { return Ok(()) };
        let ti = linalg::inverse(&t, "T").unwrap();
        let moved = GameParameters::new(
            &ti * &params.a * &t,
            &ti * &params.b,
            &ti * &params.c * &t,
            &ti * &params.d,
            t.transpose() * &params.q * &t,
            params.r.clone(),
            params.rho,
            &ti * &params.x0_mean,
        ).unwrap();
        let base = solve_sare(&params, SareOptions::default()).unwrap();
        let other = solve_sare(&moved, SareOptions::default()).unwrap();
        let scale = base.p.amax().max(1.0);
        prop_assert!((t.transpose() * &base.p * &t - &other.p).amax() <= 1e-7 * scale);
        prop_assert!((&base.gain * &t - &other.gain).amax() <= 1e-7 * scale);
        let spec = |s: &SareSolution| {
            let mut e: Vec<f64> = linalg::eigenvalues(&mean_square_operator(&s.a_cl, &s.c_cl, 0.0))
                .iter().map(|z| z.re).collect();
            e.sort_by(f64::total_cmp);
            e
        };
        for (x, y) in spec(&base).iter().zip(spec(&other)) {
            prop_assert!((x - y).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn newton_residuals_decrease_after_the_first_step(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Some(params) = random_game(&mut rng) else { return Ok(()) };
        let sol = solve_sare(&params, SareOptions::default()).unwrap();
        let h = &sol.residual_history;
        for w in h.windows(2).skip(1) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-6) + 1e-12, "{h:?}");
        }
    }
}
