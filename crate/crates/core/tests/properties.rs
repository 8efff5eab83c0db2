use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reps_core::map_solver::{map_gradient, solve_map_linear_exact, MapProblem};
use reps_core::measurements::{MeasurementModel, Observation};
use reps_core::priors::{standard_normal, GaussianPrior, GmmPrior, ScoreModel};
use reps_core::samplers::{cond_ode_step, restart, Conditioner, MapMethod, RepsConfig};
use reps_core::{Matrix, Vector};

fn random_gmm(seed: u64, d: usize, k: usize) -> GmmPrior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps = (0..k)
        .map(|_| {
            let l = Matrix::from_iterator(d, d, standard_normal(&mut rng, d * d).iter().copied()) * 0.5;
            let cov = &l * l.transpose() + Matrix::identity(d, d) * 0.1;
            GaussianPrior::new(standard_normal(&mut rng, d) * 2.0, cov).unwrap()
        })
        .collect();
    let total = (k * (k + 1) / 2) as f64;
    let weights = (1..=k).map(|i| i as f64 / total).collect();
    GmmPrior::new(weights, comps).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tweedie_holds_for_random_mixtures(seed in any::<u64>(), d in 1usize..5, k in 1usize..4, log_sigma in -2.0f64..2.0) {
        let prior = random_gmm(seed, d, k);
        let sigma = 10f64.powf(log_sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = prior.sample(&mut rng) + standard_normal(&mut rng, d) * sigma;
        let lhs = prior.denoise_at(&x, sigma);
        let rhs = &x + prior.score_at(&x, sigma) * (sigma * sigma);
        prop_assert!((lhs - rhs).norm() < 1e-9 * (1.0 + x.norm()));
    }

    #[test]
    fn mask_adjoint(seed in any::<u64>(), n in 1usize..20, keep_bits in any::<u32>()) {
        let keep: Vec<usize> = (0..n).filter(|i| keep_bits >> i & 1 == 1).collect();
        let model = MeasurementModel::mask(n, keep, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(&mut rng, n);
        let v = standard_normal(&mut rng, model.output_dim());
        let lhs = model.apply(&x).unwrap().dot(&v);
        let rhs = x.dot(&model.vjp(&x, &v).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn exact_map_is_stationary(seed in any::<u64>(), m in 1usize..6, n in 1usize..6, lambda in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_iterator(m, n, standard_normal(&mut rng, m * n).iter().copied());
        let model = MeasurementModel::dense(a, 0.05).unwrap();
        let obs = Observation::new(&model, standard_normal(&mut rng, m)).unwrap();
        let problem = MapProblem::new(&model, &obs, standard_normal(&mut rng, n), lambda).unwrap();
        let x = solve_map_linear_exact(&problem).unwrap();
        prop_assert!(map_gradient(&problem, &x).unwrap().amax() < 1e-9);
    }

    /// A conditioned step toward σ_to interpolates between the state and the MAP target.
    #[test]
    fn cond_step_interpolates(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let prior = random_gmm(seed, 2, 2);
        let model = MeasurementModel::identity(2, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = Observation::new(&model, standard_normal(&mut rng, 2)).unwrap();
        let cond = Conditioner::new(&model, &obs, 1.0, MapMethod::ExactLinear).unwrap();
        let x = standard_normal(&mut rng, 2) * 3.0;
        let step = cond_ode_step(&prior, &cond, &x, 3.0, 3.0 * frac).unwrap();
        let expect = &step.x0_map + (&x - &step.x0_map) * frac;
        prop_assert!((step.x - expect).amax() < 1e-12);
    }

    #[test]
    fn restart_with_zero_noise_is_identity(seed in any::<u64>(), d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(&mut rng, d);
        prop_assert_eq!(restart(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn budget_mapping_round_trips(steps in 1usize..50, legs in 1usize..60, include in any::<bool>()) {
        let cfg = RepsConfig { ode_steps_per_leg: steps, include_initial_leg_in_budget: include, ..RepsConfig::default() };
        let budget = steps * legs;
        let restarts = cfg.restarts_for_budget(budget).unwrap();
        let run = RepsConfig { n_restarts: restarts, ..cfg };
        let expected = if include { budget } else { budget + steps };
        prop_assert_eq!(run.nfe(), expected as u64);
        if steps > 1 {
            prop_assert!(cfg.restarts_for_budget(budget + 1).is_err());
        }
    }
}

#[test]
fn random_mixtures_are_normalized() {
    let prior = random_gmm(3, 2, 3);
    let sum: f64 = prior.weights().iter().sum();
    assert!((sum - 1.0).abs() < 1e-15);
    let _: Vector = prior.sample(&mut ChaCha8Rng::seed_from_u64(0));
}
