use nalgebra::DMatrix;
use optlab::archive::{load_params, save_params};
use optlab::bench::{performance_measure, profile_from_measures, relative_iterations};
use optlab::features::NUM_FEATURES;
use optlab::nnet::{init_params, ArchConfig, OptimizerParams};
use optlab::optimus::{optimus_step, InnerState, LearnedKind, PrecondState, StepConfig};
use optlab::rng;
use optlab::trajectory::{best_so_far, should_stop, StopConfig};
use optlab::{FunctionId, ObjectiveInstance};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn small_arch() -> ArchConfig {
    ArchConfig {
        num_features: NUM_FEATURES,
        mlp_layers: 3,
        mlp_hidden: 16,
        d_model: 16,
        heads: 2,
        ffn_width: 32,
        encoders: 2,
    }
}

/// Initialized weights plus Gaussian noise so every branch is active.
fn random_theta(seed: u64, noise: f64) -> OptimizerParams {
    let theta = init_params(seed, &small_arch(), StepConfig::default()).unwrap();
    let mut r = rng::stream(seed, &[99]);
    let values = theta
        .values()
        .iter()
        .map(|v| v + noise * r.sample::<f64, _>(StandardNormal))
        .collect();
    theta.with_values(values)
}

fn central_difference(inst: &ObjectiveInstance, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let fp = inst.evaluate(&probe).unwrap();
            probe[i] = x[i] - h;
            let fm = inst.evaluate(&probe).unwrap();
            probe[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn function() -> impl Strategy<Value = FunctionId> {
    (0..FunctionId::ALL.len()).prop_map(|i| FunctionId::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn analytic_gradient_matches_finite_differences(id in function(), dim in 2usize..8, seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let inst = ObjectiveInstance::with_random_offset(id, dim, &mut r).unwrap();
        let x = inst.sample_point(&mut r);
        let g = inst.gradient(&x).unwrap();
        let fd = central_difference(&inst, &x);
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
        prop_assert!(err / scale <= 1e-6, "{id} d={dim}: {}", err / scale);
    }

    #[test]
    fn preconditioner_stays_normalized_psd(n in 1usize..12, terms in 0usize..4, seed in any::<u64>()) {
        let mut r = rng::stream(seed, &[]);
        let mut b = PrecondState::identity(n);
        for _ in 0..5 {
            let u: Vec<Vec<f64>> = (0..terms)
                .map(|_| (0..n).map(|_| 10.0 * r.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            b.update(&u).unwrap();
            let a = b.audit();
            prop_assert!(a.max_asymmetry <= 1e-10);
            prop_assert!(a.min_eigenvalue >= -1e-8);
            prop_assert!((a.frobenius - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn optimus_step_is_permutation_equivariant(n in 2usize..9, seed in any::<u64>()) {
        let theta = random_theta(seed % 16, 0.05);
        let mut r = rng::stream(seed, &[1]);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let x0: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let px0: Vec<f64> = perm.iter().map(|&p| x0[p]).collect();
        let mut a = InnerState::new(LearnedKind::Optimus, &x0);
        let mut b = InnerState::new(LearnedKind::Optimus, &px0);
        for _ in 0..3 {
            let g: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let pg: Vec<f64> = perm.iter().map(|&p| g[p]).collect();
            let da = optimus_step(&theta, &mut a, &g).unwrap();
            let db = optimus_step(&theta, &mut b, &pg).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((db[i] - da[p]).abs() <= 1e-9 * da[p].abs().max(1.0));
            }
        }
    }

    #[test]
    fn performance_measure_is_a_fraction(f_star in -10.0f64..10.0, a in 0.0f64..1.0, b in 0.0f64..100.0) {
        let f_worst = f_star + b;
        let f_hat = f_star + a * b;
        let m = performance_measure(f_hat, f_star, f_worst).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn profiles_are_monotone_and_respect_dominance(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..8),
        shrink in 0.1f64..1.0,
    ) {
        // solver 2 is solver 0 made uniformly better
        let measures: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0], r[1], r[0] * shrink]).collect();
        let problems = (0..measures.len()).map(|p| format!("p{p}")).collect();
        let solvers = vec!["a".into(), "b".into(), "c".into()];
        let grid = optlab::bench::log_t_grid(1e3, 50);
        let prof = profile_from_measures(problems, solvers, &measures, &grid).unwrap();
        for rho in &prof.rho {
            prop_assert!(rho.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(rho.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for i in 0..grid.len() {
            prop_assert!(prof.rho[0][i] <= prof.rho[2][i]);
        }
        let strictly_best = prof
            .ratios
            .iter()
            .filter(|r| r.iter().filter(|v| **v == 1.0).count() == 1)
            .count();
        prop_assert!(strictly_best <= prof.problems.len());
    }

    #[test]
    fn relative_iterations_ignore_monotone_rescaling(
        a in prop::collection::vec(0.01f64..100.0, 5..40),
        b in prop::collection::vec(0.01f64..100.0, 5..40),
        budget in 0usize..40,
    ) {
        let (ca, cb) = (best_so_far(&a), best_so_far(&b));
        let plain = relative_iterations(&ca, &cb, budget).unwrap();
        let warp = |c: &[f64]| c.iter().map(|v| 3.0 * v.ln() + 7.0).collect::<Vec<_>>();
        let warped = relative_iterations(&warp(&ca), &warp(&cb), budget).unwrap();
        prop_assert_eq!(plain.i_base, warped.i_base);
        prop_assert_eq!(plain.i_opt, warped.i_opt);
        prop_assert_eq!(plain.ratio, warped.ratio);
    }

    #[test]
    fn stop_rule_waits_for_a_full_window(history in prop::collection::vec(-5.0f64..5.0, 0..5), cur in -5.0f64..5.0) {
        prop_assert!(!should_stop(&history, cur, &StopConfig::default()));
    }

    #[test]
    fn stop_rule_matches_its_definition(history in prop::collection::vec(-5.0f64..5.0, 5..20), cur in -5.0f64..5.0) {
        let cfg = StopConfig::default();
        let tail = &history[history.len() - 5..];
        let avg = tail.iter().sum::<f64>() / 5.0;
        prop_assert_eq!(should_stop(&history, cur, &cfg), cur > avg + 1e-8);
    }
}

#[test]
fn constant_history_never_stops() {
    let cfg = StopConfig::default();
    let history = vec![2.5; 50];
    assert!(!should_stop(&history, 2.5, &cfg));
    assert!(should_stop(&history, 2.5 + 2e-8, &cfg));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta");
    let theta = random_theta(3, 0.1);
    save_params(&path, &theta, 42).unwrap();
    let (back, header) = load_params(&path).unwrap();
    assert_eq!(header.seed, 42);
    assert_eq!(back.values().len(), theta.values().len());
    assert!(back
        .values()
        .iter()
        .zip(theta.values())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.layout().specs(), theta.layout().specs());
}

#[test]
fn precondition_is_rotation_covariant() {
    // B' from (Q u) equals Q B Q^T for an orthogonal Q
    let n = 4;
    let mut r = rng::stream(5, &[]);
    let q = DMatrix::<f64>::from_fn(n, n, |_, _| r.sample(StandardNormal))
        .qr()
        .q();
    let u: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let qu = (&q * nalgebra::DVector::from_vec(u.clone()))
        .as_slice()
        .to_vec();
    let mut b = PrecondState::identity(n);
    b.update(&[u]).unwrap();
    let mut bq = PrecondState::identity(n);
    bq.update(&[qu]).unwrap();
    let expected = &q * &b.b * q.transpose();
    assert!((expected - bq.b).abs().max() < 1e-12);
}
