use hybrid_reduction::learner::{balance_scale, init_params, inner_violation_qp, DataPoint, ViolationHyper};
use hybrid_reduction::lcs::{lcs_step, mode_signature, LcsDims, LcsParams, ModeSignature, Trajectory};
use hybrid_reduction::mpc::{trust_region_from_inputs, TrustRegion};
use hybrid_reduction::reduction::RolloutBuffer;
use hybrid_reduction::rollout::{Policy, Rollout};
use hybrid_reduction::solvers::lcp::{solve_lcp, LcpProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vector(len: usize, s: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-s..s, len).prop_map(DVector::from_vec)
}

fn lcs_with_point() -> impl Strategy<Value = (LcsParams, DVector<f64>, DVector<f64>)> {
    (1usize..=4, 1usize..=3, 1usize..=4, any::<u64>()).prop_flat_map(|(n, m, r, seed)| {
        let theta = init_params(LcsDims::new(n, m, r), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (Just(theta), vector(n, 2.0), vector(m, 2.0))
    })
}

fn dummy_rollout(tag: f64) -> Rollout {
    let mut trajectory = Trajectory::new(DVector::from_element(1, tag));
    trajectory.push(DVector::from_element(1, tag), DVector::zeros(1), DVector::from_element(1, tag));
    Rollout {
        policy: Policy::Random,
        trajectory,
        plans: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn lcp_solutions_are_complementary(r in 1usize..=6, g_seed in any::<u64>(), q in vector(6, 3.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(g_seed);
        let g = DMatrix::from_fn(r, r, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let h = DMatrix::from_fn(r, r, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let m = &g * g.transpose() + &h - h.transpose() + DMatrix::identity(r, r) * 0.05;
        let p = LcpProblem::new(m, q.rows(0, r).into_owned()).unwrap();
        let lambda = solve_lcp(&p, 1e-10).unwrap();
        prop_assert!(p.residual(&lambda).max_violation() < 1e-8);
    }

    #[test]
    fn simulated_steps_satisfy_the_contact_conditions((theta, x, u) in lcs_with_point()) {
        let (next, lambda) = lcs_step(&theta, &x, &u).unwrap();
        let w = theta.lcp_offset(&x, &u) + theta.f() * &lambda;
        prop_assert!(lambda.iter().all(|v| *v >= -1e-10));
        prop_assert!(w.iter().all(|v| *v >= -1e-8));
        prop_assert!(lambda.dot(&w).abs() < 1e-8);
        let expect = theta.affine_next(&x, &u) + theta.c() * &lambda;
        prop_assert!((next - expect).amax() < 1e-12);
    }

    #[test]
    fn violation_loss_vanishes_on_model_data((theta, x, u) in lcs_with_point()) {
        let (next, _) = lcs_step(&theta, &x, &u).unwrap();
        let sol = inner_violation_qp(&theta, &DataPoint::new(x, u, next), &ViolationHyper::default()).unwrap();
        prop_assert!(sol.loss.abs() < 1e-7, "loss {}", sol.loss);
    }

    #[test]
    fn violation_loss_is_nonnegative((theta, x, u) in lcs_with_point(), shift in -3.0..3.0_f64) {
        let x_next = x.map(|v| v * 0.5 + shift);
        let sol = inner_violation_qp(&theta, &DataPoint::new(x, u, x_next), &ViolationHyper::default()).unwrap();
        prop_assert!(sol.loss >= -1e-9);
    }

    #[test]
    fn multiplier_rescaling_keeps_predictions((theta, x, u) in lcs_with_point()) {
        let balanced = balance_scale(&theta);
        let (a, _) = lcs_step(&theta, &x, &u).unwrap();
        let (b, _) = lcs_step(&balanced, &x, &u).unwrap();
        prop_assert!((a - b).amax() < 1e-8);
        let lhs = balanced.c().norm_squared() * balanced.gamma();
        let rhs = balanced.f().norm_squared();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
    }

    #[test]
    fn flat_parameters_round_trip((theta, _, _) in lcs_with_point()) {
        let back = LcsParams::from_flat(theta.dims(), &theta.to_flat()).unwrap();
        prop_assert_eq!(back, theta);
    }

    #[test]
    fn friction_matrix_is_positive_semidefinite((theta, _, _) in lcs_with_point()) {
        prop_assert!(theta.gamma() >= -1e-12);
    }

    #[test]
    fn projection_lands_in_the_box(center in vector(3, 5.0), width in prop::collection::vec(0.0..2.0_f64, 3), u in vector(3, 10.0)) {
        let tr = TrustRegion::new(center, DVector::from_vec(width)).unwrap();
        let p = tr.project(&u);
        prop_assert!(tr.contains(&p));
        prop_assert_eq!(tr.project(&p), p.clone());
        if tr.contains(&u) {
            prop_assert_eq!(p, u);
        }
    }

    #[test]
    fn wide_trust_region_covers_its_data(inputs in prop::collection::vec(vector(2, 4.0), 2..40)) {
        // No sample sits more than sqrt(count) population deviations from the mean.
        let eta = (inputs.len() as f64).sqrt() + 1e-9;
        let tr = trust_region_from_inputs(&inputs, eta).unwrap();
        let widened = TrustRegion::new(tr.center.clone(), tr.half_width.map(|d| d + 1e-12)).unwrap();
        prop_assert!(inputs.iter().all(|u| widened.contains(u)));
    }

    #[test]
    fn buffer_keeps_the_newest_episodes(capacity in 1usize..20, pushes in 0usize..60) {
        let mut buffer = RolloutBuffer::new(capacity);
        for i in 0..pushes {
            buffer.push(dummy_rollout(i as f64));
        }
        let kept = pushes.min(capacity);
        prop_assert_eq!(buffer.len(), kept);
        prop_assert_eq!(buffer.ids(), pushes - kept..pushes);
        let tags: Vec<f64> = buffer.iter().map(|r| r.x0()[0]).collect();
        let expect: Vec<f64> = (pushes - kept..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(tags, expect);
    }

    #[test]
    fn mode_signatures_round_trip_through_hex(lambda in vector(12, 1.0)) {
        let sig = mode_signature(&lambda, 0.0);
        prop_assert_eq!(ModeSignature::from_hex(&sig.to_hex()), Some(sig));
        for i in 0..12 {
            prop_assert_eq!(sig.is_active(i), lambda[i] > 0.0);
        }
    }
}

