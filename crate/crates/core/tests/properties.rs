mod common;

use forecast_attack::attack::random_unit_vector;
use forecast_attack::data::sample_random_arima;
use forecast_attack::grad::unit;
use forecast_attack::harness::selftest::{random_instance, random_series, random_system, InstanceKind};
use forecast_attack::harness::{wilcoxon_signed_rank, wilcoxon_signed_rank_using, Sidedness, WilcoxonMethod};
use forecast_attack::qp::kkt_residuals;
use forecast_attack::*;
use nalgebra::{DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn system_and_series(seed: u64) -> (SystemSpec, BatchForm, Timeseries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_system(&mut rng, 3, 10);
    let batch = BatchForm::new(&spec).unwrap();
    let s = random_series(&mut rng, batch.series_len());
    (spec, batch, s)
}

fn shifted(s: &Timeseries, seed: u64, scale: f64) -> Timeseries {
    let dir = random_unit_vector(s.len(), seed);
    Timeseries::new(s.values() + dir * scale).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_cost_matches_rollout_up_to_a_constant(seed in any::<u64>(), w in any::<u64>()) {
        let (spec, batch, s) = system_and_series(seed);
        let u1 = random_unit_vector(batch.actions_len(), w) * 2.0;
        let u2 = random_unit_vector(batch.actions_len(), w ^ 1);
        let lhs = rollout_cost(&spec, &u1, &s).unwrap() - rollout_cost(&spec, &u2, &s).unwrap();
        let rhs = batch.quadratic_cost(&u1, &s).unwrap() - batch.quadratic_cost(&u2, &s).unwrap();
        prop_assert!(rel_close(lhs, rhs, 1e-9), "{lhs} vs {rhs}");
    }

    #[test]
    fn unconstrained_actions_minimize_rollout(seed in any::<u64>(), w in any::<u64>()) {
        let (spec, batch, s) = system_and_series(seed);
        let u = batch.solve_unconstrained(&s).unwrap();
        let best = rollout_cost(&spec, &u, &s).unwrap();
        let other = &u + random_unit_vector(u.len(), w) * 1e-3;
        prop_assert!(rollout_cost(&spec, &other, &s).unwrap() >= best - 1e-10 * (1.0 + best));
    }

    #[test]
    fn action_gap_is_linear(seed in any::<u64>(), w in any::<u64>(), scale in 0.01f64..5.0) {
        let (_, batch, s) = system_and_series(seed);
        let s_hat = shifted(&s, w, scale);
        let direct = batch.solve_unconstrained(&s_hat).unwrap() - batch.solve_unconstrained(&s).unwrap();
        let gap = batch.action_gap(&s_hat, &s).unwrap();
        prop_assert!((direct - gap).amax() <= 1e-10);
    }

    #[test]
    fn psi_is_symmetric_psd(seed in any::<u64>()) {
        let (_, batch, _) = system_and_series(seed);
        let psi = batch.psi();
        prop_assert_eq!(psi, &psi.transpose());
        let eig = SymmetricEigen::new(psi.clone());
        prop_assert!(eig.eigenvalues.min() >= -1e-10 * (1.0 + eig.eigenvalues.max()));
    }

    #[test]
    fn closed_form_attack_dominates_random(seed in any::<u64>(), w in any::<u64>(), delta in 0.01f64..10.0) {
        let (_, batch, s) = system_and_series(seed);
        let attack = cost_attack(&batch, &s, delta).unwrap();
        let random = random_sphere_attack(&s, delta, w).unwrap();
        let dj = batch.cost_delta_quadratic(&random.s_hat, &s).unwrap();
        prop_assert!(dj <= attack.canonical.attained + 1e-9 * (1.0 + attack.canonical.attained));
    }

    #[test]
    fn closed_form_attack_is_exact(seed in any::<u64>(), delta in 0.01f64..10.0) {
        let (spec, batch, s) = system_and_series(seed);
        let attack = cost_attack(&batch, &s, delta).unwrap();
        let u = batch.solve_unconstrained(&s).unwrap();
        let base = rollout_cost(&spec, &u, &s).unwrap();
        for res in [&attack.canonical, &attack.mirror] {
            prop_assert!(rel_close(res.attained, delta * delta * attack.eigen.lambda1, 1e-10));
            prop_assert!(rel_close(res.norm_used, delta, 1e-12));
            let u_hat = batch.solve_unconstrained(&res.s_hat).unwrap();
            let gap = rollout_cost(&spec, &u_hat, &s).unwrap() - base;
            prop_assert!(rel_close(gap, res.attained, 1e-8), "{gap} vs {}", res.attained);
        }
    }

    #[test]
    fn attack_direction_ignores_the_series(seed in any::<u64>(), w in any::<u64>()) {
        let (_, batch, s) = system_and_series(seed);
        let other = shifted(&s, w, 3.0);
        let a = cost_attack(&batch, &s, 1.0).unwrap();
        let b = cost_attack(&batch, &other, 1.0).unwrap();
        prop_assert_eq!(a.eigen.v1, b.eigen.v1);
        prop_assert!(rel_close(a.canonical.attained, b.canonical.attained, 1e-12));
    }

    #[test]
    fn attained_scales_quadratically(seed in any::<u64>(), delta in 0.01f64..10.0, factor in 0.1f64..10.0) {
        let (_, batch, s) = system_and_series(seed);
        let a = cost_attack(&batch, &s, delta).unwrap().canonical.attained;
        let b = cost_attack(&batch, &s, delta * factor).unwrap().canonical.attained;
        prop_assert!(rel_close(b, a * factor * factor, 1e-12));
    }

    #[test]
    fn constrained_solutions_satisfy_kkt(seed in any::<u64>(), with_state in any::<bool>()) {
        let kind = if with_state { InstanceKind::ActionAndStateBox } else { InstanceKind::ActionBox };
        let inst = random_instance(seed, kind, 3, 10);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        if sol.is_optimal() {
            let kkt = kkt_residuals(&inst.batch, &inst.cons, &inst.s, &sol).unwrap();
            prop_assert!(kkt.within_bounds(), "{kkt:?}");
        } else {
            prop_assert!(with_state, "an action box alone is always feasible");
        }
    }

    #[test]
    fn constrained_objective_never_beats_unconstrained(seed in any::<u64>()) {
        let inst = random_instance(seed, InstanceKind::ActionBox, 3, 10);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        let free = inst.batch.solve_unconstrained(&inst.s).unwrap();
        let jc = inst.batch.quadratic_cost(&sol.u, &inst.s).unwrap();
        let jf = inst.batch.quadratic_cost(&free, &inst.s).unwrap();
        prop_assert!(jc >= jf - 1e-10 * (1.0 + jf.abs()));
    }

    #[test]
    fn tightening_the_box_never_lowers_the_objective(seed in any::<u64>(), shrink in 0.1f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_system(&mut rng, 3, 6);
        let batch = BatchForm::new(&spec).unwrap();
        let s = random_series(&mut rng, batch.series_len());
        let bound = batch.solve_unconstrained(&s).unwrap().amax().max(1e-3);
        let m = spec.action_dim();
        let wide = compile_constraints(&spec, &batch, Some(&BoxBounds::uniform(m, -bound, bound)), None).unwrap();
        let tight_bound = bound * shrink;
        let tight = compile_constraints(&spec, &batch, Some(&BoxBounds::uniform(m, -tight_bound, tight_bound)), None).unwrap();
        let jw = batch.quadratic_cost(&solve_qp(&batch, &wide, &s).unwrap().u, &s).unwrap();
        let jt = batch.quadratic_cost(&solve_qp(&batch, &tight, &s).unwrap().u, &s).unwrap();
        prop_assert!(jt >= jw - 1e-10 * (1.0 + jw.abs()));
    }

    #[test]
    fn gradient_attacks_stay_in_the_ball(seed in any::<u64>(), delta in 0.01f64..3.0, which in 0usize..4) {
        let target = [
            TargetFunction::MaxAction,
            TargetFunction::MinAction,
            TargetFunction::L1Energy,
            TargetFunction::CostChange,
        ][which];
        let inst = random_instance(seed, InstanceKind::ActionBox, 2, 5);
        let settings = IterationSettings { steps: 4, step_size: None };
        let single = single_step_attack(&inst.batch, &inst.cons, &inst.s, delta, target).unwrap();
        let iterated = iterated_attack(&inst.batch, &inst.cons, &inst.s, delta, target, settings).unwrap();
        for res in [&single, &iterated] {
            let norm = res.s_hat.difference(&inst.s).unwrap().norm();
            prop_assert!(norm <= delta * (1.0 + 1e-9));
        }
        prop_assert!(iterated.attained >= single.attained - 1e-12);
    }

    #[test]
    fn unit_vectors_have_unit_norm(values in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
        let v = DVector::from_vec(values);
        match unit(&v, 1e-12) {
            Some(u) => prop_assert!((u.norm() - 1.0).abs() < 1e-12),
            None => prop_assert!(v.norm() <= 1e-12),
        }
    }

    #[test]
    fn arima_windows_are_reproducible_and_distinct(seed in any::<u64>()) {
        let a = sample_random_arima(seed, 12, 4).unwrap();
        let b = sample_random_arima(seed, 12, 4).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                prop_assert_ne!(&a[i].values, &a[j].values);
            }
        }
    }

    #[test]
    fn exact_wilcoxon_agrees_with_enumeration(values in proptest::collection::vec(-4i32..5, 5..13)) {
        let a: Vec<f64> = values.iter().map(|v| *v as f64).collect();
        let b = vec![0.0; a.len()];
        let nonzero = a.iter().filter(|v| **v != 0.0).count();
        prop_assume!(nonzero >= 5);
        let r = wilcoxon_signed_rank(&a, &b, Sidedness::TwoSided).unwrap();
        prop_assert_eq!(r.p_value, common::enumerated_signed_rank_p(&a, &b));
    }
}

#[test]
fn exact_and_normal_wilcoxon_agree_at_twenty() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let b = vec![0.0; 20];
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let shift = rng.random_range(-0.8..0.8);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        let exact = wilcoxon_signed_rank(&a, &b, Sidedness::TwoSided).unwrap();
        let approx = wilcoxon_signed_rank_using(&a, &b, Sidedness::TwoSided, WilcoxonMethod::Normal).unwrap();
        assert!(exact.exact && !approx.exact);
        worst = worst.max((exact.p_value - approx.p_value).abs());
    }
    assert!(worst <= 0.02, "worst gap {worst}");
}

#[test]
fn reference_solver_agrees_on_action_boxes() {
    for seed in 0..30u64 {
        let inst = random_instance(seed, InstanceKind::ActionBox, 2, 5);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        let action = inst.cons.kinds().len();
        assert!(action > 0);
        let m = inst.spec.action_dim();
        let h0 = inst.cons.h0();
        let bounds = BoxBounds::new(
            DVector::from_fn(m, |i, _| -h0[2 * i + 1]),
            DVector::from_fn(m, |i, _| h0[2 * i]),
        );
        let (lo, hi) = common::stacked_bounds(&bounds, inst.spec.horizon());
        let reference = common::projected_gradient_box(&inst.batch, &inst.s, &lo, &hi);
        assert!((&sol.u - &reference).amax() <= 1e-6, "seed {seed}");
    }
}
