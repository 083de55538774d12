//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::{Command, ExitCode};
use std::time::Instant;

use forecast_attack::attack::random_unit_vector;
use forecast_attack::harness::config::{DatasetConfig, ExperimentConfig, Scenario};
use forecast_attack::harness::experiment::{
    run_constraint_experiment, run_cost_experiment, Metric, ScenarioStats,
};
use forecast_attack::harness::selftest::{
    random_instance, random_series, random_system, InstanceKind, JACOBIAN_TOL,
};
use forecast_attack::harness::{jacobian_selftest, wilcoxon_signed_rank, Sidedness};
use forecast_attack::qp::{kkt_residuals, RowKind};
use forecast_attack::*;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// The randomized sweep shared by the first three criteria.
struct SweepCase {
    spec: SystemSpec,
    batch: BatchForm,
    s: Timeseries,
    delta: f64,
}

fn sweep() -> Vec<SweepCase> {
    (0..200u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + i);
            let spec = random_system(&mut rng, 3, 10);
            let batch = BatchForm::new(&spec).expect("valid system");
            let s = random_series(&mut rng, batch.series_len());
            let delta = rng.random_range(0.1..5.0);
            SweepCase { spec, batch, s, delta }
        })
        .collect()
}

fn closed_form_exactness(cases: &[SweepCase]) -> Outcome {
    let start = Instant::now();
    let (mut worst_value, mut worst_rollout) = (0.0f64, 0.0f64);
    for c in cases {
        let attack = cost_attack(&c.batch, &c.s, c.delta).unwrap();
        let base_u = c.batch.solve_unconstrained(&c.s).unwrap();
        let base = rollout_cost(&c.spec, &base_u, &c.s).unwrap();
        let expected = c.delta * c.delta * attack.eigen.lambda1;
        for res in [&attack.canonical, &attack.mirror] {
            worst_value = worst_value.max(rel_err(res.attained, expected));
            let u_hat = c.batch.solve_unconstrained(&res.s_hat).unwrap();
            let gap = rollout_cost(&c.spec, &u_hat, &c.s).unwrap() - base;
            worst_rollout = worst_rollout.max(rel_err(gap, res.attained));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_value <= 1e-8 && worst_rollout <= 1e-8 && secs < 10.0,
        format!(
            "200 specs: max rel err vs δ²λ₁ {worst_value:.2e}, vs rollout gap {worst_rollout:.2e} (tol 1e-8); {secs:.2} s (limit 10 s)"
        ),
    )
}

fn random_dominance(cases: &[SweepCase]) -> Outcome {
    let start = Instant::now();
    let mut violations = 0usize;
    let mut closest = f64::NEG_INFINITY;
    for (i, c) in cases.iter().enumerate() {
        let bound = cost_attack(&c.batch, &c.s, c.delta).unwrap().canonical.attained;
        for j in 0..1000u64 {
            let r = random_sphere_attack(&c.s, c.delta, (i as u64) << 32 | j).unwrap();
            let dj = c.batch.cost_delta_quadratic(&r.s_hat, &c.s).unwrap();
            closest = closest.max(dj - bound);
            if dj > bound + 1e-9 {
                violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs < 60.0,
        format!(
            "200 000 sphere draws: {violations} exceed δ²λ₁ + 1e-9 (largest excess {closest:.2e}); {secs:.2} s (limit 60 s)"
        ),
    )
}

fn action_gap_linearity(cases: &[SweepCase]) -> Outcome {
    let mut worst = 0.0f64;
    for (i, c) in cases.iter().enumerate() {
        let attack = cost_attack(&c.batch, &c.s, c.delta).unwrap();
        let u = c.batch.solve_unconstrained(&c.s).unwrap();
        let mut perturbed = vec![attack.canonical.s_hat, attack.mirror.s_hat];
        for j in 0..5u64 {
            let dir = random_unit_vector(c.s.len(), 7_000 + 10 * i as u64 + j);
            perturbed.push(Timeseries::new(c.s.values() + dir * c.delta).unwrap());
        }
        for s_hat in &perturbed {
            let direct = c.batch.solve_unconstrained(s_hat).unwrap() - &u;
            let formula = c.batch.action_gap(s_hat, &c.s).unwrap();
            worst = worst.max((direct - formula).amax());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("1400 perturbations: max |Δu - (-K⁻¹L(ŝ-s))| = {worst:.2e} (tol 1e-10)"),
    )
}

fn jacobian_oracle() -> Outcome {
    let report = jacobian_selftest(0, 50).unwrap();
    let mut unconstrained = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..50u64 {
        let inst = random_instance(20_000 + seed, InstanceKind::Unconstrained, 2, 8);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        let jac = solution_jacobian(&inst.batch, &inst.cons, &sol).unwrap();
        let closed = -inst.batch.solve_k_mat(inst.batch.l());
        unconstrained = unconstrained.max((&jac.jacobian - closed.transpose()).amax());
        checked += 1;
    }
    outcome(
        report.passed() && report.max_error <= JACOBIAN_TOL && unconstrained <= 1e-10,
        format!(
            "{} of 50 box instances compared ({} skipped as weakly active or near-degenerate), max |J - J_fd| {:.2e} (tol 1e-5); {checked} unconstrained vs (-K⁻¹L)ᵀ {unconstrained:.2e} (tol 1e-10)",
            report.compared.len(),
            report.skipped.len(),
            report.max_error
        ),
    )
}

/// Instances whose feasible set does not move with ŝ must return the series
/// unchanged. State boxes are reported separately: there the first-order
/// cost change through the solution map is `-H_Aᵀμ`, which is not zero.
fn zero_gradient_fixed_point() -> Outcome {
    let mut flagged = 0usize;
    let mut kkt_ok = true;
    for seed in 0..100u64 {
        let kind = if seed % 2 == 0 { InstanceKind::Unconstrained } else { InstanceKind::ActionBox };
        let inst = random_instance(30_000 + seed, kind, 3, 10);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        kkt_ok &= kkt_residuals(&inst.batch, &inst.cons, &inst.s, &sol).unwrap().within_bounds();
        let res =
            single_step_attack(&inst.batch, &inst.cons, &inst.s, 1.0, TargetFunction::CostChange).unwrap();
        if res.has_flag(AttackFlag::ZeroGradient) && res.s_hat == inst.s {
            flagged += 1;
        }
    }
    let (mut state_total, mut state_flagged) = (0usize, 0usize);
    for seed in 0..100u64 {
        let inst = random_instance(35_000 + seed, InstanceKind::ActionAndStateBox, 3, 10);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        if !sol.is_optimal() {
            continue;
        }
        state_total += 1;
        let res =
            single_step_attack(&inst.batch, &inst.cons, &inst.s, 1.0, TargetFunction::CostChange).unwrap();
        if res.has_flag(AttackFlag::ZeroGradient) {
            state_flagged += 1;
        }
    }
    outcome(
        flagged == 100 && kkt_ok,
        format!(
            "{flagged}/100 unconstrained and action-box instances return ŝ = s with the zero-gradient flag; \
             for information, {state_flagged}/{state_total} feasible state-box instances (ŝ-dependent constraints) do"
        ),
    )
}

fn cost_run() -> (ExperimentConfig, ScenarioStats) {
    let mut cfg = ExperimentConfig::arima_profile(2024);
    cfg.dataset = DatasetConfig::Arima { count: 100 };
    cfg.scenarios = vec![Scenario::CostAdv, Scenario::Random];
    let stats = run_cost_experiment(&cfg).unwrap();
    (cfg, stats)
}

fn quadratic_scaling(cfg: &ExperimentConfig, stats: &ScenarioStats) -> Outcome {
    let means: Vec<f64> = cfg
        .deltas
        .iter()
        .map(|&d| {
            stats
                .aggregate(Scenario::CostAdv, d, Metric::Cost)
                .and_then(|a| a.mean_pct_increase)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let mut worst = 0.0f64;
    for i in 0..means.len() {
        for j in 0..means.len() {
            let expected = (cfg.deltas[i] / cfg.deltas[j]).powi(2);
            worst = worst.max(rel_err(means[i] / means[j], expected));
        }
    }
    let shown: Vec<String> = cfg
        .deltas
        .iter()
        .zip(&means)
        .map(|(d, m)| format!("δ={d}: {m:.3}%"))
        .collect();
    outcome(
        worst <= 1e-6,
        format!(
            "scalar T=50, 100 ARIMA windows, mean cost increase {}; max rel err of ratios vs (δᵢ/δⱼ)² {worst:.2e} (tol 1e-6)",
            shown.join(", ")
        ),
    )
}

fn significance(cfg: &ExperimentConfig, stats: &ScenarioStats) -> Outcome {
    let mut pass = true;
    let mut shown = Vec::new();
    for &d in &cfg.deltas {
        let p = stats.p_value(Scenario::CostAdv, d, Metric::Cost);
        let (value, n) = p.map_or((None, 0), |p| (p.p_value, p.n));
        pass &= value.is_some_and(|v| v < 0.01) && n >= 30;
        shown.push(format!("δ={d}: p={:.1e} (n={n})", value.unwrap_or(f64::NAN)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0usize;
    let mut trials = 0usize;
    for n in 5..=12 {
        for _ in 0..60 {
            // small integers force ties and zero differences
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-4..=4) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2..=2) as f64).collect();
            let Ok(r) = wilcoxon_signed_rank(&a, &b, Sidedness::TwoSided) else {
                continue;
            };
            if r.degenerate {
                continue;
            }
            trials += 1;
            if r.p_value != common::enumerated_signed_rank_p(&a, &b) {
                mismatches += 1;
            }
        }
    }
    pass &= mismatches == 0 && trials > 0;
    outcome(
        pass,
        format!(
            "cost-adv vs random {}; exact vs enumeration {mismatches} mismatches in {trials} samples with n ≤ 12",
            shown.join(", ")
        ),
    )
}

fn constraint_distinctness() -> Outcome {
    let mut cfg = ExperimentConfig::arima_profile(2025);
    cfg.dataset = DatasetConfig::Arima { count: 100 };
    cfg.scenarios = vec![Scenario::CostAdv, Scenario::Random, Scenario::MaxAction, Scenario::L1];
    let stats = run_constraint_experiment(&cfg).unwrap();
    let mut pass = stats.skipped_windows.is_empty();
    let mut shown = Vec::new();
    for &d in &cfg.deltas {
        let random = stats.records_for(Scenario::Random, d);
        let max_action = stats.records_for(Scenario::MaxAction, d);
        let l1 = stats.records_for(Scenario::L1, d);
        let cost = stats.records_for(Scenario::CostAdv, d);
        let n = random.len() as f64;
        let frac = |hits: usize| hits as f64 / n;
        let max_hits = max_action
            .iter()
            .zip(&random)
            .filter(|(a, r)| a.max_u_adv > r.max_u_adv)
            .count();
        let l1_hits = l1.iter().zip(&random).filter(|(a, r)| a.l1_adv > r.l1_adv).count();
        let below_cost = max_action
            .iter()
            .zip(&l1)
            .zip(&cost)
            .filter(|((a, b), c)| a.j_adv < c.j_adv && b.j_adv < c.j_adv)
            .count();
        pass &= frac(max_hits) >= 0.8 && frac(l1_hits) >= 0.8 && frac(below_cost) >= 0.9;
        shown.push(format!(
            "δ={d}: max-action {:.0}%, l1 {:.0}%, below cost attack {:.0}%",
            100.0 * frac(max_hits),
            100.0 * frac(l1_hits),
            100.0 * frac(below_cost)
        ));
    }
    outcome(
        pass && !stats.records.is_empty(),
        format!("100 windows, auto box (thresholds 80/80/90%): {}", shown.join("; ")),
    )
}

fn stacked_action_bounds(inst: &forecast_attack::harness::selftest::RandomInstance) -> (DVector<f64>, DVector<f64>) {
    let mt = inst.batch.actions_len();
    let mut lower = DVector::from_element(mt, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(mt, f64::INFINITY);
    for (row, kind) in inst.cons.kinds().iter().enumerate() {
        match *kind {
            RowKind::ActionUpper { index } => upper[index] = inst.cons.h0()[row],
            RowKind::ActionLower { index } => lower[index] = -inst.cons.h0()[row],
            _ => {}
        }
    }
    (lower, upper)
}

fn qp_correctness() -> Outcome {
    let mut worst_ref = 0.0f64;
    let mut kkt_failures = 0usize;
    let mut solves = 0usize;
    for seed in 0..100u64 {
        let inst = random_instance(40_000 + seed, InstanceKind::ActionBox, 2, 6);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        solves += 1;
        if !kkt_residuals(&inst.batch, &inst.cons, &inst.s, &sol).unwrap().within_bounds() {
            kkt_failures += 1;
        }
        let (lo, hi) = stacked_action_bounds(&inst);
        let reference = common::projected_gradient_box(&inst.batch, &inst.s, &lo, &hi);
        worst_ref = worst_ref.max((&sol.u - reference).amax());
    }
    for seed in 0..100u64 {
        let inst = random_instance(50_000 + seed, InstanceKind::ActionAndStateBox, 3, 10);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s).unwrap();
        if sol.is_optimal() {
            solves += 1;
            if !kkt_residuals(&inst.batch, &inst.cons, &inst.s, &sol).unwrap().within_bounds() {
                kkt_failures += 1;
            }
        }
    }
    outcome(
        kkt_failures == 0 && worst_ref <= 1e-6,
        format!(
            "{solves} solves, {kkt_failures} outside KKT bounds; 100 action-box instances vs projected-gradient reference max |Δu| {worst_ref:.2e} (tol 1e-6)"
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "system": {"a": 1, "b": -1, "c": 1, "q": 1, "r": 1, "horizon": 50, "x0": 1},
        "deltas": [0.3, 1, 3],
        "scenarios": ["cost-adv", "random"],
        "dataset": {"kind": "arima", "count": 100},
        "seed": 99
    }"#;
    std::fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    let mut outputs = Vec::new();
    for (run, threads) in [("one", "1"), ("two", "4")] {
        let status = Command::new(env!("CARGO_BIN_EXE_forecast-attack"))
            .args(["experiment", "cost", "--config", "cfg.json", "--out-dir", run])
            .env("RAYON_NUM_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap()
            .status;
        if !status.success() {
            return outcome(false, format!("experiment cost exited with {status}"));
        }
        outputs.push(std::fs::read(dir.path().join(run).join("records.csv")).unwrap());
    }
    outcome(
        outputs[0] == outputs[1] && !outputs[0].is_empty(),
        format!(
            "two `experiment cost` runs (1 and 4 worker threads): records.csv {} ({} bytes)",
            if outputs[0] == outputs[1] { "byte-identical" } else { "differs" },
            outputs[0].len()
        ),
    )
}

fn main() -> ExitCode {
    let cases = sweep();
    let (cost_cfg, cost_stats) = cost_run();
    let criteria: Vec<Criterion> = vec![
        ("closed-form attack exactness", Box::new(|| closed_form_exactness(&cases))),
        ("attack dominance over random", Box::new(|| random_dominance(&cases))),
        ("linearity of the action gap", Box::new(|| action_gap_linearity(&cases))),
        ("solution Jacobian oracle", Box::new(jacobian_oracle)),
        ("zero-gradient fixed point", Box::new(zero_gradient_fixed_point)),
        ("quadratic scaling of cost increase", Box::new(|| quadratic_scaling(&cost_cfg, &cost_stats))),
        ("statistical significance", Box::new(|| significance(&cost_cfg, &cost_stats))),
        ("constraint-attack distinctness", Box::new(constraint_distinctness)),
        ("QP correctness", Box::new(qp_correctness)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!(
            "[{}] {:>2}. {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
