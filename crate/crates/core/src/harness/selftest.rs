//! Randomized problem instances and the Jacobian oracle gate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::grad::{finite_difference_jacobian, solution_jacobian};
use crate::lqr::{BatchForm, SystemSpec, Timeseries};
use crate::qp::{activity_tol, compile_constraints, solve_qp, BoxBounds, ConstraintSet, QpSolution};

/// Largest tolerated max-abs gap between the implicit and finite-difference Jacobians.
pub const JACOBIAN_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

fn spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let x = normal_matrix(rng, dim, dim) * 0.5;
    x.tr_mul(&x) + DMatrix::identity(dim, dim) * 0.1
}

/// A random system with `n, m, p ≤ max_dim`, `T ≤ max_horizon` and a state
/// matrix scaled to spectral radius at most 0.95.
pub fn random_system(rng: &mut ChaCha8Rng, max_dim: usize, max_horizon: usize) -> SystemSpec {
    let n = rng.random_range(1..=max_dim);
    let m = rng.random_range(1..=max_dim);
    let p = rng.random_range(1..=max_dim);
    let horizon = rng.random_range(1..=max_horizon);
    let mut a = normal_matrix(rng, n, n) * 0.6;
    let rho = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if rho > 0.95 {
        a *= 0.95 / rho;
    }
    let b = normal_matrix(rng, n, m);
    let c = normal_matrix(rng, n, p);
    let q = spd(rng, n);
    let r = spd(rng, m);
    let x0 = normal_vector(rng, n);
    SystemSpec::new(a, b, c, q, r, horizon, x0).expect("random system is valid by construction")
}

pub fn random_series(rng: &mut ChaCha8Rng, len: usize) -> Timeseries {
    Timeseries::new(normal_vector(rng, len)).expect("finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceKind {
    Unconstrained,
    ActionBox,
    ActionAndStateBox,
}

/// A randomized constrained-controller instance.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub seed: u64,
    pub kind: InstanceKind,
    pub spec: SystemSpec,
    pub batch: BatchForm,
    pub cons: ConstraintSet,
    pub s: Timeseries,
}

/// Draws an instance whose box constraints cut into the unconstrained optimum.
pub fn random_instance(seed: u64, kind: InstanceKind, max_dim: usize, max_horizon: usize) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_system(&mut rng, max_dim, max_horizon);
    let batch = BatchForm::new(&spec).expect("valid system");
    let s = random_series(&mut rng, batch.series_len());
    let u_free = batch.solve_unconstrained(&s).expect("dimensions match");
    let scale = u_free.amax().max(1e-3);
    let action = match kind {
        InstanceKind::Unconstrained => None,
        _ => {
            let hi = scale * rng.random_range(0.3..0.9);
            let lo = -scale * rng.random_range(0.3..0.9);
            Some(BoxBounds::uniform(spec.action_dim(), lo, hi))
        }
    };
    let state = match kind {
        InstanceKind::ActionAndStateBox => {
            let stacked = batch.stacked();
            let x = stacked.free_response() + stacked.m_stack() * &u_free + stacked.n_stack() * s.values();
            let cap = x.amax().max(1e-3) * rng.random_range(0.6..0.95);
            Some(BoxBounds::uniform(spec.state_dim(), -cap, cap))
        }
        _ => None,
    };
    let cons = compile_constraints(&spec, &batch, action.as_ref(), state.as_ref())
        .expect("bounds are ordered");
    RandomInstance {
        seed,
        kind,
        spec,
        batch,
        cons,
        s,
    }
}

/// Whether a central difference with step [`FD_STEP`] stays on one active set:
/// no weakly active rows, inactive rows with slack and active rows with
/// clearly positive multipliers.
pub fn is_well_separated(cons: &ConstraintSet, s: &Timeseries, sol: &QpSolution) -> Result<bool> {
    if !sol.is_optimal() || sol.has_weak_activity() {
        return Ok(false);
    }
    if cons.is_empty() {
        return Ok(true);
    }
    let rhs = cons.rhs(s)?;
    let slack = &rhs - cons.g() * &sol.u;
    for i in 0..cons.len() {
        let active = slack[i].abs() <= activity_tol(rhs[i]);
        if active && sol.mu[i] < 1e-7 {
            return Ok(false);
        }
        if !active && slack[i] < 1e-5 {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceOutcome {
    pub seed: u64,
    pub kind: InstanceKind,
    pub max_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianSelftest {
    pub requested: usize,
    pub compared: Vec<InstanceOutcome>,
    /// Seeds skipped for weak activity, near-degenerate activity or infeasibility.
    pub skipped: Vec<u64>,
    pub max_error: f64,
    pub unconstrained_max_error: f64,
    pub failures: Vec<u64>,
}

impl JacobianSelftest {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the implicit Jacobian with central differences on `instances`
/// randomized box-constrained problems (`n, m, p ≤ 2`, `T ≤ 8`).
///
/// Instance `i` uses seed `seed + i`; every fifth instance is unconstrained
/// and every fifth carries a state box as well.
pub fn jacobian_selftest(seed: u64, instances: usize) -> Result<JacobianSelftest> {
    let mut report = JacobianSelftest {
        requested: instances,
        compared: Vec::new(),
        skipped: Vec::new(),
        max_error: 0.0,
        unconstrained_max_error: 0.0,
        failures: Vec::new(),
    };
    for i in 0..instances {
        let inst_seed = seed.wrapping_add(i as u64);
        let kind = match i % 5 {
            0 => InstanceKind::Unconstrained,
            4 => InstanceKind::ActionAndStateBox,
            _ => InstanceKind::ActionBox,
        };
        let inst = random_instance(inst_seed, kind, 2, 8);
        let sol = solve_qp(&inst.batch, &inst.cons, &inst.s)?;
        if !is_well_separated(&inst.cons, &inst.s, &sol)? {
            report.skipped.push(inst_seed);
            continue;
        }
        let analytic = solution_jacobian(&inst.batch, &inst.cons, &sol)?;
        let numeric = match finite_difference_jacobian(&inst.batch, &inst.cons, &inst.s, FD_STEP) {
            Ok(j) => j,
            Err(_) => {
                report.skipped.push(inst_seed);
                continue;
            }
        };
        let err = (&analytic.jacobian - &numeric.jacobian).amax();
        report.max_error = report.max_error.max(err);
        if kind == InstanceKind::Unconstrained {
            report.unconstrained_max_error = report.unconstrained_max_error.max(err);
        }
        if err > JACOBIAN_TOL {
            report.failures.push(inst_seed);
        }
        report.compared.push(InstanceOutcome {
            seed: inst_seed,
            kind,
            max_error: err,
        });
    }
    Ok(report)
}
