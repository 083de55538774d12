//! Gradient-based attacks through the QP solution map.
//!
//! The derivative of the optimal actions with respect to the observed series
//! comes from differentiating the KKT conditions on the active set. Attack
//! directions follow the chain rule `J · ∂h/∂u`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::attack::{AttackFlag, AttackResult};
use crate::error::{Error, Result};
use crate::lqr::{BatchForm, Timeseries};
use crate::qp::{solve_qp, ConstraintSet, QpSolution, QpStatus};

/// `∂u*/∂ŝ` laid out as `pT × mT`: entry `(i, j)` is `∂u*_j / ∂ŝ_i`.
#[derive(Debug, Clone)]
pub struct SolutionJacobian {
    pub jacobian: DMatrix<f64>,
    pub weak_active_flag: bool,
}

/// The adversary's objective over the controller's actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetFunction {
    /// `max_t u_t`
    MaxAction,
    /// `max_t (-u_t)`
    MinAction,
    /// `‖u‖₁`
    L1Energy,
    /// Control cost of `u` against the real series.
    CostChange,
}

impl TargetFunction {
    pub fn name(self) -> &'static str {
        match self {
            TargetFunction::MaxAction => "max-action",
            TargetFunction::MinAction => "min-action",
            TargetFunction::L1Energy => "l1",
            TargetFunction::CostChange => "cost",
        }
    }

    /// Target value at actions `u`.
    ///
    /// `CostChange` evaluates `uᵀKu + 2k(x0, s_real)ᵀu`, i.e. the control cost
    /// up to a constant; attacks report it as a difference from the
    /// unattacked actions.
    pub fn evaluate(self, u: &DVector<f64>, batch: &BatchForm, s_real: &Timeseries) -> Result<f64> {
        Ok(match self {
            TargetFunction::MaxAction => u.max(),
            TargetFunction::MinAction => -u.min(),
            TargetFunction::L1Energy => u.lp_norm(1),
            TargetFunction::CostChange => batch.quadratic_cost(u, s_real)?,
        })
    }
}

impl fmt::Display for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TargetFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-action" => Ok(TargetFunction::MaxAction),
            "min-action" => Ok(TargetFunction::MinAction),
            "l1" => Ok(TargetFunction::L1Energy),
            "cost" => Ok(TargetFunction::CostChange),
            other => Err(Error::Argument(format!(
                "unknown target '{other}' (expected max-action, min-action, l1 or cost)"
            ))),
        }
    }
}

/// Rows treated as equalities when differentiating: the working set plus any
/// weakly active rows that are linearly independent of it.
fn differentiation_rows(cons: &ConstraintSet, sol: &QpSolution) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut rows = Vec::new();
    let mut candidates = sol.working_set.clone();
    candidates.extend(sol.weakly_active.iter().filter(|i| !sol.working_set.contains(i)));
    for i in candidates {
        let row: DVector<f64> = cons.g().row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut resid = row.clone();
        for b in &basis {
            let proj = b.dot(&resid);
            resid -= b * proj;
        }
        let rn = resid.norm();
        if rn > 1e-9 * norm {
            basis.push(resid / rn);
            rows.push(i);
        }
    }
    rows
}

/// Implicit derivative of the QP solution map with respect to the observed series.
///
/// With active rows `A` held as equalities, differentiating
/// `2Ku + 2(k_const + Lŝ) + G_Aᵀμ_A = 0` and `G_A u = h0_A + H_A ŝ` gives
/// `du/dŝ = P + K⁻¹G_Aᵀ S⁻¹ (H_A - G_A P)` with `P = -K⁻¹L` and
/// `S = G_A K⁻¹ G_Aᵀ`.
pub fn solution_jacobian(
    batch: &BatchForm,
    cons: &ConstraintSet,
    sol: &QpSolution,
) -> Result<SolutionJacobian> {
    if sol.status != QpStatus::Optimal {
        return Err(Error::Contract(
            "cannot differentiate an infeasible solution".into(),
        ));
    }
    let p = -batch.solve_k_mat(batch.l());
    let rows = differentiation_rows(cons, sol);
    let du_ds = if rows.is_empty() {
        p
    } else {
        let mt = batch.actions_len();
        let g_a = DMatrix::from_fn(rows.len(), mt, |r, c| cons.g()[(rows[r], c)]);
        let h_a = DMatrix::from_fn(rows.len(), batch.series_len(), |r, c| {
            cons.h()[(rows[r], c)]
        });
        let z = batch.solve_k_mat(&g_a.transpose());
        let schur = &g_a * &z;
        let schur = (&schur + schur.transpose()) * 0.5;
        let chol = Cholesky::new(schur)
            .ok_or_else(|| Error::Numerical("active constraint rows are degenerate".into()))?;
        let correction = chol.solve(&(h_a - &g_a * &p));
        p + z * correction
    };
    Ok(SolutionJacobian {
        jacobian: du_ds.transpose(),
        weak_active_flag: sol.has_weak_activity(),
    })
}

/// Central-difference approximation of the solution Jacobian, one pair of QP
/// solves per series coordinate.
pub fn finite_difference_jacobian(
    batch: &BatchForm,
    cons: &ConstraintSet,
    s_obs: &Timeseries,
    step: f64,
) -> Result<SolutionJacobian> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let (pt, mt) = (batch.series_len(), batch.actions_len());
    if s_obs.len() != pt {
        return Err(Error::dim("series length", pt, s_obs.len()));
    }
    let solve_at = |i: usize, sign: f64| -> Result<QpSolution> {
        let mut shifted = s_obs.values().clone();
        shifted[i] += sign * step;
        let sol = solve_qp(batch, cons, &Timeseries::new(shifted)?)?;
        if !sol.is_optimal() {
            return Err(Error::Numerical(format!(
                "perturbed solve infeasible at series coordinate {i} ({}{step:e})",
                if sign > 0.0 { "+" } else { "-" }
            )));
        }
        Ok(sol)
    };
    let rows: Vec<(DVector<f64>, bool)> = (0..pt)
        .into_par_iter()
        .map(|i| {
            let plus = solve_at(i, 1.0)?;
            let minus = solve_at(i, -1.0)?;
            let weak = plus.has_weak_activity() || minus.has_weak_activity();
            Ok(((plus.u - minus.u) / (2.0 * step), weak))
        })
        .collect::<Result<_>>()?;
    let mut jacobian = DMatrix::zeros(pt, mt);
    let mut weak = false;
    for (i, (row, w)) in rows.into_iter().enumerate() {
        jacobian.row_mut(i).copy_from(&row.transpose());
        weak |= w;
    }
    Ok(SolutionJacobian {
        jacobian,
        weak_active_flag: weak,
    })
}

/// Gradient (or the chosen subgradient) of a target with respect to the actions.
///
/// Kinks resolve deterministically: `MaxAction`/`MinAction` pick the lowest
/// index among ties and `L1Energy` uses `sign(0) = 0`.
pub fn target_gradient(
    target: TargetFunction,
    u: &DVector<f64>,
    batch: &BatchForm,
    s_real: &Timeseries,
) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(u.len());
    match target {
        TargetFunction::MaxAction => {
            if let Some(i) = argmax(u) {
                g[i] = 1.0;
            }
        }
        TargetFunction::MinAction => {
            if let Some(i) = argmax(&-u) {
                g[i] = -1.0;
            }
        }
        TargetFunction::L1Energy => {
            for (gi, &ui) in g.iter_mut().zip(u.iter()) {
                *gi = if ui > 0.0 {
                    1.0
                } else if ui < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        TargetFunction::CostChange => {
            let k = batch.linear_term(s_real)?;
            g = (batch.k() * u + k) * 2.0;
        }
    }
    Ok(g)
}

fn argmax(v: &DVector<f64>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some(b) if x <= v[b] => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `v / ‖v‖₂`, or `None` when `‖v‖₂` is at or below `threshold`.
pub fn unit(v: &DVector<f64>, threshold: f64) -> Option<DVector<f64>> {
    let norm = v.norm();
    (norm > threshold).then(|| v / norm)
}

/// Settings for the iterated projected-ascent attack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationSettings {
    pub steps: usize,
    /// Ascent step length; `None` means `δ / 10`.
    pub step_size: Option<f64>,
}

impl Default for IterationSettings {
    fn default() -> Self {
        IterationSettings {
            steps: 20,
            step_size: None,
        }
    }
}

/// Ascent direction `J · ∂h/∂u` at the solution for `s_obs`, with the
/// threshold below which it counts as zero.
struct Ascent {
    direction: DVector<f64>,
    zero_threshold: f64,
    weak: bool,
}

fn ascent_direction(
    batch: &BatchForm,
    cons: &ConstraintSet,
    sol: &QpSolution,
    target: TargetFunction,
    s_real: &Timeseries,
) -> Result<Ascent> {
    let jac = solution_jacobian(batch, cons, sol)?;
    let g = target_gradient(target, &sol.u, batch, s_real)?;
    let direction = &jac.jacobian * &g;
    // Roundoff floor of the gradient: for the cost target it is dominated by the
    // cancellation in 2(Ku + k), whose terms can be far larger than their sum.
    let g_scale = match target {
        TargetFunction::CostChange => {
            let k = batch.linear_term(s_real)?;
            2.0 * (batch.k() * &sol.u).abs().max().max(k.amax())
        }
        _ => g.amax(),
    };
    let zero_threshold = 1e-12 * (1.0 + jac.jacobian.amax() * g_scale);
    Ok(Ascent {
        direction,
        zero_threshold,
        weak: jac.weak_active_flag,
    })
}

/// The controller's response to an attacked series, scored by the target.
struct Evaluation {
    attained: f64,
    infeasible: bool,
    weak: bool,
}

fn evaluate_series(
    batch: &BatchForm,
    cons: &ConstraintSet,
    s_hat: &Timeseries,
    s_real: &Timeseries,
    target: TargetFunction,
    baseline: f64,
) -> Result<(Evaluation, Option<QpSolution>)> {
    let sol = solve_qp(batch, cons, s_hat)?;
    if !sol.is_optimal() {
        return Ok((
            Evaluation {
                attained: f64::INFINITY,
                infeasible: true,
                weak: false,
            },
            None,
        ));
    }
    let value = target.evaluate(&sol.u, batch, s_real)? - baseline;
    Ok((
        Evaluation {
            attained: value,
            infeasible: false,
            weak: sol.has_weak_activity(),
        },
        Some(sol),
    ))
}

fn check_budget(delta: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Argument(format!(
            "perturbation bound must be non-negative and finite, got {delta}"
        )));
    }
    Ok(())
}

/// Solves the unattacked problem; the attacks require it to be feasible.
fn solve_original(batch: &BatchForm, cons: &ConstraintSet, s: &Timeseries) -> Result<QpSolution> {
    let sol = solve_qp(batch, cons, s)?;
    if !sol.is_optimal() {
        return Err(Error::Contract(
            "the controller's problem is infeasible on the unattacked series".into(),
        ));
    }
    Ok(sol)
}

/// Offset subtracted from raw target values so that `CostChange` reports the
/// change relative to the unattacked actions.
fn target_baseline(
    target: TargetFunction,
    batch: &BatchForm,
    original: &QpSolution,
    s: &Timeseries,
) -> Result<f64> {
    match target {
        TargetFunction::CostChange => target.evaluate(&original.u, batch, s),
        _ => Ok(0.0),
    }
}

fn result_from(s_hat: Timeseries, s: &Timeseries, delta: f64, eval: &Evaluation) -> Result<AttackResult> {
    let norm_used = s_hat.difference(s)?.norm();
    let mut flags = BTreeSet::new();
    if eval.infeasible {
        flags.insert(AttackFlag::Infeasible);
    }
    if eval.weak {
        flags.insert(AttackFlag::WeaklyActive);
    }
    Ok(AttackResult {
        s_hat,
        delta,
        attained: eval.attained,
        norm_used,
        flags,
    })
}

/// One linearized step: `ŝ = s + δ · Unit(J · ∂h/∂u)` evaluated at `ŝ = s`.
///
/// When the chain-rule direction vanishes the series comes back unchanged
/// with [`AttackFlag::ZeroGradient`]. An infeasible attacked problem is
/// reported with [`AttackFlag::Infeasible`] and `attained = +∞`.
pub fn single_step_attack(
    batch: &BatchForm,
    cons: &ConstraintSet,
    s: &Timeseries,
    delta: f64,
    target: TargetFunction,
) -> Result<AttackResult> {
    check_budget(delta)?;
    let original = solve_original(batch, cons, s)?;
    let baseline = target_baseline(target, batch, &original, s)?;
    let ascent = ascent_direction(batch, cons, &original, target, s)?;
    let unchanged = Evaluation {
        attained: target.evaluate(&original.u, batch, s)? - baseline,
        infeasible: false,
        weak: original.has_weak_activity() || ascent.weak,
    };
    let Some(dir) = unit(&ascent.direction, ascent.zero_threshold) else {
        let mut out = result_from(s.clone(), s, delta, &unchanged)?;
        out.flags.insert(AttackFlag::ZeroGradient);
        return Ok(out);
    };
    if delta == 0.0 {
        return result_from(s.clone(), s, delta, &unchanged);
    }
    let s_hat = Timeseries::new(s.values() + dir * delta)?;
    let (mut eval, _) = evaluate_series(batch, cons, &s_hat, s, target, baseline)?;
    eval.weak |= ascent.weak;
    result_from(s_hat, s, delta, &eval)
}

/// Projects `candidate` onto the L2 ball of radius `delta` around `center`.
fn project_to_ball(candidate: &DVector<f64>, center: &DVector<f64>, delta: f64) -> DVector<f64> {
    let offset = candidate - center;
    let norm = offset.norm();
    if norm <= delta {
        candidate.clone()
    } else {
        center + offset * (delta / norm)
    }
}

/// Projected gradient ascent on the target, re-linearizing at every iterate.
///
/// Candidates are the unattacked series, the single-step attack and every
/// iterate; the best by attained value is returned (earliest wins ties).
pub fn iterated_attack(
    batch: &BatchForm,
    cons: &ConstraintSet,
    s: &Timeseries,
    delta: f64,
    target: TargetFunction,
    settings: IterationSettings,
) -> Result<AttackResult> {
    check_budget(delta)?;
    if settings.steps == 0 {
        return Err(Error::Argument("iterated attack needs at least one step".into()));
    }
    let step_size = settings.step_size.unwrap_or(delta / 10.0);
    if !(step_size >= 0.0 && step_size.is_finite()) {
        return Err(Error::Argument(format!(
            "step size must be non-negative, got {step_size}"
        )));
    }

    let single = single_step_attack(batch, cons, s, delta, target)?;
    let mut best = single.clone();
    if single.has_flag(AttackFlag::ZeroGradient) || delta == 0.0 || single.attained.is_infinite() {
        return Ok(best);
    }

    let original = solve_original(batch, cons, s)?;
    let baseline = target_baseline(target, batch, &original, s)?;
    let mut weak_seen = single.has_flag(AttackFlag::WeaklyActive);
    let mut current = s.values().clone();
    let mut current_sol = original;
    for _ in 0..settings.steps {
        let ascent = ascent_direction(batch, cons, &current_sol, target, s)?;
        weak_seen |= ascent.weak;
        let Some(dir) = unit(&ascent.direction, ascent.zero_threshold) else {
            break;
        };
        let next = project_to_ball(&(&current + dir * step_size), s.values(), delta);
        let s_next = Timeseries::new(next.clone())?;
        let (eval, sol) = evaluate_series(batch, cons, &s_next, s, target, 0.0)?;
        let attained = if eval.infeasible {
            f64::INFINITY
        } else {
            eval.attained - baseline
        };
        weak_seen |= eval.weak;
        if attained > best.attained {
            best = result_from(
                s_next,
                s,
                delta,
                &Evaluation {
                    attained,
                    infeasible: eval.infeasible,
                    weak: false,
                },
            )?;
        }
        match sol {
            Some(sol) => {
                current = next;
                current_sol = sol;
            }
            None => break,
        }
    }
    if weak_seen {
        best.flags.insert(AttackFlag::WeaklyActive);
    }
    Ok(best)
}
