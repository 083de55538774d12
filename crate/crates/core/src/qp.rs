//! The constrained controller: a dense strictly convex QP
//!
//! ```text
//! minimize    uᵀKu + 2k(x0, ŝ)ᵀu
//! subject to  G u ≤ h0 + H ŝ
//! ```
//!
//! solved by a primal active-set method. Feasibility is settled first by an
//! elastic phase-1 problem so infeasible instances come back as a status rather
//! than a solver failure.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lqr::{BatchForm, SystemSpec, Timeseries};

/// Lower and upper bounds for a box constraint, either per step (length `m` or
/// `n`, repeated over the horizon) or for the whole stacked vector.
///
/// Non-finite bounds produce no constraint row.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Self {
        BoxBounds { lower, upper }
    }

    /// The same interval `[lower, upper]` for every component.
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Self {
        BoxBounds {
            lower: DVector::from_element(dim, lower),
            upper: DVector::from_element(dim, upper),
        }
    }

    /// Broadcasts to the stacked length `per_step * horizon`.
    fn expand(&self, what: &str, per_step: usize, horizon: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::Config(format!(
                "{what} bounds have different lengths ({} vs {})",
                self.lower.len(),
                self.upper.len()
            )));
        }
        let full = per_step * horizon;
        let expand = |v: &DVector<f64>| -> Vec<f64> {
            if v.len() == full {
                v.iter().copied().collect()
            } else {
                (0..full).map(|i| v[i % per_step]).collect()
            }
        };
        if self.lower.len() != per_step && self.lower.len() != full {
            return Err(Error::Config(format!(
                "{what} bounds must have length {per_step} or {full}, got {}",
                self.lower.len()
            )));
        }
        let (lo, hi) = (expand(&self.lower), expand(&self.upper));
        for (i, (l, u)) in lo.iter().zip(&hi).enumerate() {
            if l.is_nan() || u.is_nan() {
                return Err(Error::Config(format!("{what} bound {i} is NaN")));
            }
            if l > u {
                return Err(Error::Config(format!(
                    "{what} lower bound exceeds upper bound at component {i} ({l} > {u})"
                )));
            }
        }
        Ok((lo, hi))
    }
}

/// What a constraint row encodes; `index` is the position in the stacked vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    ActionUpper { index: usize },
    ActionLower { index: usize },
    StateUpper { index: usize },
    StateLower { index: usize },
}

/// Affine inequalities `G u ≤ h0 + H ŝ`.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    g: DMatrix<f64>,
    h0: DVector<f64>,
    h: DMatrix<f64>,
    kinds: Vec<RowKind>,
}

impl ConstraintSet {
    pub fn empty(actions_len: usize, series_len: usize) -> Self {
        ConstraintSet {
            g: DMatrix::zeros(0, actions_len),
            h0: DVector::zeros(0),
            h: DMatrix::zeros(0, series_len),
            kinds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.h0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h0.is_empty()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn h0(&self) -> &DVector<f64> {
        &self.h0
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn kinds(&self) -> &[RowKind] {
        &self.kinds
    }

    /// Right-hand side `h0 + H ŝ` for an observed series.
    pub fn rhs(&self, s_obs: &Timeseries) -> Result<DVector<f64>> {
        if s_obs.len() != self.h.ncols() {
            return Err(Error::dim("series length", self.h.ncols(), s_obs.len()));
        }
        Ok(&self.h0 + &self.h * s_obs.values())
    }
}

/// Compiles action and state boxes into affine rows.
///
/// Action rows have `H = 0`. State rows substitute the stacked dynamics, so
/// their right-hand side moves with the observed series.
pub fn compile_constraints(
    spec: &SystemSpec,
    batch: &BatchForm,
    action_box: Option<&BoxBounds>,
    state_box: Option<&BoxBounds>,
) -> Result<ConstraintSet> {
    let (n, m, horizon) = (spec.state_dim(), spec.action_dim(), spec.horizon());
    let (mt, pt) = (batch.actions_len(), batch.series_len());
    if mt != m * horizon || batch.horizon() != horizon {
        return Err(Error::Config(
            "batch form does not belong to this system".into(),
        ));
    }

    let mut g_rows: Vec<DVector<f64>> = Vec::new();
    let mut h_rows: Vec<DVector<f64>> = Vec::new();
    let mut h0 = Vec::new();
    let mut kinds = Vec::new();

    if let Some(bounds) = action_box {
        let (lo, hi) = bounds.expand("action", m, horizon)?;
        for i in 0..mt {
            if hi[i].is_finite() {
                let mut row = DVector::zeros(mt);
                row[i] = 1.0;
                g_rows.push(row);
                h_rows.push(DVector::zeros(pt));
                h0.push(hi[i]);
                kinds.push(RowKind::ActionUpper { index: i });
            }
            if lo[i].is_finite() {
                let mut row = DVector::zeros(mt);
                row[i] = -1.0;
                g_rows.push(row);
                h_rows.push(DVector::zeros(pt));
                h0.push(-lo[i]);
                kinds.push(RowKind::ActionLower { index: i });
            }
        }
    }

    if let Some(bounds) = state_box {
        let (lo, hi) = bounds.expand("state", n, horizon)?;
        let stacked = batch.stacked();
        let free = stacked.free_response();
        for i in 0..n * horizon {
            let m_row = stacked.m_stack().row(i).transpose();
            let n_row = stacked.n_stack().row(i).transpose();
            // x_i = free_i + M_i u + N_i ŝ
            if hi[i].is_finite() {
                g_rows.push(m_row.clone());
                h_rows.push(-&n_row);
                h0.push(hi[i] - free[i]);
                kinds.push(RowKind::StateUpper { index: i });
            }
            if lo[i].is_finite() {
                g_rows.push(-&m_row);
                h_rows.push(n_row.clone());
                h0.push(free[i] - lo[i]);
                kinds.push(RowKind::StateLower { index: i });
            }
        }
    }

    let q = h0.len();
    let g = DMatrix::from_fn(q, mt, |r, c| g_rows[r][c]);
    let h = DMatrix::from_fn(q, pt, |r, c| h_rows[r][c]);
    Ok(ConstraintSet {
        g,
        h0: DVector::from_vec(h0),
        h,
        kinds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// The constrained controller's output.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Multipliers of the inequality rows, non-negative.
    pub mu: DVector<f64>,
    /// Rows holding with equality at `u`.
    pub active: Vec<usize>,
    /// Active rows whose multiplier is below the weak-activity threshold.
    pub weakly_active: Vec<usize>,
    /// Linearly independent working set at termination.
    pub working_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    pub fn has_weak_activity(&self) -> bool {
        !self.weakly_active.is_empty()
    }
}

/// Multipliers below this are treated as zero when classifying active rows.
pub const WEAK_DUAL_TOL: f64 = 1e-9;

/// Activity tolerance for a row with right-hand side `rhs`.
pub fn activity_tol(rhs: f64) -> f64 {
    1e-9 * (1.0 + rhs.abs())
}

/// Dense inequality-constrained QP `min ½xᵀHx + cᵀx  s.t.  A x ≤ b`.
struct InequalityQp<'a, F> {
    /// Applies `H⁻¹` to the columns of a matrix.
    solve_h: F,
    h: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
}

struct ActiveSetOutcome {
    x: DVector<f64>,
    mu: DVector<f64>,
    working: Vec<usize>,
    iterations: usize,
}

impl<F> InequalityQp<'_, F>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    /// Primal active-set iterations from a feasible starting point.
    fn solve_from(&self, mut x: DVector<f64>) -> Result<ActiveSetOutcome> {
        let (q, dim) = (self.a.nrows(), self.a.ncols());
        // H⁻¹Aᵀ, one column per row of A.
        let z = (self.solve_h)(&self.a.transpose());
        let row_norms: Vec<f64> = (0..q).map(|i| self.a.row(i).norm()).collect();
        let mut working = initial_working_set(self.a, self.b, &x);
        let max_iter = 10 * (dim + q) + 100;

        for iter in 0..max_iter {
            let grad = self.h * &x + self.c;
            let y = (self.solve_h)(&DMatrix::from_column_slice(dim, 1, grad.as_slice()))
                .column(0)
                .into_owned();
            // Step to the minimizer on the working rows held as equalities;
            // the step also removes any residual violation of those rows.
            let mut schur_chol = None;
            let (p, lambda) = if working.is_empty() {
                (-&y, DVector::zeros(0))
            } else {
                let w = working.len();
                let a_w = DMatrix::from_fn(w, dim, |r, c| self.a[(working[r], c)]);
                let z_w = DMatrix::from_fn(dim, w, |r, c| z[(r, working[c])]);
                let residual = DVector::from_fn(w, |r, _| {
                    self.b[working[r]] - self.a.row(working[r]).dot(&x.transpose())
                });
                let schur = &a_w * &z_w;
                let schur = (&schur + schur.transpose()) * 0.5;
                let chol = Cholesky::new(schur).ok_or_else(|| {
                    Error::Numerical("active-set working matrix became singular".into())
                })?;
                let lambda = chol.solve(&(-(&a_w * &y) - residual));
                let p = -&y - &z_w * &lambda;
                schur_chol = Some((a_w, chol));
                (p, lambda)
            };

            // Roundoff in p grows with the size of the Newton step y.
            let x_scale = 1.0 + x.amax();
            if p.amax() <= 1e-12 * x_scale + 1e-14 * y.amax() {
                // Stationary on the working set; check multiplier signs.
                let lambda_scale = 1e-12 * (1.0 + grad.amax());
                let most_negative = lambda
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l < -lambda_scale)
                    .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
                    .map(|(i, _)| i);
                match most_negative {
                    Some(pos) => {
                        working.remove(pos);
                        continue;
                    }
                    None => {
                        let mut mu = DVector::zeros(q);
                        for (pos, &row) in working.iter().enumerate() {
                            mu[row] = lambda[pos].max(0.0);
                        }
                        return Ok(ActiveSetOutcome {
                            x,
                            mu,
                            working,
                            iterations: iter + 1,
                        });
                    }
                }
            }

            // Ratio test over rows outside the working set. A row that depends
            // linearly on the working set can only block through roundoff and
            // would make the working matrix singular, so it is passed over.
            let p_norm = p.norm();
            let mut skipped: Vec<usize> = Vec::new();
            let (alpha, blocking) = loop {
                let mut alpha = 1.0;
                let mut blocking = None;
                for (i, &norm) in row_norms.iter().enumerate() {
                    if working.contains(&i) || skipped.contains(&i) {
                        continue;
                    }
                    let ap = self.a.row(i).dot(&p.transpose());
                    if ap <= 1e-14 * norm * p_norm {
                        continue;
                    }
                    let slack = self.b[i] - self.a.row(i).dot(&x.transpose());
                    let ratio = (slack / ap).max(0.0);
                    if ratio < alpha {
                        alpha = ratio;
                        blocking = Some(i);
                    }
                }
                match (blocking, &schur_chol) {
                    (Some(i), Some((a_w, chol))) => {
                        // Residual of row i against the working rows in the H⁻¹ metric.
                        let z_i = z.column(i);
                        let v = a_w * z_i;
                        let own = self.a.row(i).dot(&z_i.transpose());
                        let resid = own - v.dot(&chol.solve(&v));
                        if resid <= 1e-10 * own.abs() {
                            skipped.push(i);
                            continue;
                        }
                        break (alpha, blocking);
                    }
                    _ => break (alpha, blocking),
                }
            };
            x += &p * alpha;
            if let Some(i) = blocking {
                working.push(i);
            }
        }
        Err(Error::Numerical(format!(
            "active-set method did not converge in {max_iter} iterations"
        )))
    }
}

/// Rows tight (or slightly violated) at `x`, keeping only a linearly
/// independent subset in index order.
fn initial_working_set(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut rows = Vec::new();
    for i in 0..a.nrows() {
        let slack = b[i] - a.row(i).dot(&x.transpose());
        if slack > activity_tol(b[i]) {
            continue;
        }
        let row: DVector<f64> = a.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut resid = row;
        for v in &basis {
            let proj = v.dot(&resid);
            resid -= v * proj;
        }
        let rn = resid.norm();
        if rn > 1e-9 * norm {
            basis.push(resid / rn);
            rows.push(i);
        }
    }
    rows
}

/// Phase 1: finds a point satisfying `A x ≤ b` near `start`, or reports the
/// smallest achievable uniform violation when there is none.
fn find_feasible_point(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    start: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let (q, dim) = a.shape();
    // Rows scaled to unit norm; all-zero rows are constant conditions.
    let mut rows = Vec::new();
    let mut worst_constant = 0.0f64;
    for i in 0..q {
        let norm = a.row(i).norm();
        if norm == 0.0 {
            worst_constant = worst_constant.max(-b[i]);
        } else {
            rows.push((i, norm));
        }
    }
    if worst_constant > activity_tol(0.0) {
        return Ok((start.clone(), worst_constant));
    }
    let r = rows.len();
    // Variables (x, t): minimize t + ε/2 (‖x - start‖² + t²)
    // subject to Â x - t ≤ b̂ and -t ≤ 0.
    let eps = 1e-8 / (1.0 + start.amax());
    let mut a_ext = DMatrix::zeros(r + 1, dim + 1);
    let mut b_ext = DVector::zeros(r + 1);
    for (k, &(i, norm)) in rows.iter().enumerate() {
        for j in 0..dim {
            a_ext[(k, j)] = a[(i, j)] / norm;
        }
        a_ext[(k, dim)] = -1.0;
        b_ext[k] = b[i] / norm;
    }
    a_ext[(r, dim)] = -1.0;
    let h = DMatrix::identity(dim + 1, dim + 1) * eps;
    let mut c = DVector::zeros(dim + 1);
    for j in 0..dim {
        c[j] = -eps * start[j];
    }
    c[dim] = 1.0;

    let violation = (0..r)
        .map(|k| a_ext.row(k).columns(0, dim).dot(&start.transpose()) - b_ext[k])
        .fold(0.0f64, f64::max);
    let mut z0 = DVector::zeros(dim + 1);
    z0.rows_mut(0, dim).copy_from(start);
    z0[dim] = violation;

    let qp = InequalityQp {
        solve_h: |m: &DMatrix<f64>| m / eps,
        h: &h,
        c: &c,
        a: &a_ext,
        b: &b_ext,
    };
    let out = qp.solve_from(z0)?;
    let x = out.x.rows(0, dim).into_owned();
    Ok((x, out.x[dim].max(0.0)))
}

/// Solves the constrained controller on an observed series.
///
/// Warm-starts from the unconstrained optimum; when that point is feasible it
/// is returned immediately.
pub fn solve_qp(batch: &BatchForm, cons: &ConstraintSet, s_obs: &Timeseries) -> Result<QpSolution> {
    let mt = batch.actions_len();
    if cons.g.ncols() != mt {
        return Err(Error::dim("constraint columns", mt, cons.g.ncols()));
    }
    let k_vec = batch.linear_term(s_obs)?;
    let u_free = -batch.solve_k(&k_vec);
    let q = cons.len();
    if q == 0 {
        return Ok(QpSolution {
            u: u_free,
            mu: DVector::zeros(0),
            active: Vec::new(),
            weakly_active: Vec::new(),
            working_set: Vec::new(),
            status: QpStatus::Optimal,
            iterations: 0,
        });
    }
    let rhs = cons.rhs(s_obs)?;
    let feas_tol = |i: usize| activity_tol(rhs[i]);
    let free_is_feasible = (0..q).all(|i| cons.g.row(i).dot(&u_free.transpose()) <= rhs[i] + feas_tol(i));

    let start = if free_is_feasible {
        u_free
    } else {
        let (x, violation) = find_feasible_point(&cons.g, &rhs, &u_free)?;
        if violation > 1e-9 * (1.0 + rhs.amax()) {
            return Ok(QpSolution {
                u: x,
                mu: DVector::zeros(q),
                active: Vec::new(),
                weakly_active: Vec::new(),
                working_set: Vec::new(),
                status: QpStatus::Infeasible,
                iterations: 0,
            });
        }
        x
    };

    let h = batch.k() * 2.0;
    let c = &k_vec * 2.0;
    let qp = InequalityQp {
        solve_h: |m: &DMatrix<f64>| batch.solve_k_mat(m) * 0.5,
        h: &h,
        c: &c,
        a: &cons.g,
        b: &rhs,
    };
    let out = qp.solve_from(start)?;

    let mut active = Vec::new();
    let mut weakly_active = Vec::new();
    for i in 0..q {
        let gap = (cons.g.row(i).dot(&out.x.transpose()) - rhs[i]).abs();
        if gap <= activity_tol(rhs[i]) {
            active.push(i);
            if out.mu[i] < WEAK_DUAL_TOL {
                weakly_active.push(i);
            }
        }
    }
    let mut working_set = out.working;
    working_set.sort_unstable();
    Ok(QpSolution {
        u: out.x,
        mu: out.mu,
        active,
        weakly_active,
        working_set,
        status: QpStatus::Optimal,
        iterations: out.iterations,
    })
}

/// KKT residuals of a solution, with the scale they are measured against.
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    /// `‖2Ku + 2k + Gᵀμ‖∞`
    pub stationarity: f64,
    /// `max(G u - rhs)`, positive when a row is violated.
    pub primal_violation: f64,
    /// `max |μ_i (G_i u - rhs_i)|`
    pub complementarity: f64,
    pub min_dual: f64,
    pub scale: f64,
}

impl KktResiduals {
    /// The residual bounds every optimal solve must satisfy.
    pub fn within_bounds(&self) -> bool {
        self.stationarity <= 1e-8 * self.scale
            && self.primal_violation <= 1e-9 * self.scale
            && self.complementarity <= 1e-8 * self.scale
            && self.min_dual >= -1e-12
    }
}

pub fn kkt_residuals(
    batch: &BatchForm,
    cons: &ConstraintSet,
    s_obs: &Timeseries,
    sol: &QpSolution,
) -> Result<KktResiduals> {
    let k_vec = batch.linear_term(s_obs)?;
    let ku = batch.k() * &sol.u * 2.0;
    let mut stat = &ku + &k_vec * 2.0;
    let mut scale = 1.0 + ku.amax().max(2.0 * k_vec.amax());
    let (mut primal, mut comp, mut min_dual) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    if !cons.is_empty() {
        let rhs = cons.rhs(s_obs)?;
        stat += cons.g.tr_mul(&sol.mu);
        let slack = &cons.g * &sol.u - &rhs;
        primal = slack.max();
        comp = slack.component_mul(&sol.mu).amax();
        min_dual = sol.mu.min();
        scale = scale.max(1.0 + rhs.amax()).max(1.0 + sol.mu.amax());
    }
    Ok(KktResiduals {
        stationarity: stat.amax(),
        primal_violation: primal.max(0.0),
        complementarity: comp,
        min_dual,
        scale,
    })
}

/// Objective `uᵀKu + 2k(x0, ŝ)ᵀu` of the controller's problem.
pub fn qp_objective(batch: &BatchForm, s_obs: &Timeseries, u: &DVector<f64>) -> Result<f64> {
    batch.quadratic_cost(u, s_obs)
}
