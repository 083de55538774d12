//! Batch (non-recursive) finite-horizon LQR with an exogenous input series.
//!
//! The plant evolves as `x_{t+1} = A x_t + B u_t + C s_t`. Stacking the horizon
//! turns every state into an affine function of the stacked actions `u` and the
//! stacked series `s`, so the cost becomes the quadratic `uᵀKu + 2k(x0, s)ᵀu + c`.
//!
//! All stacked vectors are time-major: the `m` (or `p`) entries of step 0 come
//! first, then step 1, and so on.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// A real-valued series over the whole horizon, flattened time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeseries(DVector<f64>);

impl Timeseries {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "timeseries entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Timeseries(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(len: usize) -> Self {
        Timeseries(DVector::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    /// `self - other`, checking lengths.
    pub fn difference(&self, other: &Timeseries) -> Result<DVector<f64>> {
        if self.len() != other.len() {
            return Err(Error::dim("timeseries difference", self.len(), other.len()));
        }
        Ok(&self.0 - &other.0)
    }
}

/// The controller's world model.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    horizon: usize,
    x0: DVector<f64>,
}

fn check_spd(name: &str, mat: &DMatrix<f64>) -> Result<()> {
    let asym = (mat - mat.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::Config(format!(
            "{name} is not symmetric (max asymmetry {asym:e})"
        )));
    }
    if Cholesky::new(mat.clone()).is_none() {
        return Err(Error::Config(format!("{name} is not positive definite")));
    }
    Ok(())
}

impl SystemSpec {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        horizon: usize,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Config(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Config(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if c.nrows() != n || c.ncols() == 0 {
            return Err(Error::Config(format!(
                "C must be {n}xp with p >= 1, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        if q.shape() != (n, n) {
            return Err(Error::Config(format!(
                "Q must be {n}x{n}, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let m = b.ncols();
        if r.shape() != (m, m) {
            return Err(Error::Config(format!(
                "R must be {m}x{m}, got {}x{}",
                r.nrows(),
                r.ncols()
            )));
        }
        if x0.len() != n {
            return Err(Error::Config(format!(
                "x0 must have length {n}, got {}",
                x0.len()
            )));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon T must be at least 1".into()));
        }
        let all_finite = [&a, &b, &c, &q, &r]
            .iter()
            .all(|mat| mat.iter().all(|v| v.is_finite()))
            && x0.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Config("system matrices must be finite".into()));
        }
        check_spd("Q", &q)?;
        check_spd("R", &r)?;
        Ok(SystemSpec {
            a,
            b,
            c,
            q,
            r,
            horizon,
            x0,
        })
    }

    /// Scalar system `n = m = p = 1`.
    pub fn scalar(a: f64, b: f64, c: f64, q: f64, r: f64, horizon: usize, x0: f64) -> Result<Self> {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(
            one(a),
            one(b),
            one(c),
            one(q),
            one(r),
            horizon,
            DVector::from_element(1, x0),
        )
    }

    /// The scalar battery model used in the reference experiments:
    /// `A = C = Q = R = 1`, `B = -1`, `x0 = 1`.
    pub fn battery_scalar(horizon: usize) -> Result<Self> {
        Self::scalar(1.0, -1.0, 1.0, 1.0, 1.0, horizon, 1.0)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    /// Action dimension `m`.
    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }
    /// Series dimension `p`.
    pub fn series_dim(&self) -> usize {
        self.c.ncols()
    }

    /// Same system with a different initial state.
    pub fn with_x0(&self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.state_dim() {
            return Err(Error::dim("x0", self.state_dim(), x0.len()));
        }
        let mut out = self.clone();
        out.x0 = x0;
        Ok(out)
    }
}

/// The stacked maps `M_t` and `N_t` for `t = 0..T`, held as two tall matrices
/// whose `t`-th block row is `M_t` (resp. `N_t`).
#[derive(Debug, Clone)]
pub struct StackedDynamics {
    m_stack: DMatrix<f64>,
    n_stack: DMatrix<f64>,
    /// `A^{t+1} x0` for every step, stacked.
    free_response: DVector<f64>,
    state_dim: usize,
}

impl StackedDynamics {
    pub fn horizon(&self) -> usize {
        self.m_stack.nrows() / self.state_dim
    }

    /// `M_t = [AᵗB  Aᵗ⁻¹B … B  0 … 0]`, an `n × mT` matrix.
    pub fn m_block(&self, t: usize) -> DMatrix<f64> {
        self.m_stack
            .rows(t * self.state_dim, self.state_dim)
            .into_owned()
    }

    /// `N_t = [AᵗC  Aᵗ⁻¹C … C  0 … 0]`, an `n × pT` matrix.
    pub fn n_block(&self, t: usize) -> DMatrix<f64> {
        self.n_stack
            .rows(t * self.state_dim, self.state_dim)
            .into_owned()
    }

    pub fn m_stack(&self) -> &DMatrix<f64> {
        &self.m_stack
    }

    pub fn n_stack(&self) -> &DMatrix<f64> {
        &self.n_stack
    }

    pub fn free_response(&self) -> &DVector<f64> {
        &self.free_response
    }
}

/// Rewrites the recursion so that `x_{t+1} = A^{t+1} x0 + M_t u + N_t s`.
pub fn stack_dynamics(spec: &SystemSpec) -> StackedDynamics {
    let (n, m, p, horizon) = (
        spec.state_dim(),
        spec.action_dim(),
        spec.series_dim(),
        spec.horizon(),
    );
    // powers[k] = A^k
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for k in 1..=horizon {
        let next = &spec.a * &powers[k - 1];
        powers.push(next);
    }
    let ab: Vec<_> = powers[..horizon].iter().map(|pk| pk * &spec.b).collect();
    let ac: Vec<_> = powers[..horizon].iter().map(|pk| pk * &spec.c).collect();

    let mut m_stack = DMatrix::zeros(n * horizon, m * horizon);
    let mut n_stack = DMatrix::zeros(n * horizon, p * horizon);
    let mut free_response = DVector::zeros(n * horizon);
    for t in 0..horizon {
        for j in 0..=t {
            m_stack
                .view_mut((t * n, j * m), (n, m))
                .copy_from(&ab[t - j]);
            n_stack
                .view_mut((t * n, j * p), (n, p))
                .copy_from(&ac[t - j]);
        }
        free_response
            .rows_mut(t * n, n)
            .copy_from(&(&powers[t + 1] * &spec.x0));
    }
    StackedDynamics {
        m_stack,
        n_stack,
        free_response,
        state_dim: n,
    }
}

/// The quadratic cost form of a stacked system, plus the sensitivity matrices
/// of the optimal actions and cost with respect to the series.
///
/// Immutable once built.
#[derive(Debug, Clone)]
pub struct BatchForm {
    stacked: StackedDynamics,
    k: DMatrix<f64>,
    k_chol: Cholesky<f64, Dyn>,
    l: DMatrix<f64>,
    psi: DMatrix<f64>,
    k_const: DVector<f64>,
    action_dim: usize,
    series_dim: usize,
}

/// Builds `K`, `L`, `Ψ = LᵀK⁻¹L` and the x0-dependent part of `k`.
pub fn build_cost_form(spec: &SystemSpec, stacked: StackedDynamics) -> Result<BatchForm> {
    check_spd("Q", &spec.q)?;
    check_spd("R", &spec.r)?;
    let (n, m, horizon) = (spec.state_dim(), spec.action_dim(), spec.horizon());
    if stacked.m_stack.shape() != (n * horizon, m * horizon)
        || stacked.n_stack.shape() != (n * horizon, spec.series_dim() * horizon)
    {
        return Err(Error::Config(
            "stacked dynamics do not match the system dimensions".into(),
        ));
    }

    // Q applied block-wise to the stacked M.
    let mut qm = DMatrix::zeros(n * horizon, m * horizon);
    for t in 0..horizon {
        let block = &spec.q * stacked.m_stack.rows(t * n, n);
        qm.rows_mut(t * n, n).copy_from(&block);
    }

    let mut k = qm.tr_mul(&stacked.m_stack);
    for t in 0..horizon {
        let mut diag = k.view_mut((t * m, t * m), (m, m));
        diag += &spec.r;
    }
    // Enforce exact symmetry before factorization.
    let k = (&k + k.transpose()) * 0.5;
    let l = qm.tr_mul(&stacked.n_stack);
    let k_const = qm.tr_mul(&stacked.free_response);

    let k_chol = Cholesky::new(k.clone())
        .ok_or_else(|| Error::Numerical("K is not positive definite".into()))?;
    let k_inv_l = k_chol.solve(&l);
    let psi = l.tr_mul(&k_inv_l);
    let psi = (&psi + psi.transpose()) * 0.5;

    Ok(BatchForm {
        stacked,
        k,
        k_chol,
        l,
        psi,
        k_const,
        action_dim: m,
        series_dim: spec.series_dim(),
    })
}

impl BatchForm {
    /// Stacks the dynamics and builds the cost form in one go.
    pub fn new(spec: &SystemSpec) -> Result<Self> {
        build_cost_form(spec, stack_dynamics(spec))
    }

    pub fn horizon(&self) -> usize {
        self.stacked.horizon()
    }
    pub fn action_dim(&self) -> usize {
        self.action_dim
    }
    pub fn series_dim(&self) -> usize {
        self.series_dim
    }
    /// Length of the stacked action vector, `mT`.
    pub fn actions_len(&self) -> usize {
        self.action_dim * self.horizon()
    }
    /// Length of the stacked series vector, `pT`.
    pub fn series_len(&self) -> usize {
        self.series_dim * self.horizon()
    }

    pub fn stacked(&self) -> &StackedDynamics {
        &self.stacked
    }
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }
    /// Coefficient of `s` in `k(x0, s)`; identical to `L`.
    pub fn k_lin(&self) -> &DMatrix<f64> {
        &self.l
    }
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }
    pub fn k_const(&self) -> &DVector<f64> {
        &self.k_const
    }

    /// Solves `K x = rhs` through the stored Cholesky factor.
    pub fn solve_k(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.k_chol.solve(rhs)
    }

    pub fn solve_k_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.k_chol.solve(rhs)
    }

    fn check_series(&self, s: &Timeseries) -> Result<()> {
        if s.len() != self.series_len() {
            return Err(Error::dim("series length", self.series_len(), s.len()));
        }
        Ok(())
    }

    fn check_actions(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.actions_len() {
            return Err(Error::dim("action length", self.actions_len(), u.len()));
        }
        Ok(())
    }

    /// `k(x0, s) = k_const + L s`.
    pub fn linear_term(&self, s: &Timeseries) -> Result<DVector<f64>> {
        self.check_series(s)?;
        Ok(&self.k_const + &self.l * s.values())
    }

    /// Optimal unconstrained actions `u* = -K⁻¹ k(x0, s)` for an observed series.
    pub fn solve_unconstrained(&self, s: &Timeseries) -> Result<DVector<f64>> {
        let k = self.linear_term(s)?;
        Ok(-self.k_chol.solve(&k))
    }

    /// `û* - u* = -K⁻¹ L (ŝ - s)`.
    pub fn action_gap(&self, s_hat: &Timeseries, s: &Timeseries) -> Result<DVector<f64>> {
        self.check_series(s)?;
        let diff = s_hat.difference(s)?;
        Ok(-self.k_chol.solve(&(&self.l * diff)))
    }

    /// Cost increase `(ŝ - s)ᵀ Ψ (ŝ - s)` caused by acting on `ŝ` instead of `s`.
    pub fn cost_delta_quadratic(&self, s_hat: &Timeseries, s: &Timeseries) -> Result<f64> {
        self.check_series(s)?;
        let diff = s_hat.difference(s)?;
        Ok(diff.dot(&(&self.psi * &diff)))
    }

    /// `uᵀKu + 2k(x0, s)ᵀu`: the cost of `u` against `s` without the constant term.
    pub fn quadratic_cost(&self, u: &DVector<f64>, s: &Timeseries) -> Result<f64> {
        self.check_actions(u)?;
        let k = self.linear_term(s)?;
        Ok(u.dot(&(&self.k * u)) + 2.0 * k.dot(u))
    }
}

/// Simulates the plant from `x0` under actions `u` and the real series `s` and
/// returns `Σ_{t=0}^{T} x_tᵀQx_t + Σ_{t=0}^{T-1} u_tᵀRu_t`.
///
/// `s` is always the series the plant actually sees, whatever series the
/// controller used to compute `u`.
pub fn rollout_cost(spec: &SystemSpec, u: &DVector<f64>, s_real: &Timeseries) -> Result<f64> {
    let (m, p, horizon) = (spec.action_dim(), spec.series_dim(), spec.horizon());
    if u.len() != m * horizon {
        return Err(Error::dim("action length", m * horizon, u.len()));
    }
    if s_real.len() != p * horizon {
        return Err(Error::dim("series length", p * horizon, s_real.len()));
    }
    let s = s_real.values();
    let mut x = spec.x0.clone();
    let mut cost = x.dot(&(&spec.q * &x));
    for t in 0..horizon {
        let u_t = u.rows(t * m, m);
        let s_t = s.rows(t * p, p);
        cost += u_t.dot(&(&spec.r * u_t));
        x = &spec.a * &x + &spec.b * u_t + &spec.c * s_t;
        cost += x.dot(&(&spec.q * &x));
    }
    Ok(cost)
}
