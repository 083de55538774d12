//! Closed-form worst-case cost attack and the control-agnostic random baseline.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lqr::{BatchForm, Timeseries};

const SYMMETRY_TOL: f64 = 1e-10;

/// Dominant eigenvalue and unit eigenvector of a symmetric PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub lambda1: f64,
    pub v1: DVector<f64>,
}

/// Diagnostics attached to an attack outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackFlag {
    /// The chain-rule direction vanished; the series was returned unchanged.
    ZeroGradient,
    /// The controller's problem became infeasible on the attacked series.
    Infeasible,
    /// A constraint was active with a (near) zero multiplier somewhere along the attack.
    WeaklyActive,
}

impl AttackFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackFlag::ZeroGradient => "zero-gradient",
            AttackFlag::Infeasible => "infeasible",
            AttackFlag::WeaklyActive => "weakly-active",
        }
    }
}

impl fmt::Display for AttackFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The adversary's output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub s_hat: Timeseries,
    /// L2 perturbation budget.
    pub delta: f64,
    /// Value of the attack's target at the attacked series.
    pub attained: f64,
    /// Actual `‖ŝ - s‖₂`.
    pub norm_used: f64,
    pub flags: BTreeSet<AttackFlag>,
}

impl AttackResult {
    pub fn has_flag(&self, flag: AttackFlag) -> bool {
        self.flags.contains(&flag)
    }

    /// Flags joined with `|`, empty when there are none.
    pub fn flags_label(&self) -> String {
        self.flags
            .iter()
            .map(|f| f.as_str())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Both optima of the closed-form cost attack.
#[derive(Debug, Clone)]
pub struct CostAttack {
    /// `s + δ v₁` with the canonicalized eigenvector.
    pub canonical: AttackResult,
    /// `s - δ v₁`.
    pub mirror: AttackResult,
    pub eigen: EigenPair,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Argument(format!(
            "perturbation bound must be positive and finite, got {delta}"
        )));
    }
    Ok(())
}

/// Largest eigenvalue of a symmetric PSD matrix and a unit eigenvector whose
/// first non-negligible component is positive.
///
/// Ties between equal eigenvalues resolve to the lowest index in the
/// eigensolver's output.
pub fn dominant_eigenpair(psi: &DMatrix<f64>) -> Result<EigenPair> {
    if !psi.is_square() || psi.nrows() == 0 {
        return Err(Error::Contract(format!(
            "expected a non-empty square matrix, got {}x{}",
            psi.nrows(),
            psi.ncols()
        )));
    }
    let scale = psi.amax().max(1.0);
    let asym = (psi - psi.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Contract(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(psi.clone());
    let mut best = 0;
    for (i, &value) in eig.eigenvalues.iter().enumerate() {
        if value > eig.eigenvalues[best] {
            best = i;
        }
    }
    let lambda1 = eig.eigenvalues[best].max(0.0);
    let mut v1: DVector<f64> = eig.eigenvectors.column(best).into_owned();
    v1 /= v1.norm();
    if let Some(first) = v1.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            v1.neg_mut();
        }
    }
    Ok(EigenPair { lambda1, v1 })
}

/// The worst-case series for the unconstrained controller: `s ± δ v₁`.
///
/// The direction depends only on `Ψ`, never on `s` or `x0`.
pub fn cost_attack(batch: &BatchForm, s: &Timeseries, delta: f64) -> Result<CostAttack> {
    check_delta(delta)?;
    if s.len() != batch.series_len() {
        return Err(Error::dim("series length", batch.series_len(), s.len()));
    }
    let eigen = dominant_eigenpair(batch.psi())?;
    let step = &eigen.v1 * delta;
    let make = |s_hat: DVector<f64>| -> Result<AttackResult> {
        let s_hat = Timeseries::new(s_hat)?;
        let attained = batch.cost_delta_quadratic(&s_hat, s)?;
        let norm_used = s_hat.difference(s)?.norm();
        Ok(AttackResult {
            s_hat,
            delta,
            attained,
            norm_used,
            flags: BTreeSet::new(),
        })
    };
    let canonical = make(s.values() + &step)?;
    let mirror = make(s.values() - &step)?;
    Ok(CostAttack {
        canonical,
        mirror,
        eigen,
    })
}

/// Unit vector uniformly distributed on the sphere in `dim` dimensions.
pub fn random_unit_vector(dim: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let w = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let norm: f64 = w.norm();
        if norm > 1e-300 {
            return w / norm;
        }
    }
}

/// Control-agnostic baseline: `s + δ w` for `w` uniform on the unit sphere.
///
/// The attained value is the agnostic objective `‖ŝ - s‖₂²`; use
/// [`BatchForm::cost_delta_quadratic`] for the effect on a specific controller.
pub fn random_sphere_attack(s: &Timeseries, delta: f64, seed: u64) -> Result<AttackResult> {
    check_delta(delta)?;
    if s.is_empty() {
        return Err(Error::Argument("cannot perturb an empty series".into()));
    }
    let w = random_unit_vector(s.len(), seed);
    let s_hat = Timeseries::new(s.values() + w * delta)?;
    let norm_used = s_hat.difference(s)?.norm();
    Ok(AttackResult {
        s_hat,
        delta,
        attained: norm_used * norm_used,
        norm_used,
        flags: BTreeSet::new(),
    })
}
