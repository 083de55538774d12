//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use forecast_attack::{BatchForm, BoxBounds, Timeseries};
use nalgebra::{DVector, SymmetricEigen};

/// Minimizes `uᵀKu + 2kᵀu` over an action box by accelerated projected
/// gradient (FISTA with adaptive restart). Shares nothing with the active-set
/// solver beyond the problem data.
pub fn projected_gradient_box(
    batch: &BatchForm,
    s: &Timeseries,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> DVector<f64> {
    let k = batch.k();
    let lin = batch.linear_term(s).unwrap();
    let lipschitz = 2.0 * SymmetricEigen::new(k.clone()).eigenvalues.max();
    let step = 1.0 / lipschitz;
    let project = |v: DVector<f64>| v.zip_zip_map(lower, upper, |x, lo, hi| x.clamp(lo, hi));
    let objective = |u: &DVector<f64>| u.dot(&(k * u)) + 2.0 * lin.dot(u);

    let mut x = project(DVector::zeros(lin.len()));
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    for _ in 0..200_000 {
        let grad = (k * &y + &lin) * 2.0;
        let next = project(&y - grad * step);
        let moved = (&next - &x).amax();
        if objective(&next) > objective(&x) {
            // restart the momentum when the objective goes up
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        y = &next + (&next - &x) * ((momentum - 1.0) / next_momentum);
        x = next;
        momentum = next_momentum;
        if moved < 1e-15 * (1.0 + x.amax()) {
            break;
        }
    }
    x
}

pub fn stacked_bounds(bounds: &BoxBounds, horizon: usize) -> (DVector<f64>, DVector<f64>) {
    let m = bounds.lower.len();
    (
        DVector::from_fn(m * horizon, |i, _| bounds.lower[i % m]),
        DVector::from_fn(m * horizon, |i, _| bounds.upper[i % m]),
    )
}

/// Two-sided signed-rank p-value by listing every sign pattern.
pub fn enumerated_signed_rank_p(a: &[f64], b: &[f64]) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    // Mid-ranks by counting: rank = #smaller + (#equal + 1) / 2.
    let ranks: Vec<f64> = diffs
        .iter()
        .map(|d| {
            let smaller = diffs.iter().filter(|e| e.abs() < d.abs()).count() as f64;
            let equal = diffs.iter().filter(|e| e.abs() == d.abs()).count() as f64;
            smaller + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for pattern in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| pattern >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed {
            ge += 1;
        }
        if w <= observed {
            le += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * (ge.min(le) as f64) / total).min(1.0)
}
