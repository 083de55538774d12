//! Paired Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    #[default]
    TwoSided,
    /// Alternative: `a` tends to exceed `b`.
    Greater,
    /// Alternative: `a` tends to fall below `b`.
    Less,
}

/// How the null distribution of `W+` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WilcoxonMethod {
    /// Exact for `n ≤ EXACT_MAX_N`, normal approximation above.
    #[default]
    Auto,
    /// Exact enumeration; limited to `n ≤ 62` so counts fit in `u64`.
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of the positive differences `a - b`.
    pub w_plus: f64,
    /// Non-zero differences that entered the test.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero.
    pub degenerate: bool,
}

/// Mid-ranks of `|d|`, 1-based.
fn mid_ranks(abs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Paired signed-rank test of `a` against `b`.
///
/// Zero differences are dropped and ties get mid-ranks. For `n ≤ 20` the null
/// distribution of `W+` is counted exactly over all `2ⁿ` sign patterns (on
/// doubled ranks so mid-ranks stay integral); above that a normal
/// approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], sidedness: Sidedness) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_using(a, b, sidedness, WilcoxonMethod::Auto)
}

/// [`wilcoxon_signed_rank`] with the null distribution chosen explicitly.
pub fn wilcoxon_signed_rank_using(
    a: &[f64],
    b: &[f64],
    sidedness: Sidedness,
    method: WilcoxonMethod,
) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Argument("paired samples must be finite".into()));
    }
    let nonzero: Vec<f64> = diffs.into_iter().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() && !a.is_empty() {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            w_plus: 0.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let n = nonzero.len();
    if n < 5 {
        return Err(Error::Argument(format!(
            "signed-rank test needs at least 5 non-zero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_MAX_N,
        WilcoxonMethod::Exact if n > 62 => {
            return Err(Error::Argument(format!(
                "exact signed-rank distribution supports at most 62 differences, got {n}"
            )))
        }
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    if exact {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        // counts[s] = number of sign patterns whose doubled positive rank sum is s
        let mut counts = vec![0u64; total + 1];
        counts[0] = 1;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let patterns = (1u64 << n) as f64;
        let observed = (2.0 * w_plus).round() as usize;
        let upper = counts[observed..].iter().sum::<u64>() as f64 / patterns;
        let lower = counts[..=observed].iter().sum::<u64>() as f64 / patterns;
        let p_value = match sidedness {
            Sidedness::Greater => upper,
            Sidedness::Less => lower,
            Sidedness::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        return Ok(WilcoxonResult {
            p_value,
            w_plus,
            n,
            exact: true,
            degenerate: false,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let upper_tail = |z: f64| std_normal.sf(z);
    let p_value = match sidedness {
        Sidedness::Greater => upper_tail((w_plus - mean - 0.5) / sd),
        Sidedness::Less => std_normal.cdf((w_plus - mean + 0.5) / sd),
        Sidedness::TwoSided => {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * upper_tail(z)).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        p_value,
        w_plus,
        n,
        exact: false,
        degenerate: false,
    })
}
