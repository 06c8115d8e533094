//! Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are dropped, tied magnitudes receive average ranks.
//! Up to [`EXACT_MAX_N`] pairs the null distribution of `W+` is built exactly
//! (a subset-sum count over doubled ranks, so half ranks stay integral);
//! beyond that a normal approximation with tie and continuity corrections
//! is used. The reported p-value is two-sided.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const EXACT_MAX_N: usize = 20;
pub const MIN_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Signed differences after dropping zeros, with doubled average ranks.
struct Ranked {
    doubled_ranks: Vec<u64>,
    positive: Vec<bool>,
    tie_sizes: Vec<usize>,
}

fn rank(a: &[f64], b: &[f64]) -> Result<Ranked> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite difference".into()));
    }
    if d.len() < MIN_N {
        return Err(Error::Stats(format!("need at least {MIN_N} nonzero differences, got {}", d.len())));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = d.len();
    let mut doubled_ranks = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && d[j].abs() == d[i].abs() {
            j += 1;
        }
        // ranks i+1..=j averaged, doubled: (i+1 + j)
        let r2 = (i + 1 + j) as u64;
        doubled_ranks[i..j].iter_mut().for_each(|r| *r = r2);
        if j - i > 1 {
            tie_sizes.push(j - i);
        }
        i = j;
    }
    let positive = d.iter().map(|v| *v > 0.0).collect();
    Ok(Ranked { doubled_ranks, positive, tie_sizes })
}

/// Number of sign assignments giving each doubled `W+` value.
fn null_counts(doubled_ranks: &[u64]) -> Vec<f64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

fn exact_p(r: &Ranked, w2_min: u64) -> f64 {
    let counts = null_counts(&r.doubled_ranks);
    let total: f64 = 2f64.powi(r.doubled_ranks.len() as i32);
    let tail: f64 = counts[..=w2_min as usize].iter().sum();
    (2.0 * tail / total).min(1.0)
}

fn normal_p(r: &Ranked, w_plus: f64) -> f64 {
    let n = r.doubled_ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie: f64 = r.tie_sizes.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie;
    let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Two-sided test with the method chosen by sample size.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_with(a, b, None)
}

/// As [`wilcoxon_signed_rank`] but forcing `method` when given. Exact
/// enumeration is refused above 60 pairs.
pub fn wilcoxon_with(a: &[f64], b: &[f64], method: Option<WilcoxonMethod>) -> Result<WilcoxonResult> {
    let r = rank(a, b)?;
    let n = r.doubled_ranks.len();
    let w2_plus: u64 = r.doubled_ranks.iter().zip(&r.positive).filter(|(_, p)| **p).map(|(r, _)| *r).sum();
    let w2_total: u64 = r.doubled_ranks.iter().sum();
    let w2_minus = w2_total - w2_plus;
    let w2_min = w2_plus.min(w2_minus);
    let method = method.unwrap_or(if n <= EXACT_MAX_N { WilcoxonMethod::Exact } else { WilcoxonMethod::NormalApproximation });
    let w_plus = w2_plus as f64 / 2.0;
    let p_value = match method {
        WilcoxonMethod::Exact => {
            if n > 60 {
                return Err(Error::Stats(format!("exact distribution requested for n={n} > 60")));
            }
            exact_p(&r, w2_min)
        }
        WilcoxonMethod::NormalApproximation => normal_p(&r, w_plus),
    };
    Ok(WilcoxonResult {
        n_effective: n,
        w_plus,
        w_minus: w2_minus as f64 / 2.0,
        statistic: w2_min as f64 / 2.0,
        p_value,
        method,
    })
}
