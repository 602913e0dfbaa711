//! Paired Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::StatsError;

/// Largest effective sample size evaluated with the exact distribution.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_N: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `a` tends to exceed `b`.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences `a - b`.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: Method,
}

/// Ranks of `|d|` with ties sharing their mean rank (1-based).
pub fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Exact null distribution of the positive-rank sum. Ranks are doubled so
/// tied half-integer ranks stay integral; entry `s` counts sign assignments
/// whose doubled sum is `s`.
fn exact_counts(ranks: &[f64]) -> Vec<f64> {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Exact p-value of a positive-rank sum `w` given the ranks.
pub fn exact_p_value(ranks: &[f64], w: f64, alt: Alternative) -> f64 {
    let counts = exact_counts(ranks);
    let total: f64 = counts.iter().sum();
    let w2 = (2.0 * w).round() as usize;
    let upper: f64 = counts[w2.min(counts.len())..].iter().sum::<f64>() / total;
    let lower: f64 = counts[..=w2.min(counts.len() - 1)].iter().sum::<f64>() / total;
    match alt {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    }
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn normal_p_value(ranks: &[f64], w: f64, alt: Alternative) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    let sd = var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let upper = 1.0 - std.cdf((w - mean - 0.5) / sd);
    let lower = std.cdf((w - mean + 0.5) / sd);
    match alt {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    }
}

/// Test whether paired samples differ; zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alt: Alternative) -> Result<WilcoxonResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(StatsError::AllZero);
    }
    if diffs.len() < MIN_N {
        return Err(StatsError::TooFew { need: MIN_N, got: diffs.len() });
    }
    let ranks = signed_ranks(&diffs);
    let w: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (p_value, method) = if diffs.len() <= EXACT_MAX_N {
        (exact_p_value(&ranks, w, alt), Method::Exact)
    } else {
        (normal_p_value(&ranks, w, alt), Method::Normal)
    };
    Ok(WilcoxonResult { statistic: w, p_value, n_effective: diffs.len(), method })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_positive_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 6], Alternative::TwoSided).unwrap();
        assert_eq!(r.statistic, 21.0);
        assert_eq!(r.p_value, 0.03125);
        assert_eq!(r.method, Method::Exact);
        let g = wilcoxon_signed_rank(&a, &[0.0; 6], Alternative::Greater).unwrap();
        assert_eq!(g.p_value, 1.0 / 64.0);
        let l = wilcoxon_signed_rank(&a, &[0.0; 6], Alternative::Less).unwrap();
        assert_eq!(l.p_value, 1.0);
    }

    #[test]
    fn errors() {
        assert_eq!(wilcoxon_signed_rank(&[1.0; 6], &[1.0; 6], Alternative::TwoSided), Err(StatsError::AllZero));
        assert_eq!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0], Alternative::TwoSided), Err(StatsError::LengthMismatch(1, 2)));
        assert_eq!(
            wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 0.0], &[0.0; 4], Alternative::TwoSided),
            Err(StatsError::TooFew { need: 5, got: 3 })
        );
    }

    #[test]
    fn tied_ranks_share_means() {
        assert_eq!(signed_ranks(&[1.0, -1.0, 3.0, 2.0, -2.0]), vec![1.5, 1.5, 5.0, 3.5, 3.5]);
    }
}
