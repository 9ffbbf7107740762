//! Wilcoxon signed-rank test for paired differences.
//!
//! Zero differences are dropped and tied magnitudes share their average rank.
//! With at most [`EXACT_LIMIT`] non-zero differences the two-sided p-value is
//! exact: the null distribution of the positive rank sum is counted over all
//! sign assignments. Larger samples use the normal approximation with tie and
//! continuity corrections.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

pub const EXACT_LIMIT: usize = 12;
pub const MIN_EFFECTIVE: usize = 5;
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
    Underpowered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// `min(W+, W−)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub significant_at_0_05: bool,
    pub method: PValueMethod,
}

/// Average ranks of `values`, doubled so ties stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j hold 1-based ranks i+1..=j+1; doubled average is i+j+2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p-value `P(min(W+, W−) <= observed)` under the sign-flip null.
fn exact_p(doubled: &[u64], observed_doubled: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let denom = 2f64.powi(doubled.len() as i32);
    let hits: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| (s as u64).min(total - s as u64) <= observed_doubled)
        .map(|(_, &c)| c)
        .sum();
    (hits / denom).min(1.0)
}

fn normal_p(n: usize, w_plus: f64, tie_groups: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie = tie_groups
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

fn tie_groups(abs: &[f64]) -> Vec<usize> {
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if j > i {
            groups.push(j - i + 1);
        }
        i = j + 1;
    }
    groups
}

pub fn wilcoxon_signed_rank(diffs: &[f64]) -> PairedTestResult {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let plus2: u64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let total2: u64 = ranks.iter().sum();
    let minus2 = total2 - plus2;
    let w_plus = plus2 as f64 / 2.0;
    let w_minus = minus2 as f64 / 2.0;
    let statistic = w_plus.min(w_minus);
    let (p_value, method) = if n < MIN_EFFECTIVE {
        (1.0, PValueMethod::Underpowered)
    } else if n <= EXACT_LIMIT {
        (exact_p(&ranks, plus2.min(minus2)), PValueMethod::Exact)
    } else {
        (normal_p(n, w_plus, &tie_groups(&abs)), PValueMethod::Normal)
    };
    PairedTestResult {
        statistic,
        w_plus,
        w_minus,
        n_effective: n,
        p_value,
        significant_at_0_05: method != PValueMethod::Underpowered && p_value < ALPHA,
        method,
    }
}

/// Normal-approximation p-value regardless of sample size; exposed for
/// comparing the two paths.
pub fn normal_approximation_p(diffs: &[f64]) -> f64 {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let plus2: u64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();
    normal_p(nonzero.len(), plus2 as f64 / 2.0, &tie_groups(&abs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_ranked_case() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, -1.0, 4.0]);
        assert_eq!(r.w_plus, 13.5);
        assert_eq!(r.w_minus, 1.5);
        assert_eq!(r.statistic, 1.5);
        assert_eq!(r.n_effective, 5);
        assert_eq!(r.method, PValueMethod::Exact);
    }

    #[test]
    fn all_positive_five() {
        let r = wilcoxon_signed_rank(&[0.5, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 2.0 / 32.0).abs() < 1e-15);
        assert!(!r.significant_at_0_05);
    }

    #[test]
    fn negation_is_symmetric() {
        let d = [0.3, -1.2, 2.5, 0.7, -0.1, 4.0, 1.1];
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        let a = wilcoxon_signed_rank(&d);
        let b = wilcoxon_signed_rank(&neg);
        assert_eq!(a.statistic, b.statistic);
        assert_eq!(a.p_value, b.p_value);
    }

    #[test]
    fn zeros_and_small_samples_are_underpowered() {
        let r = wilcoxon_signed_rank(&[0.0; 8]);
        assert_eq!(r.method, PValueMethod::Underpowered);
        assert_eq!(r.p_value, 1.0);
        let r = wilcoxon_signed_rank(&[1.0, 0.0, 2.0, 3.0, 0.0, 4.0]);
        assert_eq!(r.n_effective, 4);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant_at_0_05);
    }

    #[test]
    fn large_samples_use_normal_path() {
        let d: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&d);
        assert_eq!(r.method, PValueMethod::Normal);
        assert!(r.p_value < 1e-5);
        assert!(r.significant_at_0_05);
    }

    #[test]
    fn ties_share_average_ranks() {
        assert_eq!(doubled_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![5, 2, 5, 8]);
    }
}
