//! Attack success rate, deception rate, confidence intervals and the rank
//! statistic used by the overlap experiment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ASR and DR from clean and post-attack top-1 accuracy:
/// `asr = 1 - adv_top1`, `dr = (clean_top1 - adv_top1) / clean_top1`.
/// DR is the fraction of otherwise correctly identified clips the attack
/// flipped; it is undefined when clean accuracy is zero.
pub fn compute_metrics(clean_top1: f64, adv_top1: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&clean_top1) || !(0.0..=1.0).contains(&adv_top1) {
        return Err(Error::Parameter(format!(
            "accuracies must lie in [0, 1]: clean={clean_top1}, adv={adv_top1}"
        )));
    }
    if adv_top1 > clean_top1 {
        return Err(Error::Parameter(format!(
            "post-attack accuracy {adv_top1} exceeds clean accuracy {clean_top1}"
        )));
    }
    if clean_top1 == 0.0 {
        return Err(Error::DrUndefined);
    }
    let asr = 1.0 - adv_top1;
    let dr = (clean_top1 - adv_top1) / clean_top1;
    Ok((asr, dr))
}

/// Wilson 95% score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side has no variation.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average rank for the tie group [i, j].
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// One evaluated (attack, budget) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub attack: String,
    pub budget: u64,
    pub epsilon: f64,
    pub seed: u64,
    pub n_eval: usize,
    pub n_clean_errors: usize,
    pub clean_top1: f64,
    pub adv_top1: f64,
    pub asr: f64,
    pub dr: f64,
    pub asr_lo: f64,
    pub asr_hi: f64,
    pub dr_lo: f64,
    pub dr_hi: f64,
    /// Mean queries over successful attacks; absent when none succeeded.
    pub mean_queries_success: Option<f64>,
    /// Mean L1 norm of produced perturbations.
    pub mean_l1: f64,
    /// Mean L∞ norm of produced perturbations.
    pub mean_linf: f64,
    pub mean_basis_resets: f64,
    pub total_queries: u64,
    pub config_hash: String,
}

impl MetricsReport {
    /// `asr = 1 - clean_top1 * (1 - dr)` must hold for every emitted row.
    pub fn identity_residual(&self) -> f64 {
        (self.asr - (1.0 - self.clean_top1 * (1.0 - self.dr))).abs()
    }
}
