//! Differentiable ranking.
//!
//! The soft rank of `s` is the Euclidean projection of `s / tau` onto the
//! permutahedron of `(1, ..., m)`. Sorting `z = s / tau` in decreasing order
//! turns the projection into an isotonic regression:
//!
//! ```text
//! v = argmin_{v_1 >= ... >= v_m} |v - (z_sorted - (m, m-1, ..., 1))|^2
//! r = z - v   (mapped back through the sort permutation)
//! ```
//!
//! Ranks are ascending: the largest score gets the largest rank, and as
//! `tau -> 0` the soft ranks approach the hard ranks `1..m`.

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftRankConfig {
    pub tau: f64,
    pub variance_epsilon: f64,
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            variance_epsilon: 1e-8,
        }
    }
}

/// Non-increasing isotonic fit, stored as contiguous blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotonicFit {
    pub fitted: Vec<f64>,
    /// `(start, len)` of each pooled block, in order.
    pub blocks: Vec<(usize, usize)>,
}

/// Least-squares projection of `y` onto `{v : v_1 >= v_2 >= ... >= v_m}`
/// by pooling adjacent violators.
pub fn pav_isotonic(y: &[f64]) -> Vec<f64> {
    pav_blocks(y).fitted
}

pub fn pav_blocks(y: &[f64]) -> IsotonicFit {
    // (sum, len, start)
    let mut stack: Vec<(f64, usize, usize)> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        let mut cur = (v, 1usize, i);
        while let Some(&(s, n, start)) = stack.last() {
            // violation when the earlier block's mean is below the new one
            if s / n as f64 <= cur.0 / cur.1 as f64 {
                stack.pop();
                cur = (s + cur.0, n + cur.1, start);
            } else {
                break;
            }
        }
        stack.push(cur);
    }
    let mut fitted = vec![0.0; y.len()];
    let mut blocks = Vec::with_capacity(stack.len());
    for (s, n, start) in stack {
        let mean = s / n as f64;
        fitted[start..start + n].fill(mean);
        blocks.push((start, n));
    }
    IsotonicFit { fitted, blocks }
}

/// Soft ranks together with what is needed to apply their Jacobian.
#[derive(Debug, Clone)]
pub struct SoftRank {
    pub ranks: Vec<f64>,
    tau: f64,
    /// `order[k]` is the index of the k-th largest score.
    order: Vec<usize>,
    /// `position[i]` is where index `i` sits in `order`.
    position: Vec<usize>,
    /// block id of each sorted position
    block_of: Vec<usize>,
    blocks: Vec<(usize, usize)>,
}

pub fn soft_rank(s: &[f64], tau: f64) -> SoftRank {
    let m = s.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut position = vec![0; m];
    for (k, &i) in order.iter().enumerate() {
        position[i] = k;
    }
    let target: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(k, &i)| s[i] / tau - (m - k) as f64)
        .collect();
    let fit = pav_blocks(&target);
    let mut block_of = vec![0; m];
    for (b, &(start, len)) in fit.blocks.iter().enumerate() {
        block_of[start..start + len].fill(b);
    }
    let ranks = (0..m).map(|i| s[i] / tau - fit.fitted[position[i]]).collect();
    SoftRank {
        ranks,
        tau,
        order,
        position,
        block_of,
        blocks: fit.blocks,
    }
}

impl SoftRank {
    /// `J^T c` for the Jacobian `J = d ranks / d s`. The Jacobian is
    /// `(I - P^T B P) / tau` with `B` the block-averaging matrix, which is
    /// symmetric, so this is also the forward product.
    pub fn jacobian_apply(&self, cotangent: &[f64]) -> Vec<f64> {
        let sorted: Vec<f64> = self.order.iter().map(|&i| cotangent[i]).collect();
        let block_means: Vec<f64> = self
            .blocks
            .iter()
            .map(|&(start, len)| sorted[start..start + len].iter().sum::<f64>() / len as f64)
            .collect();
        cotangent
            .iter()
            .enumerate()
            .map(|(i, &c)| (c - block_means[self.block_of[self.position[i]]]) / self.tau)
            .collect()
    }
}

/// Ascending ranks starting at 1; ties share the mean of their positions.
pub fn hard_rank(y: &[f64]) -> Vec<f64> {
    let m = y.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut ranks = vec![0.0; m];
    let mut k = 0;
    while k < m {
        let mut end = k + 1;
        while end < m && y[order[end]] == y[order[k]] {
            end += 1;
        }
        // positions k+1 ..= end share their mean
        let avg = (k + 1 + end) as f64 / 2.0;
        for &i in &order[k..end] {
            ranks[i] = avg;
        }
        k = end;
    }
    ranks
}

/// Negative Pearson correlation between the soft ranks of `s` and the hard
/// ranks of `y_star`, with its gradient in `s`.
pub fn spearman_loss(s: &[f64], y_star: &[f64], cfg: &SoftRankConfig) -> Result<(f64, Vec<f64>)> {
    let m = s.len();
    if m != y_star.len() {
        return Err(GraftError::Shape(format!("{m} scores, {} targets", y_star.len())));
    }
    if m < 3 {
        return Err(GraftError::Config(format!("ranking loss needs m >= 3, got {m}")));
    }
    let sr = soft_rank(s, cfg.tau);
    let q = hard_rank(y_star);
    let mf = m as f64;
    let mean_r = sr.ranks.iter().sum::<f64>() / mf;
    let mean_q = q.iter().sum::<f64>() / mf;
    let rc: Vec<f64> = sr.ranks.iter().map(|r| r - mean_r).collect();
    let qc: Vec<f64> = q.iter().map(|v| v - mean_q).collect();
    let var_q = qc.iter().map(|v| v * v).sum::<f64>() / mf;
    if var_q <= 0.0 {
        return Err(GraftError::Numeric("all ranking targets are equal".into()));
    }
    let sd_q = var_q.sqrt();
    let var_r = rc.iter().map(|v| v * v).sum::<f64>() / mf;
    let sd_r = (var_r + cfg.variance_epsilon).sqrt();
    let cov = rc.iter().zip(&qc).map(|(a, b)| a * b).sum::<f64>() / mf;
    let corr = cov / (sd_r * sd_q);

    let dcorr_dr: Vec<f64> = rc
        .iter()
        .zip(&qc)
        .map(|(r, q)| q / (mf * sd_r * sd_q) - cov * r / (mf * sd_r.powi(3) * sd_q))
        .collect();
    let grad = sr.jacobian_apply(&dcorr_dr).into_iter().map(|g| -g).collect();
    Ok((-corr, grad))
}
