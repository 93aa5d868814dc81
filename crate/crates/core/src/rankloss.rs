//! Pairwise ranking loss with rank-difference pair weights.
//!
//! For every pair `(q1, q2)` with `r[q1] < r[q2]` (q1 ranked higher) the loss
//! adds `beta_q * softplus(s[q2] - s[q1])`, where
//! `beta_q = |r[q1] - r[q2]|^gamma / sum_o |r[o1] - r[o2]|^gamma`.
//! With `gamma = 0` every pair weighs `1 / C(N, 2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::validate_rank_orders;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedScores {
    pub scores: Vec<f64>,
    /// Descending rank orders, a permutation of `1..=N`.
    pub gt_ranks: Vec<u32>,
}

impl RankedScores {
    pub fn new(scores: Vec<f64>, gt_ranks: Vec<u32>) -> Result<Self> {
        if scores.len() != gt_ranks.len() {
            return Err(Error::InvalidInput(format!(
                "{} scores for {} ranks",
                scores.len(),
                gt_ranks.len()
            )));
        }
        if scores.len() < 2 {
            return Err(Error::InvalidInput(
                "ranking loss needs at least two instances".into(),
            ));
        }
        validate_rank_orders(&gt_ranks)?;
        Ok(Self { scores, gt_ranks })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

/// Ordered pair of instance indices; `higher` has the smaller rank order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankPair {
    pub higher: usize,
    pub lower: usize,
}

/// All `C(N, 2)` pairs, in index order `(i, j)` with `i < j`, each oriented by rank.
pub fn enumerate_pairs(gt_ranks: &[u32]) -> Vec<RankPair> {
    let n = gt_ranks.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let pair = if gt_ranks[i] < gt_ranks[j] {
                RankPair { higher: i, lower: j }
            } else {
                RankPair { higher: j, lower: i }
            };
            pairs.push(pair);
        }
    }
    pairs
}

/// Normalized weights, aligned with [`enumerate_pairs`].
pub fn pair_weights(gt_ranks: &[u32], cfg: &LossConfig) -> Vec<f64> {
    let raw: Vec<f64> = enumerate_pairs(gt_ranks)
        .iter()
        .map(|p| {
            let diff = f64::from(gt_ranks[p.higher].abs_diff(gt_ranks[p.lower]));
            diff.powf(cfg.gamma)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_config(cfg: &LossConfig) -> Result<()> {
    if !(cfg.gamma >= 0.0 && cfg.gamma.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "gamma must be finite and >= 0, got {}",
            cfg.gamma
        )));
    }
    Ok(())
}

pub fn ranking_loss(rs: &RankedScores, cfg: &LossConfig) -> Result<f64> {
    check_config(cfg)?;
    let weights = pair_weights(&rs.gt_ranks, cfg);
    Ok(enumerate_pairs(&rs.gt_ranks)
        .iter()
        .zip(&weights)
        .map(|(p, &w)| w * softplus(rs.scores[p.lower] - rs.scores[p.higher]))
        .sum())
}

/// Loss and its gradient with respect to each score.
pub fn ranking_loss_with_grad(rs: &RankedScores, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_config(cfg)?;
    let weights = pair_weights(&rs.gt_ranks, cfg);
    let mut grad = vec![0.0; rs.scores.len()];
    let mut loss = 0.0;
    for (p, &w) in enumerate_pairs(&rs.gt_ranks).iter().zip(&weights) {
        let margin = rs.scores[p.lower] - rs.scores[p.higher];
        loss += w * softplus(margin);
        let g = w * sigmoid(margin);
        grad[p.lower] += g;
        grad[p.higher] -= g;
    }
    Ok((loss, grad))
}

pub fn ranking_loss_grad(rs: &RankedScores, cfg: &LossConfig) -> Result<Vec<f64>> {
    ranking_loss_with_grad(rs, cfg).map(|(_, g)| g)
}
