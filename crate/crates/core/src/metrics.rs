//! Per-image saliency ranking metrics and dataset aggregation.
//!
//! Rank conventions: ground truth carries descending rank orders (1 = most
//! salient). The correlation metrics work with ascending ranks, where the
//! least salient instance gets 1. Every tie is broken by ascending index.

use serde::{Deserialize, Serialize};

use crate::correlation::{ordinal_ranks, pearson, spearman};
use crate::error::{Error, Result};
use crate::grid::{GrayMap, Grid};
use crate::mask::{mask_iou, BinaryMask};

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub mask: BinaryMask,
    /// Descending rank order, 1 = most salient.
    pub rank_order: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredInstance {
    pub mask: BinaryMask,
    /// Higher = more salient.
    pub saliency_score: f64,
    /// Detection confidence in `[0, 1]`; decides matching order.
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matching {
    /// `(gt_index, pred_index)` pairs in the order they were claimed.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl Matching {
    /// Prediction matched to each ground-truth instance.
    pub fn pred_for_gt(&self, n_gt: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_gt];
        for &(g, p) in &self.pairs {
            out[g] = Some(p);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub iou_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Checks that rank orders are exactly `{1..N}`.
pub fn validate_rank_orders(ranks: &[u32]) -> Result<()> {
    let n = ranks.len();
    let mut seen = vec![false; n];
    for &r in ranks {
        let r = r as usize;
        if r == 0 || r > n {
            return Err(Error::InvalidRanks(format!(
                "rank {r} outside 1..={n}"
            )));
        }
        if std::mem::replace(&mut seen[r - 1], true) {
            return Err(Error::InvalidRanks(format!("rank {r} appears twice")));
        }
    }
    Ok(())
}

fn gt_ascending(gts: &[GtInstance]) -> Result<Vec<f64>> {
    let ranks: Vec<u32> = gts.iter().map(|g| g.rank_order).collect();
    validate_rank_orders(&ranks)?;
    let n = gts.len() as f64;
    Ok(ranks.iter().map(|&r| n - f64::from(r) + 1.0).collect())
}

fn check_dims(preds: &[PredInstance], gts: &[GtInstance]) -> Result<()> {
    let mut masks = gts.iter().map(|g| &g.mask).chain(preds.iter().map(|p| &p.mask));
    if let Some(first) = masks.next() {
        for m in masks {
            first.ensure_same_dims(m)?;
        }
    }
    Ok(())
}

/// Greedy one-to-one matching by descending prediction confidence.
///
/// Each prediction claims the still-unmatched ground truth with the highest
/// IoU, provided it reaches the threshold.
pub fn match_instances(
    preds: &[PredInstance],
    gts: &[GtInstance],
    cfg: &MetricConfig,
) -> Result<Matching> {
    cfg.validate()?;
    check_dims(preds, gts)?;

    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable sort keeps ascending index among equal confidences
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));

    let mut gt_taken = vec![false; gts.len()];
    let mut matching = Matching::default();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let iou = mask_iou(&preds[p].mask, &gt.mask)?;
            if iou >= cfg.iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                gt_taken[g] = true;
                matching.pairs.push((g, p));
            }
            None => matching.unmatched_pred.push(p),
        }
    }
    matching.unmatched_pred.sort_unstable();
    matching.unmatched_gt = (0..gts.len()).filter(|&g| !gt_taken[g]).collect();
    Ok(matching)
}

/// Segmentation-aware SOR for one image.
///
/// All predictions are ranked by score before matching, so false positives
/// occupy rank slots. Missed ground truths get predicted rank 0. Returns
/// `None` when the ground truth has a single instance; a constant predicted
/// vector (for example, every instance missed) scores 0.
pub fn sa_sor_image(
    preds: &[PredInstance],
    gts: &[GtInstance],
    cfg: &MetricConfig,
) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Err(Error::InvalidInput("SA-SOR needs at least one GT instance".into()));
    }
    let gt_rank = gt_ascending(gts)?;
    if gts.len() < 2 {
        return Ok(None);
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.saliency_score).collect();
    let pred_rank = ordinal_ranks(&scores);
    let matching = match_instances(preds, gts, cfg)?;
    let predicted: Vec<f64> = matching
        .pred_for_gt(gts.len())
        .into_iter()
        .map(|p| p.map_or(0.0, |p| pred_rank[p] as f64))
        .collect();
    Ok(Some(pearson(&predicted, &gt_rank).unwrap_or(0.0)))
}

/// Mean of `map` over the foreground of `mask`.
pub fn mean_within(map: &GrayMap, mask: &BinaryMask) -> Result<f64> {
    map.ensure_dims(mask.dims())?;
    let values = map.as_slice();
    let (sum, count) = mask
        .foreground()
        .fold((0.0, 0usize), |(s, c), i| (s + values[i], c + 1));
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Pixel-map SOR: each GT instance is scored by the mean map value inside its
/// mask, then Spearman against the GT order, mapped to `[0, 1]`.
pub fn sor_pixelwise_image(sal_map: &GrayMap, gts: &[GtInstance]) -> Result<Option<f64>> {
    let gt_rank = gt_ascending(gts)?;
    if gts.len() < 2 {
        return Ok(None);
    }
    let scores = gts
        .iter()
        .map(|g| mean_within(sal_map, &g.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(spearman(&scores, &gt_rank).map(|rho| (rho + 1.0) / 2.0))
}

/// Assigns every GT the prediction with the largest overlap area. Not
/// one-to-one: one prediction may serve several GTs.
pub fn largest_overlap_assignment(
    preds: &[PredInstance],
    gts: &[GtInstance],
) -> Result<Vec<Option<usize>>> {
    check_dims(preds, gts)?;
    gts.iter()
        .map(|gt| {
            let mut best: Option<(usize, usize)> = None;
            for (p, pred) in preds.iter().enumerate() {
                let area = pred.mask.intersection_area(&gt.mask)?;
                if area > 0 && best.map_or(true, |(_, b)| area > b) {
                    best = Some((p, area));
                }
            }
            Ok(best.map(|(p, _)| p))
        })
        .collect()
}

/// SSOR: largest-overlap assignment, Spearman over the assigned GTs only,
/// mapped to `[0, 1]`. `None` with fewer than two assigned GTs or when either
/// side is constant.
pub fn ssor_image(preds: &[PredInstance], gts: &[GtInstance]) -> Result<Option<f64>> {
    let gt_rank = gt_ascending(gts)?;
    let assignment = largest_overlap_assignment(preds, gts)?;
    let (scores, ranks): (Vec<f64>, Vec<f64>) = assignment
        .iter()
        .zip(&gt_rank)
        .filter_map(|(p, &g)| p.map(|p| (preds[p].saliency_score, g)))
        .unzip();
    if scores.len() < 2 {
        return Ok(None);
    }
    Ok(spearman(&scores, &ranks).map(|rho| (rho + 1.0) / 2.0))
}

pub fn mae_image(pred_map: &GrayMap, gt_map: &GrayMap) -> Result<f64> {
    gt_map.ensure_dims(pred_map.dims())?;
    let n = pred_map.as_slice().len();
    if n == 0 {
        return Err(Error::InvalidInput("empty map".into()));
    }
    let total: f64 = pred_map
        .as_slice()
        .iter()
        .zip(gt_map.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub counted: usize,
    pub skipped: usize,
}

/// Mean over defined per-image scores, with a tally of undefined ones.
pub fn dataset_aggregate(per_image: &[Option<f64>]) -> Result<Aggregate> {
    let defined: Vec<f64> = per_image.iter().flatten().copied().collect();
    let skipped = per_image.len() - defined.len();
    if defined.is_empty() {
        return Err(Error::NothingToAggregate { skipped });
    }
    Ok(Aggregate {
        mean: defined.iter().sum::<f64>() / defined.len() as f64,
        counted: defined.len(),
        skipped,
    })
}

/// Descending rank orders from scores: highest score gets 1. Among equal
/// scores the lower index is treated as less salient, matching `sa_sor_image`.
pub fn rank_orders_from_scores(scores: &[f64]) -> Vec<u32> {
    let n = scores.len();
    ordinal_ranks(scores)
        .into_iter()
        .map(|asc| (n - asc + 1) as u32)
        .collect()
}

/// Gray level for descending rank order `rank_order` among `n` instances.
pub fn rank_value(rank_order: u32, n: usize) -> u8 {
    let k = n as f64 - f64::from(rank_order) + 1.0;
    (255.0 * k / n as f64).round() as u8
}

/// Paints each instance with `round(255 * (N - r + 1) / N)` over a zero
/// background. More salient instances are painted last so they win overlaps.
pub fn render_rank_map(
    instances: &[(&BinaryMask, u32)],
    width: usize,
    height: usize,
) -> Result<Grid<u8>> {
    let ranks: Vec<u32> = instances.iter().map(|&(_, r)| r).collect();
    validate_rank_orders(&ranks)?;
    let n = instances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(instances[i].1));
    let mut map = Grid::filled(width, height, 0u8);
    for i in order {
        let (mask, rank) = instances[i];
        if mask.dims() != (width, height) {
            return Err(crate::error::dims_mismatch((width, height), mask.dims()));
        }
        let value = rank_value(rank, n);
        for px in mask.foreground() {
            map.as_mut_slice()[px] = value;
        }
    }
    Ok(map)
}

pub fn render_gt_rank_map(gts: &[GtInstance], width: usize, height: usize) -> Result<Grid<u8>> {
    let items: Vec<(&BinaryMask, u32)> = gts.iter().map(|g| (&g.mask, g.rank_order)).collect();
    render_rank_map(&items, width, height)
}

pub fn render_pred_rank_map(
    preds: &[PredInstance],
    width: usize,
    height: usize,
) -> Result<Grid<u8>> {
    let scores: Vec<f64> = preds.iter().map(|p| p.saliency_score).collect();
    let ranks = rank_orders_from_scores(&scores);
    let items: Vec<(&BinaryMask, u32)> = preds.iter().map(|p| &p.mask).zip(ranks).collect();
    render_rank_map(&items, width, height)
}

pub fn to_gray(map: &Grid<u8>) -> GrayMap {
    map.map(|&v| f64::from(v) / 255.0)
}
