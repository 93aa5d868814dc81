//! Straightforward re-implementations used as oracles by the integration
//! tests. Everything here works on plain vectors and is written for
//! clarity, not speed.

#![allow(dead_code)]

use salrank::mask::BinaryMask;
use salrank::metrics::{GtInstance, PredInstance};

#[derive(Debug, Clone)]
pub struct OGt {
    pub bits: Vec<bool>,
    pub rank: u32,
}

#[derive(Debug, Clone)]
pub struct OPred {
    pub bits: Vec<bool>,
    pub score: f64,
    pub conf: f64,
}

pub fn to_gt(g: &OGt, w: usize, h: usize) -> GtInstance {
    GtInstance {
        mask: BinaryMask::new(w, h, g.bits.clone()).unwrap(),
        rank_order: g.rank,
    }
}

pub fn to_pred(p: &OPred, w: usize, h: usize) -> PredInstance {
    PredInstance {
        mask: BinaryMask::new(w, h, p.bits.clone()).unwrap(),
        saliency_score: p.score,
        confidence: p.conf,
    }
}

pub fn decode_counts(counts: &[u32]) -> Vec<bool> {
    let mut out = Vec::new();
    for (k, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            out.push(k % 2 == 1);
        }
    }
    out
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean-centred Pearson; `None` for zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Rank by counting: ties go to the lower index first.
pub fn strict_ascending_rank(s: &[f64]) -> Vec<f64> {
    (0..s.len())
        .map(|i| {
            let below = s.iter().filter(|&&v| v < s[i]).count();
            let tied_before = (0..i).filter(|&j| s[j] == s[i]).count();
            (1 + below + tied_before) as f64
        })
        .collect()
}

pub fn average_rank(s: &[f64]) -> Vec<f64> {
    (0..s.len())
        .map(|i| {
            let below = s.iter().filter(|&&v| v < s[i]).count();
            let equal = s.iter().filter(|&&v| v == s[i]).count();
            below as f64 + (equal as f64 + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_rank(x), &average_rank(y))
}

fn gt_ascending(gts: &[OGt]) -> Vec<f64> {
    let n = gts.len() as u32;
    gts.iter().map(|g| f64::from(n - g.rank + 1)).collect()
}

/// Greedy matching written as "repeatedly take the most confident
/// unprocessed prediction".
pub fn matching(preds: &[OPred], gts: &[OGt], t: f64) -> Vec<Option<usize>> {
    let mut done = vec![false; preds.len()];
    let mut gt_match: Vec<Option<usize>> = vec![None; gts.len()];
    for _ in 0..preds.len() {
        let mut p = usize::MAX;
        for j in 0..preds.len() {
            if !done[j] && (p == usize::MAX || preds[j].conf > preds[p].conf) {
                p = j;
            }
        }
        done[p] = true;
        let mut best: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_match[g].is_some() {
                continue;
            }
            let v = iou(&preds[p].bits, &gt.bits);
            if v >= t && best.map_or(true, |b| v > iou(&preds[p].bits, &gts[b].bits)) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            gt_match[g] = Some(p);
        }
    }
    gt_match
}

pub fn sa_sor(preds: &[OPred], gts: &[OGt], t: f64) -> Option<f64> {
    if gts.len() < 2 {
        return None;
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let rank = strict_ascending_rank(&scores);
    let predicted: Vec<f64> = matching(preds, gts, t)
        .iter()
        .map(|m| m.map_or(0.0, |p| rank[p]))
        .collect();
    Some(pearson(&predicted, &gt_ascending(gts)).unwrap_or(0.0))
}

/// Rank map of the predictions in `[0, 1]`: each pixel takes the value of
/// the most salient prediction covering it.
pub fn pred_map(preds: &[OPred], pixels: usize) -> Vec<f64> {
    let n = preds.len() as f64;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let asc = strict_ascending_rank(&scores);
    (0..pixels)
        .map(|px| {
            let level = preds
                .iter()
                .zip(&asc)
                .filter(|(p, _)| p.bits[px])
                .map(|(_, &a)| a)
                .fold(0.0, f64::max);
            if level == 0.0 {
                0.0
            } else {
                (255.0 * level / n).round() / 255.0
            }
        })
        .collect()
}

pub fn gt_map(gts: &[OGt], pixels: usize) -> Vec<f64> {
    let n = gts.len() as f64;
    let asc = gt_ascending(gts);
    (0..pixels)
        .map(|px| {
            let level = gts
                .iter()
                .zip(&asc)
                .filter(|(g, _)| g.bits[px])
                .map(|(_, &a)| a)
                .fold(0.0, f64::max);
            (255.0 * level / n).round() / 255.0
        })
        .collect()
}

pub fn sor(preds: &[OPred], gts: &[OGt]) -> Option<f64> {
    if gts.len() < 2 {
        return None;
    }
    let map = pred_map(preds, gts[0].bits.len());
    let means: Vec<f64> = gts
        .iter()
        .map(|g| {
            let vals: Vec<f64> = (0..map.len()).filter(|&i| g.bits[i]).map(|i| map[i]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    spearman(&means, &gt_ascending(gts)).map(|r| (r + 1.0) / 2.0)
}

pub fn ssor(preds: &[OPred], gts: &[OGt]) -> Option<f64> {
    let asc = gt_ascending(gts);
    let mut s = Vec::new();
    let mut r = Vec::new();
    for (g, gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, usize)> = None;
        for (p, pred) in preds.iter().enumerate() {
            let area = pred.bits.iter().zip(&gt.bits).filter(|(a, b)| **a && **b).count();
            if area > 0 && best.map_or(true, |(_, a)| area > a) {
                best = Some((p, area));
            }
        }
        if let Some((p, _)) = best {
            s.push(preds[p].score);
            r.push(asc[g]);
        }
    }
    if s.len() < 2 {
        return None;
    }
    spearman(&s, &r).map(|v| (v + 1.0) / 2.0)
}

pub fn mae(preds: &[OPred], gts: &[OGt]) -> f64 {
    let pixels = gts[0].bits.len();
    let a = pred_map(preds, pixels);
    let b = gt_map(gts, pixels);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / pixels as f64
}
