//! Annotation files, rank derivation from saliency maps, dataset statistics
//! and image file I/O.
//!
//! An annotation document is JSON:
//!
//! ```json
//! {"images": [{"image_id": "a", "width": 4, "height": 3,
//!   "instances": [{"counts": [5, 2, 5], "rank_order": 1, "category": "person",
//!                  "is_person": true}]}]}
//! ```
//!
//! `counts` is the row-major run-length encoding from [`crate::mask`].
//! Ground-truth files carry `rank_order`; prediction files carry
//! `confidence` and `saliency_score`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GrayMap, Grid};
use crate::mask::{rle_decode, BinaryMask, RleMask};
use crate::metrics::{validate_rank_orders, GtInstance, PredInstance};

/// Fewest and most salient instances a ground-truth image may carry.
pub const MIN_GT_INSTANCES: usize = 2;
pub const MAX_GT_INSTANCES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub counts: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_order: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default)]
    pub is_person: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationKind {
    GroundTruth,
    Prediction,
}

fn invalid(image: &ImageAnnotation, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation {
        image_id: image.image_id.clone(),
        field: field.into(),
        reason: reason.into(),
    }
}

impl ImageAnnotation {
    pub fn masks(&self) -> Result<Vec<BinaryMask>> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let rle = RleMask {
                    width: self.width,
                    height: self.height,
                    counts: inst.counts.clone(),
                };
                rle_decode(&rle).map_err(|e| invalid(self, format!("instances[{i}].counts"), e.to_string()))
            })
            .collect()
    }

    /// Checks the image against the rules of `kind`.
    pub fn validate(&self, kind: AnnotationKind) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid(self, "width/height", "image must have positive size"));
        }
        self.masks()?;
        match kind {
            AnnotationKind::GroundTruth => {
                let n = self.instances.len();
                if !(MIN_GT_INSTANCES..=MAX_GT_INSTANCES).contains(&n) {
                    return Err(invalid(
                        self,
                        "instances",
                        format!(
                            "{n} salient instances; the dataset rule admits \
                             {MIN_GT_INSTANCES} to {MAX_GT_INSTANCES} per image"
                        ),
                    ));
                }
                let mut ranks = Vec::with_capacity(n);
                for (i, inst) in self.instances.iter().enumerate() {
                    match inst.rank_order {
                        Some(r) => ranks.push(r),
                        None => {
                            return Err(invalid(self, format!("instances[{i}].rank_order"), "missing"))
                        }
                    }
                }
                validate_rank_orders(&ranks).map_err(|e| invalid(self, "rank_order", e.to_string()))?;
            }
            AnnotationKind::Prediction => {
                for (i, inst) in self.instances.iter().enumerate() {
                    match inst.confidence {
                        Some(c) if (0.0..=1.0).contains(&c) => {}
                        Some(c) => {
                            return Err(invalid(
                                self,
                                format!("instances[{i}].confidence"),
                                format!("{c} outside [0, 1]"),
                            ))
                        }
                        None => {
                            return Err(invalid(self, format!("instances[{i}].confidence"), "missing"))
                        }
                    }
                    match inst.saliency_score {
                        Some(s) if s.is_finite() => {}
                        Some(s) => {
                            return Err(invalid(
                                self,
                                format!("instances[{i}].saliency_score"),
                                format!("{s} is not finite"),
                            ))
                        }
                        None => {
                            return Err(invalid(
                                self,
                                format!("instances[{i}].saliency_score"),
                                "missing",
                            ))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn gt_instances(&self) -> Result<Vec<GtInstance>> {
        self.validate(AnnotationKind::GroundTruth)?;
        Ok(self
            .masks()?
            .into_iter()
            .zip(&self.instances)
            .map(|(mask, inst)| GtInstance {
                mask,
                rank_order: inst.rank_order.unwrap_or_default(),
            })
            .collect())
    }

    pub fn pred_instances(&self) -> Result<Vec<PredInstance>> {
        self.validate(AnnotationKind::Prediction)?;
        Ok(self
            .masks()?
            .into_iter()
            .zip(&self.instances)
            .map(|(mask, inst)| PredInstance {
                mask,
                saliency_score: inst.saliency_score.unwrap_or_default(),
                confidence: inst.confidence.unwrap_or_default(),
            })
            .collect())
    }
}

impl AnnotationFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validates every image; image ids must be unique.
    pub fn validate(&self, kind: AnnotationKind) -> Result<()> {
        let mut seen = HashSet::new();
        for image in &self.images {
            if !seen.insert(image.image_id.as_str()) {
                return Err(invalid(image, "image_id", "duplicate image id"));
            }
            image.validate(kind)?;
        }
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageAnnotation> {
        self.images.iter().find(|i| i.image_id == image_id)
    }
}

/// Reads and validates an annotation file.
pub fn load_annotations(path: &Path, kind: AnnotationKind) -> Result<AnnotationFile> {
    let file = AnnotationFile::from_json(&std::fs::read_to_string(path)?)?;
    file.validate(kind)?;
    Ok(file)
}

pub fn save_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    let mut text = file.to_json()?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Ranks instances by the maximum map value inside each mask (rank 1 =
/// largest). Ties go to the larger mean, then to the lower index.
pub fn derive_ranks(masks: &[BinaryMask], saliency: &GrayMap) -> Result<Vec<u32>> {
    let mut keys = Vec::with_capacity(masks.len());
    for mask in masks {
        saliency.ensure_dims(mask.dims())?;
        let values = saliency.as_slice();
        let (mut max, mut sum, mut count) = (f64::NEG_INFINITY, 0.0, 0usize);
        for px in mask.foreground() {
            max = max.max(values[px]);
            sum += values[px];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        keys.push((max, sum / count as f64));
    }
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .0
            .total_cmp(&keys[a].0)
            .then(keys[b].1.total_cmp(&keys[a].1))
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; masks.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos as u32 + 1;
    }
    Ok(ranks)
}

/// Rank proportions and average saliency score of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    /// `p[i]`: share of rank-`i+1` instances that belong to the category.
    pub proportions: [f64; MAX_GT_INSTANCES],
    /// `sum_i (9 - i) p[i]` over ranks `i = 1..8`.
    pub score: f64,
    /// `ln(1 + score)`.
    pub log_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub categories: BTreeMap<String, CategoryScore>,
}

/// Category scores over ground-truth instances. Instances without a
/// category, or ranked beyond 8, are ignored.
pub fn category_scores(file: &AnnotationFile) -> CategoryStats {
    let mut per_rank = [0usize; MAX_GT_INSTANCES];
    let mut counts: BTreeMap<&str, [usize; MAX_GT_INSTANCES]> = BTreeMap::new();
    for inst in file.images.iter().flat_map(|i| &i.instances) {
        let (Some(cat), Some(r)) = (&inst.category, inst.rank_order) else {
            continue;
        };
        let r = r as usize;
        if r == 0 || r > MAX_GT_INSTANCES {
            continue;
        }
        per_rank[r - 1] += 1;
        counts.entry(cat).or_default()[r - 1] += 1;
    }
    let categories = counts
        .into_iter()
        .map(|(cat, c)| {
            let mut proportions = [0.0; MAX_GT_INSTANCES];
            for i in 0..MAX_GT_INSTANCES {
                if per_rank[i] > 0 {
                    proportions[i] = c[i] as f64 / per_rank[i] as f64;
                }
            }
            let score: f64 = proportions
                .iter()
                .enumerate()
                .map(|(i, p)| (MAX_GT_INSTANCES - i) as f64 * p)
                .sum();
            let entry = CategoryScore {
                proportions,
                score,
                log_score: score.ln_1p(),
            };
            (cat.to_string(), entry)
        })
        .collect();
    CategoryStats { categories }
}

/// Images bucketed by instance count: `counts[n]` for `n` in `0..=8`, and
/// `counts[9]` for nine or more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub images: usize,
    pub counts: [usize; 10],
    pub percentages: [f64; 10],
}

impl InstanceStats {
    pub fn label(bucket: usize) -> String {
        if bucket == 9 {
            "9+".into()
        } else {
            bucket.to_string()
        }
    }

    /// Comma-separated table with a header row. The `0` column only
    /// appears when some image has no instances.
    pub fn to_csv(&self) -> String {
        let first = if self.counts[0] > 0 { 0 } else { 1 };
        let mut out = String::from("row,images");
        for b in first..10 {
            let _ = write!(out, ",{}", Self::label(b));
        }
        let _ = write!(out, "\ncount,{}", self.images);
        for b in first..10 {
            let _ = write!(out, ",{}", self.counts[b]);
        }
        let _ = write!(out, "\npercent,100.0");
        for b in first..10 {
            let _ = write!(out, ",{:.1}", self.percentages[b]);
        }
        out.push('\n');
        out
    }
}

pub fn dataset_stats(file: &AnnotationFile) -> Result<InstanceStats> {
    if file.images.is_empty() {
        return Err(Error::InvalidInput("dataset has no images".into()));
    }
    let mut counts = [0usize; 10];
    for image in &file.images {
        counts[image.instances.len().min(9)] += 1;
    }
    let total = file.images.len() as f64;
    let percentages = counts.map(|c| 100.0 * c as f64 / total);
    Ok(InstanceStats {
        images: file.images.len(),
        counts,
        percentages,
    })
}

pub fn load_luma8(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.into_raw())
}

/// 8-bit grayscale file scaled to `[0, 1]`.
pub fn load_gray_map(path: &Path) -> Result<GrayMap> {
    let g = load_luma8(path)?;
    GrayMap::from_luma8(g.width(), g.height(), g.as_slice())
}

pub fn save_luma8(path: &Path, map: &Grid<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, map.as_slice().to_vec())
        .ok_or_else(|| Error::InvalidInput("gray buffer does not match its size".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_rgb8(path: &Path) -> Result<Grid<[u8; 3]>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0).collect();
    Grid::from_vec(w as usize, h as usize, pixels)
}

pub fn save_rgb8(path: &Path, img: &Grid<[u8; 3]>) -> Result<()> {
    let raw: Vec<u8> = img.as_slice().iter().flatten().copied().collect();
    let out = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::InvalidInput("rgb buffer does not match its size".into()))?;
    out.save(path)?;
    Ok(())
}
