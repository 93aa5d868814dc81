//! Binary instance masks, row-major run-length encoding, IoU and boxes.
//!
//! Pixel coordinates are `(row, col)`. Boxes are half-open:
//! `[x0, x1) x [y0, y1)` with `x` along columns and `y` along rows.
//!
//! The RLE layout is row-major and always starts with a background run,
//! which may be zero. COCO stores masks column-major; converting between
//! the two is up to the caller.

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask has {} bits, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Mask with the given `(row, col)` pixels set. Out-of-range pixels are an error.
    pub fn from_pixels(width: usize, height: usize, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::empty(width, height);
        for &(row, col) in pixels {
            if row >= height || col >= width {
                return Err(Error::InvalidInput(format!(
                    "pixel ({row}, {col}) outside {width}x{height} mask"
                )));
            }
            mask.set(row, col, true);
        }
        Ok(mask)
    }

    /// Filled rectangle `[x0, x1) x [y0, y1)`, clipped to the mask.
    pub fn from_rect(width: usize, height: usize, rect: Bbox) -> Self {
        let mut mask = Self::empty(width, height);
        for row in rect.y0.min(height)..rect.y1.min(height) {
            for col in rect.x0.min(width)..rect.x1.min(width) {
                mask.set(row, col, true);
            }
        }
        mask
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn ensure_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(dims_mismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize> {
        self.ensure_same_dims(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    /// Indices into the row-major pixel array where the mask is set.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }
}

/// Intersection over union. An empty union scores 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Row-major run lengths, alternating background/foreground, starting with background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    /// Checks the count invariants: the runs cover the image exactly and only
    /// the leading background run may be zero.
    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        let expected = (self.width * self.height) as u64;
        if total != expected {
            return Err(Error::InvalidRle(format!(
                "counts sum to {total}, expected {}x{} = {expected}",
                self.width, self.height
            )));
        }
        if let Some(pos) = self.counts.iter().skip(1).position(|&c| c == 0) {
            return Err(Error::InvalidRle(format!(
                "zero-length run at position {}",
                pos + 1
            )));
        }
        Ok(())
    }
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &bit in &mask.bits {
        if bit != current {
            counts.push(run);
            run = 0;
            current = bit;
        }
        run += 1;
    }
    if run > 0 || counts.is_empty() {
        counts.push(run);
    }
    RleMask {
        width: mask.width,
        height: mask.height,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    rle.validate()?;
    let mut bits = Vec::with_capacity(rle.width * rle.height);
    let mut value = false;
    for &count in &rle.counts {
        bits.extend(std::iter::repeat(value).take(count as usize));
        value = !value;
    }
    BinaryMask::new(rle.width, rle.height, bits)
}

/// Half-open pixel box: columns `[x0, x1)`, rows `[y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bbox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Bbox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidInput(format!(
                "degenerate box ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, other: &Bbox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Intersection with the image `[0, width) x [0, height)`, if non-empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<Bbox> {
        let x1 = self.x1.min(width);
        let y1 = self.y1.min(height);
        (self.x0 < x1 && self.y0 < y1).then_some(Bbox {
            x0: self.x0,
            y0: self.y0,
            x1,
            y1,
        })
    }
}

/// Tightest box around the foreground.
pub fn bbox_of_mask(mask: &BinaryMask) -> Result<Bbox> {
    let mut fg = mask.foreground().map(|i| (i / mask.width, i % mask.width));
    let (r, c) = fg.next().ok_or(Error::EmptyMask)?;
    let (mut r0, mut r1, mut c0, mut c1) = (r, r, c, c);
    for (r, c) in fg {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    Ok(Bbox {
        x0: c0,
        y0: r0,
        x1: c1 + 1,
        y1: r1 + 1,
    })
}

/// Scales the box about its center by `factor` and clips it to `width` x `height`.
///
/// Mins are floored and maxes ceiled before clipping, so the result always
/// covers the clipped input box.
pub fn enlarge_bbox(b: Bbox, factor: f64, width: usize, height: usize) -> Bbox {
    let factor = factor.max(1.0);
    let cx = (b.x0 + b.x1) as f64 / 2.0;
    let cy = (b.y0 + b.y1) as f64 / 2.0;
    let hw = b.width() as f64 * factor / 2.0;
    let hh = b.height() as f64 * factor / 2.0;
    let lo = |c: f64, h: f64| (c - h).floor().max(0.0) as usize;
    let hi = |c: f64, h: f64, bound: usize| ((c + h).ceil() as usize).min(bound);
    Bbox {
        x0: lo(cx, hw).min(b.x0),
        y0: lo(cy, hh).min(b.y0),
        x1: hi(cx, hw, width).max(b.x1.min(width)),
        y1: hi(cy, hh, height).max(b.y1.min(height)),
    }
}
