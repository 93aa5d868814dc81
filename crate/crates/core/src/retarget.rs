//! Width reduction by seam carving, with the energy map scaled by a
//! saliency rank map so seams avoid highly ranked instances.

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::grid::{GrayMap, Grid};

/// Non-negative per-pixel energy.
pub type EnergyMap = Grid<f64>;

pub type RgbImage = Grid<[u8; 3]>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetargetConfig {
    /// Floor added to the rank map before multiplying, so background
    /// energy stays ordered instead of collapsing to zero.
    pub epsilon: f64,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self { epsilon: 0.05 }
    }
}

impl RetargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "epsilon {} must be positive and finite",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// `|dI/dx| + |dI/dy|` summed over channels, forward differences with the
/// last row and column replicated.
pub fn gradient_energy(image: &RgbImage) -> Result<EnergyMap> {
    let (w, h) = image.dims();
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput(format!(
            "energy needs an image of at least 2x2, got {w}x{h}"
        )));
    }
    let px = image.as_slice();
    Ok(Grid::from_fn(w, h, |r, c| {
        let here = px[r * w + c];
        let right = px[r * w + (c + 1).min(w - 1)];
        let below = px[(r + 1).min(h - 1) * w + c];
        (0..3)
            .map(|ch| {
                let v = i32::from(here[ch]);
                ((i32::from(right[ch]) - v).abs() + (i32::from(below[ch]) - v).abs()) as f64
            })
            .sum()
    }))
}

/// `e * (rank + epsilon)` pixelwise.
pub fn modulate_energy(energy: &EnergyMap, rank_map: &GrayMap, cfg: &RetargetConfig) -> Result<EnergyMap> {
    if energy.dims() != rank_map.dims() {
        return Err(dims_mismatch(energy.dims(), rank_map.dims()));
    }
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon {} < 0", cfg.epsilon)));
    }
    let data = energy
        .as_slice()
        .iter()
        .zip(rank_map.as_slice())
        .map(|(&e, &s)| e * (s + cfg.epsilon))
        .collect();
    Grid::from_vec(energy.width(), energy.height(), data)
}

/// A vertical 8-connected seam: one column per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seam {
    pub cols: Vec<usize>,
}

impl Seam {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.cols.len() != height {
            return Err(Error::InvalidInput(format!(
                "seam has {} rows, image has {height}",
                self.cols.len()
            )));
        }
        if let Some(r) = self.cols.iter().position(|&c| c >= width) {
            return Err(Error::InvalidInput(format!(
                "seam column {} at row {r} outside width {width}",
                self.cols[r]
            )));
        }
        if let Some(r) = self.cols.windows(2).position(|p| p[0].abs_diff(p[1]) > 1) {
            return Err(Error::InvalidInput(format!("seam jumps between rows {r} and {}", r + 1)));
        }
        Ok(())
    }
}

/// Seam energy summed from the top row down, the order the DP accumulates.
pub fn seam_cost(energy: &EnergyMap, seam: &Seam) -> f64 {
    seam.cols
        .iter()
        .enumerate()
        .fold(0.0, |acc, (r, &c)| energy.get(r, c) + acc)
}

/// Minimum-energy vertical seam by dynamic programming. Ties go to the
/// leftmost column, both for the end point and at every backtrack step.
pub fn find_min_seam(energy: &EnergyMap) -> Result<Seam> {
    let (w, h) = energy.dims();
    if w == 0 || h == 0 {
        return Err(Error::InvalidInput("empty energy map".into()));
    }
    let e = energy.as_slice();
    let mut cost = e[..w].to_vec();
    let mut prev = vec![0.0; w];
    // parent column of each cell, row-major
    let mut parent = vec![0usize; w * h];
    for r in 1..h {
        std::mem::swap(&mut cost, &mut prev);
        for c in 0..w {
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(w - 1);
            let mut best = lo;
            for k in lo + 1..=hi {
                if prev[k] < prev[best] {
                    best = k;
                }
            }
            parent[r * w + c] = best;
            cost[c] = e[r * w + c] + prev[best];
        }
    }
    let mut col = 0;
    for c in 1..w {
        if cost[c] < cost[col] {
            col = c;
        }
    }
    let mut cols = vec![0; h];
    for r in (0..h).rev() {
        cols[r] = col;
        col = parent[r * w + col];
    }
    Ok(Seam { cols })
}

/// Drops the seam pixel from every row.
pub fn remove_seam<T: Clone>(grid: &Grid<T>, seam: &Seam) -> Result<Grid<T>> {
    let (w, h) = grid.dims();
    if w < 2 {
        return Err(Error::InvalidInput("cannot remove a seam from a 1-wide grid".into()));
    }
    seam.validate(w, h)?;
    let mut data = Vec::with_capacity((w - 1) * h);
    for (r, &skip) in seam.cols.iter().enumerate() {
        let row = grid.row(r);
        data.extend_from_slice(&row[..skip]);
        data.extend_from_slice(&row[skip + 1..]);
    }
    Grid::from_vec(w - 1, h, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retargeted {
    pub image: RgbImage,
    pub rank_map: GrayMap,
    /// Source column of every surviving pixel.
    pub source_cols: Grid<usize>,
}

impl Retargeted {
    /// Removed pixels per row, as source columns in ascending order.
    pub fn removed_cols(&self, original_width: usize) -> Vec<Vec<usize>> {
        (0..self.source_cols.height())
            .map(|r| {
                let kept = self.source_cols.row(r);
                let mut k = 0;
                (0..original_width)
                    .filter(|&c| {
                        if k < kept.len() && kept[k] == c {
                            k += 1;
                            false
                        } else {
                            true
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Removes seams one at a time until the image is `target_width` wide,
/// recomputing energy after every removal. The rank map is carved in
/// lockstep.
pub fn retarget_width(
    image: &RgbImage,
    rank_map: &GrayMap,
    target_width: usize,
    cfg: &RetargetConfig,
) -> Result<Retargeted> {
    cfg.validate()?;
    if image.dims() != rank_map.dims() {
        return Err(dims_mismatch(image.dims(), rank_map.dims()));
    }
    let w = image.width();
    if target_width == 0 || target_width >= w {
        return Err(Error::InvalidInput(format!(
            "target width {target_width} must be in 1..{w}"
        )));
    }
    let mut out = Retargeted {
        image: image.clone(),
        rank_map: rank_map.clone(),
        source_cols: Grid::from_fn(w, image.height(), |_, c| c),
    };
    while out.image.width() > target_width {
        let energy = if out.image.width() >= 2 && out.image.height() >= 2 {
            gradient_energy(&out.image)?
        } else {
            // a single row or column has no gradient; carve by rank alone
            Grid::filled(out.image.width(), out.image.height(), 1.0)
        };
        let seam = find_min_seam(&modulate_energy(&energy, &out.rank_map, cfg)?)?;
        out.image = remove_seam(&out.image, &seam)?;
        out.rank_map = remove_seam(&out.rank_map, &seam)?;
        out.source_cols = remove_seam(&out.source_cols, &seam)?;
    }
    Ok(out)
}

/// `round(frac * width)`, clamped to a valid target.
pub fn target_from_fraction(width: usize, frac: f64) -> Result<usize> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidInput(format!("target fraction {frac} outside (0, 1)")));
    }
    let t = (frac * width as f64).round() as usize;
    if t == 0 || t >= width {
        return Err(Error::InvalidInput(format!(
            "fraction {frac} of width {width} leaves no valid target"
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray_image(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> RgbImage {
        Grid::from_fn(w, h, |r, c| {
            let v = f(r, c);
            [v, v, v]
        })
    }

    #[test]
    fn constant_image_has_zero_energy() {
        let e = gradient_energy(&gray_image(4, 3, |_, _| 9)).unwrap();
        assert!(e.as_slice().iter().all(|&v| v == 0.0));
        assert!(gradient_energy(&gray_image(1, 3, |_, _| 0)).is_err());
    }

    #[test]
    fn step_edge_energy_sits_on_edge_column() {
        let e = gradient_energy(&gray_image(4, 3, |_, c| if c >= 2 { 10 } else { 0 })).unwrap();
        for r in 0..3 {
            assert_eq!(e.row(r), &[0.0, 30.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn hand_computed_3x3() {
        // single channel values, other channels zero
        let vals = [[1u8, 2, 4], [0, 5, 5], [3, 3, 9]];
        let img = Grid::from_fn(3, 3, |r, c| [vals[r][c], 0, 0]);
        let e = gradient_energy(&img).unwrap();
        // |right - here| + |below - here|, borders replicated
        let expected = [[1.0 + 1.0, 2.0 + 3.0, 0.0 + 1.0], [5.0 + 3.0, 0.0 + 2.0, 0.0 + 4.0], [0.0, 6.0, 0.0]];
        for r in 0..3 {
            assert_eq!(e.row(r), &expected[r]);
        }
    }

    #[test]
    fn modulation_examples() {
        let e = Grid::from_fn(3, 2, |r, c| (r * 3 + c) as f64);
        let ones = GrayMap::filled(3, 2, 1.0);
        let zeros = GrayMap::filled(3, 2, 0.0);
        assert_eq!(modulate_energy(&e, &ones, &RetargetConfig { epsilon: 0.0 }).unwrap(), e);
        let scaled = modulate_energy(&e, &zeros, &RetargetConfig::default()).unwrap();
        assert_eq!(scaled, e.map(|v| v * 0.05));
        assert!(modulate_energy(&e, &GrayMap::filled(2, 3, 1.0), &RetargetConfig::default()).is_err());
    }

    #[test]
    fn zero_column_is_the_seam() {
        let e = Grid::from_fn(5, 4, |_, c| if c == 3 { 0.0 } else { 1.0 });
        assert_eq!(find_min_seam(&e).unwrap().cols, vec![3; 4]);
    }

    #[test]
    fn uniform_energy_takes_leftmost() {
        let e = Grid::filled(4, 3, 2.0);
        assert_eq!(find_min_seam(&e).unwrap().cols, vec![0; 3]);
    }

    #[test]
    fn half_salient_seam_lands_in_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Grid::from_fn(8, 6, |_, _| rng.gen_range(1.0..2.0));
        let rank = Grid::from_fn(8, 6, |_, c| if c < 4 { 1.0 } else { 0.0 });
        let m = modulate_energy(&e, &rank, &RetargetConfig::default()).unwrap();
        assert!(find_min_seam(&m).unwrap().cols.iter().all(|&c| c >= 4));
    }

    #[test]
    fn seam_cost_equals_dp_minimum_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (w, h) = (rng.gen_range(1..7), rng.gen_range(1..7));
            let e = Grid::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0));
            let seam = find_min_seam(&e).unwrap();
            seam.validate(w, h).unwrap();
            let best = brute_force_min(&e);
            assert_eq!(seam_cost(&e, &seam), best);
        }
    }

    fn brute_force_min(e: &EnergyMap) -> f64 {
        fn go(e: &EnergyMap, r: usize, c: usize, acc: f64) -> f64 {
            let acc = e.get(r, c) + acc;
            if r + 1 == e.height() {
                return acc;
            }
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(e.width() - 1);
            (lo..=hi).map(|k| go(e, r + 1, k, acc)).fold(f64::INFINITY, f64::min)
        }
        (0..e.width()).map(|c| go(e, 0, c, 0.0)).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn remove_seam_cases() {
        let g = Grid::from_fn(2, 2, |r, c| r * 10 + c);
        let out = remove_seam(&g, &Seam { cols: vec![0, 1] }).unwrap();
        assert_eq!(out.into_vec(), vec![1, 10]);

        let g = Grid::from_fn(5, 3, |r, c| (b'a' + (r * 5 + c) as u8) as char);
        let out = remove_seam(&g, &Seam { cols: vec![4, 3, 2] }).unwrap();
        assert_eq!(out.dims(), (4, 3));
        let rows: Vec<String> = (0..3).map(|r| out.row(r).iter().collect()).collect();
        assert_eq!(rows, ["abcd", "fghj", "klno"]);

        assert!(remove_seam(&g, &Seam { cols: vec![0, 2, 2] }).is_err());
        assert!(remove_seam(&g, &Seam { cols: vec![0, 5, 2] }).is_err());
        assert!(remove_seam(&Grid::filled(1, 2, 0), &Seam { cols: vec![0, 0] }).is_err());
    }

    fn textured(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn one_seam_and_exact_width() {
        let img = textured(10, 6, 0);
        let rank = GrayMap::filled(10, 6, 0.0);
        let out = retarget_width(&img, &rank, 9, &RetargetConfig::default()).unwrap();
        assert_eq!(out.image.dims(), (9, 6));
        assert!(out.removed_cols(10).iter().all(|r| r.len() == 1));
        let out = retarget_width(&img, &rank, 3, &RetargetConfig::default()).unwrap();
        assert_eq!(out.image.dims(), (3, 6));
        assert_eq!(out.rank_map.dims(), (3, 6));
        assert!(retarget_width(&img, &rank, 10, &RetargetConfig::default()).is_err());
        assert!(retarget_width(&img, &rank, 0, &RetargetConfig::default()).is_err());
    }

    #[test]
    fn background_half_absorbs_removals() {
        let (w, h) = (40, 20);
        let img = textured(w, h, 5);
        let rank = Grid::from_fn(w, h, |_, c| if c < w / 2 { 1.0 } else { 0.0 });
        let out = retarget_width(&img, &rank, w / 2, &RetargetConfig::default()).unwrap();
        let removed: Vec<usize> = out.removed_cols(w).concat();
        let background = removed.iter().filter(|&&c| c >= w / 2).count();
        assert!(background as f64 >= 0.9 * removed.len() as f64);
    }

    #[test]
    fn salient_rectangle_survives() {
        let (w, h) = (40, 16);
        let img = textured(w, h, 8);
        let inside = |r: usize, c: usize| (4..12).contains(&r) && (10..22).contains(&c);
        let rank = Grid::from_fn(w, h, |r, c| if inside(r, c) { 1.0 } else { 0.0 });
        let out = retarget_width(&img, &rank, w / 2, &RetargetConfig::default()).unwrap();
        for (r, cols) in out.removed_cols(w).iter().enumerate() {
            assert!(cols.iter().all(|&c| !inside(r, c)), "row {r}: {cols:?}");
        }
    }

    #[test]
    fn fraction_targets() {
        assert_eq!(target_from_fraction(640, 0.6).unwrap(), 384);
        assert_eq!(target_from_fraction(10, 0.7).unwrap(), 7);
        assert!(target_from_fraction(10, 1.0).is_err());
        assert!(target_from_fraction(2, 0.1).is_err());
    }
}
