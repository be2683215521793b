//! Patch and image anomaly scores against a memory bank, anomaly maps and
//! bounding boxes for visual prompts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coreset::CoresetTrace;
use crate::feature_store::FeatureGrid;

const QUERY_BLOCK: usize = 32;
const BANK_BLOCK: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("query dimension {found} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("target {target:?} is smaller than source {grid:?}")]
    TargetTooSmall {
        grid: (usize, usize),
        target: (usize, usize),
    },
    #[error("score grid is empty")]
    EmptyGrid,
}

pub type Result<T> = std::result::Result<T, ScoringError>;

/// Read-only, row-major bank matrix used for exact nearest-neighbour search.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    data: Vec<f32>,
}

impl MemoryBank {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(ScoringError::EmptyBank);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(ScoringError::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_trace(trace: &CoresetTrace) -> Result<Self> {
        Self::new(trace.dim(), trace.bank_matrix())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact nearest row and Euclidean distance for each query in the
    /// row-major `queries` matrix. Ties resolve to the lowest row index.
    pub fn nearest_batch(&self, queries: &[f32]) -> Result<Vec<(usize, f64)>> {
        if !queries.len().is_multiple_of(self.dim) {
            return Err(ScoringError::DimensionMismatch {
                expected: self.dim,
                found: queries.len() % self.dim,
            });
        }
        let dim = self.dim;
        let n_bank = self.len();
        let mut out = vec![(0usize, f64::INFINITY); queries.len() / dim];
        out.par_chunks_mut(QUERY_BLOCK)
            .zip(queries.par_chunks(QUERY_BLOCK * dim))
            .for_each(|(best, qblock)| {
                for b0 in (0..n_bank).step_by(BANK_BLOCK) {
                    let b1 = (b0 + BANK_BLOCK).min(n_bank);
                    for (slot, q) in best.iter_mut().zip(qblock.chunks_exact(dim)) {
                        for r in b0..b1 {
                            let d2 = sq_dist(q, self.row(r));
                            if d2 < slot.1 {
                                *slot = (r, d2);
                            }
                        }
                    }
                }
            });
        for slot in &mut out {
            slot.1 = slot.1.sqrt();
        }
        Ok(out)
    }

    pub fn nearest(&self, query: &[f32]) -> Result<(usize, f64)> {
        if query.len() != self.dim {
            return Err(ScoringError::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        Ok(self.nearest_batch(query)?[0])
    }
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Per-location nearest-neighbour distances for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub nearest_ids: Vec<usize>,
}

impl ScoreGrid {
    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.scores[h * self.width + w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub value: f64,
    pub argmax_patch: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AnomalyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Inclusive pixel box `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    #[serde(rename = "peak")]
    pub peak_score: f64,
}

impl BoundingBox {
    /// Maps a box from a `from` resolution to a `to` resolution, keeping it inclusive.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        let lo = |v: usize, s: f64| (v as f64 * s).floor() as usize;
        let hi = |v: usize, s: f64, max: usize| (((v + 1) as f64 * s).ceil() as usize).saturating_sub(1).min(max - 1);
        BoundingBox {
            x0: lo(self.x0, sx),
            y0: lo(self.y0, sy),
            x1: hi(self.x1, sx, to.1),
            y1: hi(self.y1, sy, to.0),
            peak_score: self.peak_score,
        }
    }
}

pub fn score_grid(grid: &FeatureGrid, bank: &MemoryBank) -> Result<ScoreGrid> {
    if grid.channels() != bank.dim() {
        return Err(ScoringError::DimensionMismatch {
            expected: bank.dim(),
            found: grid.channels(),
        });
    }
    let (nearest_ids, scores) = bank.nearest_batch(&grid.patch_matrix())?.into_iter().unzip();
    Ok(ScoreGrid {
        height: grid.height(),
        width: grid.width(),
        scores,
        nearest_ids,
    })
}

/// Maximum patch score; the first maximum in row-major order wins.
pub fn image_score(sg: &ScoreGrid) -> Result<ImageScore> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in sg.scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (i, value) = best.ok_or(ScoringError::EmptyGrid)?;
    Ok(ImageScore {
        value,
        argmax_patch: (i / sg.width, i % sg.width),
    })
}

/// Bilinear upsampling with half-pixel centres (`align_corners = false`);
/// sample positions outside the source are clamped to the border.
pub fn upsample_map(sg: &ScoreGrid, target: (usize, usize)) -> Result<AnomalyMap> {
    let (h_in, w_in) = (sg.height, sg.width);
    let (h_out, w_out) = target;
    if h_out < h_in || w_out < w_in {
        return Err(ScoringError::TargetTooSmall {
            grid: (h_in, w_in),
            target,
        });
    }
    if sg.scores.is_empty() {
        return Err(ScoringError::EmptyGrid);
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(h_in, h_out);
    let xs = axis(w_in, w_out);
    let mut values = Vec::with_capacity(h_out * w_out);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = sg.get(y0, x0) * (1.0 - wx) + sg.get(y0, x1) * wx;
            let bottom = sg.get(y1, x0) * (1.0 - wx) + sg.get(y1, x1) * wx;
            values.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Ok(AnomalyMap {
        height: h_out,
        width: w_out,
        values,
    })
}

/// Separable Gaussian blur, kernel truncated at 4σ, mirrored borders.
pub fn gaussian_blur(map: &AnomalyMap, sigma: f64) -> AnomalyMap {
    if sigma.is_nan() || sigma <= 0.0 {
        return map.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * n;
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - 1 - m }) as usize
    };
    let (h, w) = (map.height, map.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * map.values[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            values[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    AnomalyMap {
        height: h,
        width: w,
        values,
    }
}

/// Tight boxes around 8-connected components of `{value >= threshold}`
/// with at least `min_area` pixels, sorted by descending peak score.
pub fn extract_boxes(map: &AnomalyMap, threshold: f64, min_area: usize) -> Vec<BoundingBox> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || map.values[start].partial_cmp(&threshold).is_none_or(|o| o.is_lt()) {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut bb = BoundingBox {
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
            peak_score: f64::NEG_INFINITY,
        };
        let mut area = 0usize;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            area += 1;
            bb.x0 = bb.x0.min(x);
            bb.x1 = bb.x1.max(x);
            bb.y0 = bb.y0.min(y);
            bb.y1 = bb.y1.max(y);
            bb.peak_score = bb.peak_score.max(map.values[p]);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && map.values[q] >= threshold {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if area >= min_area.max(1) {
            boxes.push(bb);
        }
    }
    boxes.sort_by(|a, b| b.peak_score.total_cmp(&a.peak_score));
    boxes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sg(h: usize, w: usize, scores: Vec<f64>) -> ScoreGrid {
        ScoreGrid {
            height: h,
            width: w,
            nearest_ids: vec![0; scores.len()],
            scores,
        }
    }

    fn map_from(h: usize, w: usize, values: Vec<f64>) -> AnomalyMap {
        AnomalyMap { height: h, width: w, values }
    }

    #[test]
    fn identical_patch_scores_zero() {
        let bank = MemoryBank::new(2, vec![0.5, -1.0, 3.0, 3.0]).unwrap();
        let grid = FeatureGrid::from_patches(1, 2, &[vec![3.0, 3.0], vec![0.5, -1.0]]).unwrap();
        let s = score_grid(&grid, &bank).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.0]);
        assert_eq!(s.nearest_ids, vec![1, 0]);
    }

    #[test]
    fn two_candidate_nearest() {
        let bank = MemoryBank::new(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let (id, d) = bank.nearest(&[0.6, 0.0]).unwrap();
        assert_eq!(id, 1);
        assert!((d - 0.4).abs() < 1e-7);
        // equidistant: lowest row
        assert_eq!(bank.nearest(&[0.5, 0.0]).unwrap().0, 0);
    }

    #[test]
    fn dimension_mismatch() {
        let bank = MemoryBank::new(2, vec![0.0, 0.0]).unwrap();
        let grid = FeatureGrid::from_patches(1, 1, &[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(score_grid(&grid, &bank), Err(ScoringError::DimensionMismatch { .. })));
        assert!(MemoryBank::new(2, vec![]).is_err());
    }

    #[test]
    fn image_score_tie_rule() {
        let s = image_score(&sg(2, 2, vec![1.0, 3.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.value, 3.0);
        assert_eq!(s.argmax_patch, (0, 1));
        let z = image_score(&sg(2, 3, vec![0.0; 6])).unwrap();
        assert_eq!((z.value, z.argmax_patch), (0.0, (0, 0)));
        assert!(image_score(&sg(0, 0, vec![])).is_err());
    }

    #[test]
    fn upsample_constant_and_monotone() {
        let m = upsample_map(&sg(2, 3, vec![2.5; 6]), (8, 9)).unwrap();
        assert!(m.values.iter().all(|&v| v == 2.5));
        let m = upsample_map(&sg(1, 2, vec![0.0, 1.0]), (1, 4)).unwrap();
        assert!(m.values.windows(2).all(|p| p[0] <= p[1]), "{:?}", m.values);
        assert!(upsample_map(&sg(2, 2, vec![0.0; 4]), (1, 4)).is_err());
    }

    #[test]
    fn upsample_2x2_to_4x4_closed_form() {
        // half-pixel centres: source coordinate per output index is
        // clamp((o + 0.5) / 2 - 0.5) = [0, 0.25, 0.75, 1]
        let m = upsample_map(&sg(2, 2, vec![0.0, 1.0, 2.0, 3.0]), (4, 4)).unwrap();
        let t = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                // bilinear interpolation of f(y, x) = 2y + x is exact
                let expected = 2.0 * t[y] + t[x];
                assert!((m.get(y, x) - expected).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn blob_box() {
        let mut v = vec![0.0; 8 * 10];
        for y in 2..=4 {
            for x in 5..=7 {
                v[y * 10 + x] = 1.0 + (y * x) as f64;
            }
        }
        let boxes = extract_boxes(&map_from(8, 10, v), 0.5, 1);
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (5, 2, 7, 4));
        assert_eq!(b.peak_score, 29.0);
    }

    #[test]
    fn boxes_connectivity_area_and_order() {
        // diagonal neighbours join one component
        let mut v = vec![0.0; 25];
        v[0] = 1.0;
        v[6] = 1.0;
        v[24] = 5.0;
        let m = map_from(5, 5, v);
        let boxes = extract_boxes(&m, 1.0, 1);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].peak_score, 5.0);
        assert_eq!((boxes[1].x0, boxes[1].y0, boxes[1].x1, boxes[1].y1), (0, 0, 1, 1));
        assert_eq!(extract_boxes(&m, 1.0, 2).len(), 1);
        assert!(extract_boxes(&m, 6.0, 1).is_empty());
    }

    #[test]
    fn blur_preserves_constant_and_mass_shape() {
        let m = map_from(6, 7, vec![3.0; 42]);
        let b = gaussian_blur(&m, 1.5);
        assert!(b.values.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let mut v = vec![0.0; 81];
        v[40] = 1.0;
        let b = gaussian_blur(&map_from(9, 9, v), 1.0);
        assert!(b.get(4, 4) > b.get(4, 5) && b.get(4, 5) > b.get(4, 6));
        assert!((b.get(3, 4) - b.get(5, 4)).abs() < 1e-15);
    }

    #[test]
    fn rescale_box() {
        let b = BoundingBox { x0: 1, y0: 0, x1: 1, y1: 2, peak_score: 1.0 };
        let r = b.rescale((3, 4), (24, 32));
        assert_eq!((r.x0, r.y0, r.x1, r.y1), (8, 0, 15, 23));
    }

    proptest! {
        #[test]
        fn scores_scale_homogeneously(seed in any::<u64>(), c in 0.1f32..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank: Vec<f32> = (0..20 * 3).map(|_| rng.random_range(-4.0f32..4.0)).collect();
            let patches: Vec<Vec<f32>> = (0..12).map(|_| (0..3).map(|_| rng.random_range(-4.0f32..4.0)).collect()).collect();
            // powers of two scale f32 exactly
            let c = 2f32.powi(c.log2().round() as i32);
            let base = score_grid(&FeatureGrid::from_patches(3, 4, &patches).unwrap(), &MemoryBank::new(3, bank.clone()).unwrap()).unwrap();
            let scaled_patches: Vec<Vec<f32>> = patches.iter().map(|p| p.iter().map(|v| v * c).collect()).collect();
            let scaled_bank: Vec<f32> = bank.iter().map(|v| v * c).collect();
            let scaled = score_grid(&FeatureGrid::from_patches(3, 4, &scaled_patches).unwrap(), &MemoryBank::new(3, scaled_bank).unwrap()).unwrap();
            for (a, b) in base.scores.iter().zip(&scaled.scores) {
                prop_assert!((a * f64::from(c) - b).abs() <= 1e-12 * b.max(1.0));
            }
            prop_assert_eq!(image_score(&base).unwrap().argmax_patch, image_score(&scaled).unwrap().argmax_patch);
        }

        #[test]
        fn bank_permutation_keeps_scores(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..15).map(|_| (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
            let q: Vec<f32> = (0..4 * 9).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let a = MemoryBank::new(4, rows.concat()).unwrap().nearest_batch(&q).unwrap();
            let mut rev = rows.clone();
            rev.reverse();
            let b = MemoryBank::new(4, rev.concat()).unwrap().nearest_batch(&q).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.1, y.1);
            }
        }

        #[test]
        fn upsampling_is_range_preserving(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..10.0)).collect();
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let m = upsample_map(&sg(h, w, scores), (h * k + 1, w * k)).unwrap();
            prop_assert!(m.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn sub_threshold_noise_keeps_boxes(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (12, 12);
            let values: Vec<f64> = (0..h * w).map(|_| if rng.random_bool(0.2) { rng.random_range(2.0..3.0) } else { rng.random_range(0.0..0.5) }).collect();
            let noisy: Vec<f64> = values.iter().map(|&v| if v < 1.0 { v + rng.random_range(0.0..0.4) } else { v }).collect();
            prop_assert_eq!(extract_boxes(&map_from(h, w, values), 1.0, 1), extract_boxes(&map_from(h, w, noisy), 1.0, 1));
        }
    }
}
