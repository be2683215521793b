//! Greedy k-center coreset selection with per-image provenance.
//!
//! Every input patch carries `(source_image, source_patch)`. Selection keeps
//! that provenance so the patches left out of the memory bank can be
//! recovered per image afterwards.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default fraction of patches kept in the memory bank.
pub const DEFAULT_TARGET_FRACTION: f64 = 0.10;
/// Upper bound on the default projected dimension.
pub const MAX_DEFAULT_PROJECTION_DIM: usize = 128;

const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Error, PartialEq)]
pub enum CoresetError {
    #[error("feature list is empty")]
    Empty,
    #[error("target fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("target fraction {fraction} of {n} features selects no patch")]
    ZeroTarget { fraction: f64, n: usize },
    #[error("feature {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("projection expects {expected} input channels, features have {found}")]
    ProjectionMismatch { expected: usize, found: usize },
    #[error("start index {index} out of range for {n} features")]
    BadStart { index: usize, n: usize },
    #[error("image {image}: patch indices are not exactly 0..{count}")]
    Provenance { image: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, CoresetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFeature {
    pub vector: Vec<f32>,
    pub source_image: usize,
    /// Flat patch index in row-major (h, w) order.
    pub source_patch: usize,
}

/// Random linear map ψ: ℝ^C → ℝ^d with i.i.d. N(0, 1/d) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    seed: u64,
}

impl ProjectionMatrix {
    pub fn gaussian(seed: u64, rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "projection dimensions must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / rows as f64).sqrt()).unwrap();
        let entries = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Self {
            rows,
            cols,
            entries,
            seed,
        }
    }

    /// `min(C, 128)` reduced dimension.
    pub fn default_dim(channels: usize) -> usize {
        channels.min(MAX_DEFAULT_PROJECTION_DIM)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn project(&self, v: &[f32]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.entries
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, &b)| a * f64::from(b)).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Feature with the largest norm in the selection space.
    #[default]
    MaxNorm,
    /// Feature at global index 0.
    First,
}

/// Memory bank plus the provenance of every selected patch.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetTrace {
    pub memory_bank: Vec<PatchFeature>,
    pub sampled_by_image: BTreeMap<usize, BTreeSet<usize>>,
    pub total_patches_by_image: BTreeMap<usize, usize>,
    /// Global feature ids in pick order; `memory_bank[t]` is `features[selection_order[t]]`.
    pub selection_order: Vec<usize>,
}

impl CoresetTrace {
    pub fn len(&self) -> usize {
        self.memory_bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory_bank.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.memory_bank.first().map_or(0, |p| p.vector.len())
    }

    pub fn total_patches(&self) -> usize {
        self.total_patches_by_image.values().sum()
    }

    /// Source `(image, patch)` of bank row `row`.
    pub fn provenance(&self, row: usize) -> (usize, usize) {
        let p = &self.memory_bank[row];
        (p.source_image, p.source_patch)
    }

    /// Row-major `len × dim` matrix of bank vectors.
    pub fn bank_matrix(&self) -> Vec<f32> {
        self.memory_bank
            .iter()
            .flat_map(|p| p.vector.iter().copied())
            .collect()
    }

    /// Rebuilds a trace from persisted bank rows and per-image patch counts.
    pub fn from_rows(
        memory_bank: Vec<PatchFeature>,
        total_patches_by_image: BTreeMap<usize, usize>,
        selection_order: Vec<usize>,
    ) -> Self {
        let mut sampled_by_image: BTreeMap<usize, BTreeSet<usize>> =
            total_patches_by_image.keys().map(|&i| (i, BTreeSet::new())).collect();
        for p in &memory_bank {
            sampled_by_image
                .entry(p.source_image)
                .or_default()
                .insert(p.source_patch);
        }
        Self {
            memory_bank,
            sampled_by_image,
            total_patches_by_image,
            selection_order,
        }
    }
}

/// Per-image patch indices left out of the memory bank.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UnsampledIndex {
    pub by_image: BTreeMap<usize, Vec<usize>>,
}

impl UnsampledIndex {
    pub fn total(&self) -> usize {
        self.by_image.values().map(Vec::len).sum()
    }

    pub fn of_image(&self, image: usize) -> &[usize] {
        self.by_image.get(&image).map_or(&[], Vec::as_slice)
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first traversal over a row-major `n × dim` point matrix.
///
/// Each pick maximises the distance to the already-selected set; ties go to
/// the lowest index. Runs in O(n·l·dim) with one min-distance array.
pub fn farthest_first(points: &[f64], dim: usize, l: usize, start: usize) -> Vec<usize> {
    let n = points.len().checked_div(dim).unwrap_or(0);
    assert!(start < n, "start index out of range");
    let l = l.min(n);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut order = Vec::with_capacity(l);
    let mut selected = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut newest = start;
    order.push(start);
    selected[start] = true;

    let parallel = n * dim >= PAR_THRESHOLD;
    while order.len() < l {
        let center = row(newest);
        let update = |(i, d): (usize, &mut f64)| {
            let nd = sq_dist(row(i), center);
            if nd < *d {
                *d = nd;
            }
        };
        if parallel {
            min_d2.par_iter_mut().enumerate().for_each(update);
        } else {
            min_d2.iter_mut().enumerate().for_each(update);
        }

        let better = |a: (usize, f64), b: (usize, f64)| {
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        };
        let none = (usize::MAX, f64::NEG_INFINITY);
        let candidates = |(i, &d): (usize, &f64)| if selected[i] { none } else { (i, d) };
        let (pick, _) = if parallel {
            min_d2
                .par_iter()
                .enumerate()
                .map(candidates)
                .reduce(|| none, better)
        } else {
            min_d2.iter().enumerate().map(candidates).fold(none, better)
        };
        selected[pick] = true;
        order.push(pick);
        newest = pick;
    }
    order
}

fn check_features(features: &[PatchFeature]) -> Result<(usize, BTreeMap<usize, usize>)> {
    let dim = features.first().ok_or(CoresetError::Empty)?.vector.len();
    let mut per_image: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (index, f) in features.iter().enumerate() {
        if f.vector.len() != dim {
            return Err(CoresetError::DimensionMismatch {
                index,
                expected: dim,
                found: f.vector.len(),
            });
        }
        per_image.entry(f.source_image).or_default().push(f.source_patch);
    }
    let mut totals = BTreeMap::new();
    for (image, mut patches) in per_image {
        let count = patches.len();
        patches.sort_unstable();
        if patches.iter().enumerate().any(|(k, &p)| k != p) {
            return Err(CoresetError::Provenance { image, count });
        }
        totals.insert(image, count);
    }
    Ok((dim, totals))
}

/// Number of bank rows for `fraction` of `n` features.
pub fn target_size(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoresetError::BadFraction(fraction));
    }
    let l = (fraction * n as f64).round() as usize;
    if l == 0 {
        return Err(CoresetError::ZeroTarget { fraction, n });
    }
    Ok(l.min(n))
}

/// Builds the memory bank by greedy k-center selection.
///
/// Distances are measured after `projection` when one is given; the bank
/// stores the original, unprojected vectors.
pub fn build_coreset(
    features: &[PatchFeature],
    target_fraction: f64,
    projection: Option<&ProjectionMatrix>,
    start: StartRule,
) -> Result<CoresetTrace> {
    let (dim, totals) = check_features(features)?;
    let l = target_size(target_fraction, features.len())?;

    let (space, space_dim) = match projection {
        Some(p) => {
            if p.cols() != dim {
                return Err(CoresetError::ProjectionMismatch {
                    expected: p.cols(),
                    found: dim,
                });
            }
            let projected: Vec<Vec<f64>> = features.par_iter().map(|f| p.project(&f.vector)).collect();
            (projected.concat(), p.rows())
        }
        None => (
            features
                .iter()
                .flat_map(|f| f.vector.iter().map(|&v| f64::from(v)))
                .collect::<Vec<_>>(),
            dim,
        ),
    };

    let start_idx = match start {
        StartRule::First => 0,
        StartRule::MaxNorm => {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, row) in space.chunks_exact(space_dim).enumerate() {
                let n2: f64 = row.iter().map(|v| v * v).sum();
                if n2 > best.1 {
                    best = (i, n2);
                }
            }
            best.0
        }
    };

    let selection_order = farthest_first(&space, space_dim, l, start_idx);
    let memory_bank = selection_order.iter().map(|&i| features[i].clone()).collect();
    Ok(CoresetTrace::from_rows(memory_bank, totals, selection_order))
}

/// Same as [`build_coreset`] with an explicit start feature.
pub fn build_coreset_from(
    features: &[PatchFeature],
    target_fraction: f64,
    start_index: usize,
) -> Result<CoresetTrace> {
    let (_, totals) = check_features(features)?;
    if start_index >= features.len() {
        return Err(CoresetError::BadStart {
            index: start_index,
            n: features.len(),
        });
    }
    let l = target_size(target_fraction, features.len())?;
    let dim = features[0].vector.len();
    let space: Vec<f64> = features
        .iter()
        .flat_map(|f| f.vector.iter().map(|&v| f64::from(v)))
        .collect();
    let selection_order = farthest_first(&space, dim, l, start_index);
    let memory_bank = selection_order.iter().map(|&i| features[i].clone()).collect();
    Ok(CoresetTrace::from_rows(memory_bank, totals, selection_order))
}

/// Exact per-image complement of the sampled patch set.
pub fn unsampled_of(trace: &CoresetTrace) -> UnsampledIndex {
    let by_image = trace
        .total_patches_by_image
        .iter()
        .map(|(&image, &count)| {
            let sampled = trace.sampled_by_image.get(&image);
            let rest = (0..count)
                .filter(|j| !sampled.is_some_and(|s| s.contains(j)))
                .collect();
            (image, rest)
        })
        .collect();
    UnsampledIndex { by_image }
}

/// Largest distance from any feature to its nearest bank row (unprojected).
pub fn coreset_cover_radius(trace: &CoresetTrace, features: &[PatchFeature]) -> f64 {
    let bank: Vec<Vec<f64>> = trace
        .memory_bank
        .iter()
        .map(|p| p.vector.iter().map(|&v| f64::from(v)).collect())
        .collect();
    features
        .par_iter()
        .map(|f| {
            let v: Vec<f64> = f.vector.iter().map(|&x| f64::from(x)).collect();
            bank.iter()
                .map(|b| sq_dist(&v, b))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

/// Flattens grids into patch features; image `i` is `grids[i]`.
pub fn patches_from_grids<'a>(grids: impl IntoIterator<Item = &'a crate::feature_store::FeatureGrid>) -> Vec<PatchFeature> {
    grids
        .into_iter()
        .enumerate()
        .flat_map(|(i, g)| {
            g.patches()
                .into_iter()
                .enumerate()
                .map(move |(j, vector)| PatchFeature {
                    vector,
                    source_image: i,
                    source_patch: j,
                })
        })
        .collect()
}
