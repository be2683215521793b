//! Distribution-based thresholding.
//!
//! Training images are scored using only the patches that coreset
//! selection left out of the memory bank. The resulting image scores give
//! `τ = μ + κσ` (population σ), the largest normal score `s_max`, and an
//! optional Gumbel tail fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coreset::UnsampledIndex;
use crate::feature_store::FeatureGrid;
use crate::scoring::{MemoryBank, ScoringError};

pub const DEFAULT_KAPPA: f64 = 3.0;
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
/// Minimum sample count for a tail fit.
pub const MIN_EVT_SAMPLES: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum DbtError {
    #[error("need at least {needed} scores, have {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("score standard deviation is zero; tail fit is degenerate")]
    DegenerateFit,
    #[error("quantile {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error("{images} training grids but unsampled index covers image {missing}")]
    IndexMismatch { images: usize, missing: usize },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

pub type Result<T> = std::result::Result<T, DbtError>;

/// Image-level scores of the normal training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingScoreSet {
    pub image_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Unsampled patch attaining each image's score; `None` when the image
    /// had no unsampled patch.
    pub per_image_argmax: Vec<Option<usize>>,
    /// Images with no unsampled patch; their recorded score is 0.
    pub flagged: Vec<bool>,
}

impl TrainingScoreSet {
    /// Builds a set from bare scores with no provenance.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len();
        Self {
            image_ids: (0..n).map(|i| i.to_string()).collect(),
            per_image_argmax: vec![None; n],
            flagged: vec![false; n],
            scores,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn usable(&self, exclude_flagged: bool) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.flagged)
            .filter(|(_, &f)| !(exclude_flagged && f))
            .map(|(&s, _)| s)
            .collect()
    }
}

/// Scores each training image as the maximum nearest-neighbour distance
/// over its unsampled patches. `grids[i]` is image `i` of the index.
pub fn training_scores(
    image_ids: &[String],
    grids: &[FeatureGrid],
    bank: &MemoryBank,
    unsampled: &UnsampledIndex,
) -> Result<TrainingScoreSet> {
    if let Some(&missing) = unsampled.by_image.keys().find(|&&i| i >= grids.len()) {
        return Err(DbtError::IndexMismatch {
            images: grids.len(),
            missing,
        });
    }
    let per_image: Vec<(f64, Option<usize>)> = grids
        .par_iter()
        .enumerate()
        .map(|(i, grid)| -> Result<(f64, Option<usize>)> {
            let patches = unsampled.of_image(i);
            if patches.is_empty() {
                return Ok((0.0, None));
            }
            let queries: Vec<f32> = patches.iter().flat_map(|&j| grid.patch(j)).collect();
            if grid.channels() != bank.dim() {
                return Err(ScoringError::DimensionMismatch {
                    expected: bank.dim(),
                    found: grid.channels(),
                }
                .into());
            }
            let nn = bank.nearest_batch(&queries)?;
            let mut best = (f64::NEG_INFINITY, None);
            for (&j, &(_, d)) in patches.iter().zip(&nn) {
                if d > best.0 {
                    best = (d, Some(j));
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;

    let flagged: Vec<bool> = per_image.iter().map(|(_, a)| a.is_none()).collect();
    for (id, _) in image_ids.iter().zip(&flagged).filter(|(_, &f)| f) {
        log::warn!("training image {id} has no unsampled patches; recorded score 0");
    }
    Ok(TrainingScoreSet {
        image_ids: image_ids.to_vec(),
        scores: per_image.iter().map(|(s, _)| *s).collect(),
        per_image_argmax: per_image.iter().map(|(_, a)| *a).collect(),
        flagged,
    })
}

/// Gumbel (γ = 0) tail fit by the method of moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvtFit {
    pub location: f64,
    pub scale: f64,
    #[serde(skip, default)]
    pub gamma: f64,
    #[serde(rename = "q")]
    pub quantile_q: f64,
    pub threshold: f64,
}

impl EvtFit {
    pub fn quantile(&self, q: f64) -> f64 {
        self.location - self.scale * (-q.ln()).ln()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        (-(-(x - self.location) / self.scale).exp()).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub mu: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub tau: f64,
    pub s_max: f64,
    pub n: usize,
    pub evt: Option<EvtFit>,
}

impl ThresholdModel {
    /// `[τ, s_max]`; empty when `τ > s_max`.
    pub fn low_confidence_interval(&self) -> Option<(f64, f64)> {
        (self.tau <= self.s_max).then_some((self.tau, self.s_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOptions {
    pub kappa: f64,
    /// Leave images without unsampled patches out of μ and σ.
    pub exclude_flagged: bool,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            exclude_flagged: true,
        }
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

pub fn fit_threshold(ts: &TrainingScoreSet, kappa: f64) -> Result<ThresholdModel> {
    fit_threshold_with(
        ts,
        &ThresholdOptions {
            kappa,
            ..Default::default()
        },
    )
}

pub fn fit_threshold_with(ts: &TrainingScoreSet, opts: &ThresholdOptions) -> Result<ThresholdModel> {
    let xs = ts.usable(opts.exclude_flagged);
    if xs.len() < 2 {
        return Err(DbtError::InsufficientData {
            needed: 2,
            found: xs.len(),
        });
    }
    let (mu, sigma) = moments(&xs);
    let s_max = ts.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ThresholdModel {
        mu,
        sigma,
        kappa: opts.kappa,
        tau: mu + opts.kappa * sigma,
        s_max,
        n: xs.len(),
        evt: None,
    })
}

/// Gumbel moment fit: `scale = σ√6/π`, `location = μ − γ_E·scale`, and the
/// threshold is the `q`-quantile `location − scale·ln(−ln q)`.
pub fn fit_evt(ts: &TrainingScoreSet, q: f64) -> Result<EvtFit> {
    fit_evt_scores(&ts.usable(true), q)
}

pub fn fit_evt_scores(xs: &[f64], q: f64) -> Result<EvtFit> {
    if !(q > 0.0 && q < 1.0) {
        return Err(DbtError::BadQuantile(q));
    }
    if xs.len() < MIN_EVT_SAMPLES {
        return Err(DbtError::InsufficientData {
            needed: MIN_EVT_SAMPLES,
            found: xs.len(),
        });
    }
    let (mu, sigma) = moments(xs);
    if sigma == 0.0 {
        return Err(DbtError::DegenerateFit);
    }
    let scale = sigma * 6f64.sqrt() / std::f64::consts::PI;
    let location = mu - EULER_GAMMA * scale;
    let mut fit = EvtFit {
        location,
        scale,
        gamma: 0.0,
        quantile_q: q,
        threshold: 0.0,
    };
    fit.threshold = fit.quantile(q);
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVerdict {
    pub decision: Decision,
    pub low_confidence: bool,
    pub s_img: f64,
}

/// `s_img ≥ τ` is abnormal; `τ ≤ s_img ≤ s_max` is low confidence.
pub fn classify(s_img: f64, model: &ThresholdModel) -> ConfidenceVerdict {
    let decision = if s_img >= model.tau {
        Decision::Abnormal
    } else {
        Decision::Normal
    };
    ConfidenceVerdict {
        decision,
        low_confidence: model.tau <= s_img && s_img <= model.s_max,
        s_img,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coreset::{build_coreset, unsampled_of, PatchFeature, StartRule};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gumbel, Normal};

    fn model(tau: f64, s_max: f64) -> ThresholdModel {
        ThresholdModel {
            mu: 0.0,
            sigma: 0.0,
            kappa: 3.0,
            tau,
            s_max,
            n: 2,
            evt: None,
        }
    }

    #[test]
    fn zero_variance() {
        let m = fit_threshold(&TrainingScoreSet::from_scores(vec![1.0; 3]), 3.0).unwrap();
        assert_eq!((m.mu, m.sigma, m.tau, m.s_max), (1.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn two_point_arithmetic() {
        let m = fit_threshold(&TrainingScoreSet::from_scores(vec![0.0, 2.0]), 3.0).unwrap();
        assert_eq!((m.mu, m.sigma, m.tau, m.s_max), (1.0, 1.0, 4.0, 2.0));
        assert_eq!(m.low_confidence_interval(), None);
    }

    #[test]
    fn needs_two_scores() {
        assert_eq!(
            fit_threshold(&TrainingScoreSet::from_scores(vec![1.0]), 3.0),
            Err(DbtError::InsufficientData { needed: 2, found: 1 })
        );
    }

    #[test]
    fn flagged_images_excluded_by_default() {
        let mut ts = TrainingScoreSet::from_scores(vec![0.0, 2.0, 4.0]);
        ts.flagged[0] = true;
        let m = fit_threshold(&ts, 3.0).unwrap();
        assert_eq!((m.mu, m.sigma, m.n), (3.0, 1.0, 2));
        let all = fit_threshold_with(&ts, &ThresholdOptions { kappa: 3.0, exclude_flagged: false }).unwrap();
        assert_eq!(all.n, 3);
        assert_eq!(all.mu, 2.0);
    }

    #[test]
    fn gaussian_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let normal = Normal::new(5.0, 0.5).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let m = fit_threshold(&TrainingScoreSet::from_scores(xs), 3.0).unwrap();
        assert!((m.tau - 6.5).abs() < 0.05, "tau {}", m.tau);
        assert_eq!(m.tau, m.mu + 3.0 * m.sigma);
    }

    #[test]
    fn gumbel_moment_inversion() {
        // two-point set with the moments of a standard Gumbel, padded to 20
        let beta = 1.0;
        let mu = EULER_GAMMA * beta;
        let sigma = beta * std::f64::consts::PI / 6f64.sqrt();
        let xs: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { mu - sigma } else { mu + sigma }).collect();
        let fit = fit_evt_scores(&xs, 0.5).unwrap();
        assert!(fit.location.abs() < 1e-12, "{}", fit.location);
        assert!((fit.scale - 1.0).abs() < 1e-12);
        let at_e = fit.quantile((-1.0f64).exp());
        assert!((at_e - fit.location).abs() < 1e-12);
        assert!((fit.cdf(fit.threshold) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evt_errors() {
        assert_eq!(fit_evt_scores(&[1.0; 25], 0.9), Err(DbtError::DegenerateFit));
        assert!(matches!(fit_evt_scores(&[1.0; 5], 0.9), Err(DbtError::InsufficientData { .. })));
        assert_eq!(fit_evt_scores(&[1.0; 25], 1.0), Err(DbtError::BadQuantile(1.0)));
    }

    #[test]
    fn gumbel_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Gumbel::new(2.0, 0.5).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| g.sample(&mut rng)).collect();
        let fit = fit_evt_scores(&xs, 0.99).unwrap();
        assert!((fit.location - 2.0).abs() / 2.0 < 0.02);
        assert!((fit.scale - 0.5).abs() / 0.5 < 0.02);
    }

    #[test]
    fn classify_regions() {
        let m = model(2.0, 4.0);
        let below = classify(2.0 - 1e-9, &m);
        assert_eq!((below.decision, below.low_confidence), (Decision::Normal, false));
        let at = classify(2.0, &m);
        assert_eq!((at.decision, at.low_confidence), (Decision::Abnormal, true));
        let mid = classify(3.0, &m);
        assert_eq!((mid.decision, mid.low_confidence), (Decision::Abnormal, true));
        let top = classify(4.0, &m);
        assert!(top.low_confidence);
        let above = classify(5.0, &m);
        assert_eq!((above.decision, above.low_confidence), (Decision::Abnormal, false));
        // empty interval when tau exceeds s_max
        assert!(!classify(4.5, &model(4.2, 4.0)).low_confidence);
    }

    #[test]
    fn training_scores_toy() {
        // one image, patches {0, 10}; bank keeps only {0}
        let grid = FeatureGrid::from_patches(1, 2, &[vec![0.0], vec![10.0]]).unwrap();
        let bank = MemoryBank::new(1, vec![0.0]).unwrap();
        let un = UnsampledIndex { by_image: [(0, vec![1])].into() };
        let ts = training_scores(&["a".into()], &[grid], &bank, &un).unwrap();
        assert_eq!(ts.scores, vec![10.0]);
        assert_eq!(ts.per_image_argmax, vec![Some(1)]);
    }

    #[test]
    fn full_sampling_flags_every_image() {
        let grids: Vec<FeatureGrid> = (0..3)
            .map(|i| FeatureGrid::from_patches(1, 2, &[vec![i as f32], vec![i as f32 + 0.5]]).unwrap())
            .collect();
        let feats = crate::coreset::patches_from_grids(&grids);
        let trace = build_coreset(&feats, 1.0, None, StartRule::MaxNorm).unwrap();
        let bank = MemoryBank::from_trace(&trace).unwrap();
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let ts = training_scores(&ids, &grids, &bank, &unsampled_of(&trace)).unwrap();
        assert_eq!(ts.scores, vec![0.0; 3]);
        assert!(ts.flagged.iter().all(|&f| f));
    }

    #[test]
    fn unsampled_score_bounded_by_full_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let grids: Vec<FeatureGrid> = (0..6)
            .map(|_| {
                let p: Vec<Vec<f32>> = (0..16).map(|_| (0..3).map(|_| normal.sample(&mut rng) as f32).collect()).collect();
                FeatureGrid::from_patches(4, 4, &p).unwrap()
            })
            .collect();
        let feats = crate::coreset::patches_from_grids(&grids);
        let trace = build_coreset(&feats, 0.2, None, StartRule::MaxNorm).unwrap();
        let bank = MemoryBank::from_trace(&trace).unwrap();
        let un = unsampled_of(&trace);
        let ids: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        let ts = training_scores(&ids, &grids, &bank, &un).unwrap();
        for (i, g) in grids.iter().enumerate() {
            let sg = crate::scoring::score_grid(g, &bank).unwrap();
            let full = crate::scoring::image_score(&sg).unwrap();
            assert!(ts.scores[i] <= full.value);
            let j = full.argmax_patch.0 * 4 + full.argmax_patch.1;
            if un.of_image(i).contains(&j) {
                assert_eq!(ts.scores[i], full.value);
            }
        }
        let _ = PatchFeature { vector: vec![], source_image: 0, source_patch: 0 };
    }

    proptest! {
        #[test]
        fn tau_monotone_in_kappa(xs in prop::collection::vec(0.0f64..10.0, 2..40), k1 in 0.0f64..5.0, dk in 0.0f64..5.0) {
            let ts = TrainingScoreSet::from_scores(xs);
            let a = fit_threshold(&ts, k1).unwrap();
            let b = fit_threshold(&ts, k1 + dk).unwrap();
            prop_assert!(b.tau >= a.tau);
            prop_assert_eq!(a.tau, a.mu + k1 * a.sigma);
            prop_assert!(ts.scores.iter().all(|&s| s <= a.s_max));
        }

        #[test]
        fn decisions_monotone_in_score(tau in 0.0f64..5.0, extra in 0.0f64..5.0, s1 in 0.0f64..12.0, ds in 0.0f64..5.0) {
            let m = model(tau, tau + extra);
            let a = classify(s1, &m);
            let b = classify(s1 + ds, &m);
            prop_assert!(!(a.decision == Decision::Abnormal && b.decision == Decision::Normal));
            prop_assert_eq!(a.decision == Decision::Abnormal, s1 >= tau);
        }
    }
}
