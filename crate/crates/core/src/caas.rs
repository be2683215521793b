//! Confidence-aware attention scaling on a deterministic toy attention stack.
//!
//! The stack has only residual multi-head attention:
//!
//! ```text
//! x_i^l = x_i^{l-1} + Σ_h Σ_{j≤i} A^{l,h}_{i,j} · x_j^{l-1} W_V^{l,h}
//! ```
//!
//! Attention is a causal softmax of scaled dot products. When the expert
//! score falls in `[τ, s_max]`, weights on visual-token columns are
//! multiplied by `1 + α` after the softmax in layers `lo..=hi` (1-based).
//!
//! Residual stream layout, chosen so the scenario is readable:
//!
//! | dim | meaning                                                       |
//! |-----|---------------------------------------------------------------|
//! | 0   | evidence for the correct answer (defect present)              |
//! | 1   | evidence for the incorrect answer                             |
//! | 2   | constant 1, the query bias                                    |
//! | 3   | tag: `+salience` on visual tokens, `−strength` on the prior   |
//! | 4.. | random content features                                       |
//!
//! Query/key weights read dims 2.. only and value weights write dims 0–1
//! only, so the tag never drifts and the per-layer attention schedule
//! (diffuse early, on the defect region mid-stack, on the textual prior
//! late) is fixed by the seed.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dbt::ThresholdModel;

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_BETA: f64 = -0.4;
pub const DEFAULT_LAYERS: (usize, usize) = (9, 15);

const DIM_CORRECT: usize = 0;
const DIM_INCORRECT: usize = 1;
const DIM_BIAS: usize = 2;
const DIM_TAG: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum CaasError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("ground-truth region is empty; attention ratio undefined")]
    EmptyGroundTruth,
}

pub type Result<T> = std::result::Result<T, CaasError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_visual: usize,
    pub n_text: usize,
    /// Visual tokens covering the true defect region.
    pub ground_truth: BTreeSet<usize>,
    /// Text tokens that carry the expert's textual prior.
    pub prior_indices: BTreeSet<usize>,
}

impl TokenLayout {
    /// Visual tokens first, then text; the prior is the first text token and
    /// the answer is generated at the last position.
    pub fn new(n_visual: usize, n_text: usize, ground_truth: impl IntoIterator<Item = usize>) -> Result<Self> {
        let layout = Self {
            n_visual,
            n_text,
            ground_truth: ground_truth.into_iter().collect(),
            prior_indices: BTreeSet::from([n_visual]),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_visual == 0 || self.n_text < 2 {
            return Err(CaasError::InvalidDimensions(
                "need at least one visual token and two text tokens".into(),
            ));
        }
        if self.ground_truth.iter().any(|&g| g >= self.n_visual) {
            return Err(CaasError::InvalidDimensions(
                "ground-truth indices must be visual tokens".into(),
            ));
        }
        let seq = self.seq_len();
        if self
            .prior_indices
            .iter()
            .any(|&p| p < self.n_visual || p >= seq - 1)
        {
            return Err(CaasError::InvalidDimensions(
                "prior tokens must be text tokens before the answer position".into(),
            ));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.n_visual + self.n_text
    }

    pub fn is_visual(&self, j: usize) -> bool {
        j < self.n_visual
    }

    pub fn answer_position(&self) -> usize {
        self.seq_len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorBias {
    Correct,
    Misleading,
    None,
}

impl std::str::FromStr for PriorBias {
    type Err = CaasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(Self::Correct),
            "misleading" => Ok(Self::Misleading),
            "none" => Ok(Self::None),
            other => Err(CaasError::InvalidConfig(format!("unknown prior {other:?}"))),
        }
    }
}

/// Ranges the per-seed scenario draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    /// Correct-answer evidence carried by each defect-region token.
    pub evidence: (f64, f64),
    /// Strength of the textual prior token.
    pub prior_strength: (f64, f64),
    /// Tag of defect-region tokens; background tokens get `background_salience`.
    pub defect_salience: (f64, f64),
    pub background_salience: f64,
    /// Peak mid-stack affinity for high-salience visual tokens.
    pub visual_affinity: (f64, f64),
    /// Late-stack affinity for the prior token.
    pub prior_affinity: (f64, f64),
    /// Per-head value gain on the answer dims, before division by head count.
    pub value_gain: f64,
    pub content_noise: f64,
    /// Depth (fraction of layers) where visual affinity peaks.
    pub visual_peak: f64,
    pub visual_width: f64,
    /// Depth where the prior takes over.
    pub prior_onset: f64,
    pub prior_sharpness: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            evidence: (0.6, 1.4),
            prior_strength: (2.0, 5.0),
            defect_salience: (0.6, 1.6),
            background_salience: 0.3,
            visual_affinity: (2.0, 5.0),
            prior_affinity: (5.0, 9.0),
            value_gain: 0.15,
            content_noise: 0.3,
            visual_peak: 0.375,
            visual_width: 0.15,
            prior_onset: 0.55,
            prior_sharpness: 0.06,
        }
    }
}

/// Seeded weights and input embeddings of the toy stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub layout: TokenLayout,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub seed: u64,
    pub prior_bias: PriorBias,
    /// `x^0`, `seq × d`.
    pub embeddings: Matrix,
    /// `[layer][head]`, each `d × d`; layer 0 here is layer 1 of the stack.
    pub w_q: Vec<Vec<Matrix>>,
    pub w_k: Vec<Vec<Matrix>>,
    pub w_v: Vec<Vec<Matrix>>,
    /// `d × 2` probe onto (correct, incorrect) answer logits.
    pub unembedding: Matrix,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn build_stack(
    layout: &TokenLayout,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    seed: u64,
    prior_bias: PriorBias,
) -> Result<AttentionStack> {
    build_stack_with(layout, n_layers, n_heads, d_model, seed, prior_bias, &ScenarioParams::default())
}

pub fn build_stack_with(
    layout: &TokenLayout,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    seed: u64,
    prior_bias: PriorBias,
    params: &ScenarioParams,
) -> Result<AttentionStack> {
    layout.validate()?;
    if d_model < 4 || n_layers == 0 || n_heads == 0 {
        return Err(CaasError::InvalidDimensions(format!(
            "layers={n_layers} heads={n_heads} d={d_model} (need d >= 4 and positive counts)"
        )));
    }
    let d = d_model;
    let seq = layout.seq_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.content_noise.max(0.0)).unwrap();

    let evidence = uniform(&mut rng, params.evidence);
    let prior_strength = uniform(&mut rng, params.prior_strength);
    let salience = uniform(&mut rng, params.defect_salience);
    let visual_affinity = uniform(&mut rng, params.visual_affinity);
    let prior_affinity = uniform(&mut rng, params.prior_affinity);

    let mut x = Matrix::zeros(seq, d);
    for i in 0..seq {
        x.set(i, DIM_BIAS, 1.0);
        for c in 4..d {
            x.set(i, c, noise.sample(&mut rng));
        }
        if layout.is_visual(i) {
            if layout.ground_truth.contains(&i) {
                x.set(i, DIM_CORRECT, evidence);
                x.set(i, DIM_TAG, salience);
            } else {
                x.set(i, DIM_TAG, params.background_salience);
            }
        } else if layout.prior_indices.contains(&i) {
            match prior_bias {
                PriorBias::Correct => {
                    x.set(i, DIM_CORRECT, prior_strength);
                    x.set(i, DIM_TAG, -1.0);
                }
                PriorBias::Misleading => {
                    x.set(i, DIM_INCORRECT, prior_strength);
                    x.set(i, DIM_TAG, -1.0);
                }
                PriorBias::None => {}
            }
        }
    }

    let scale = (d as f64).sqrt();
    let mut w_q = Vec::with_capacity(n_layers);
    let mut w_k = Vec::with_capacity(n_layers);
    let mut w_v = Vec::with_capacity(n_layers);
    for l in 1..=n_layers {
        let depth = l as f64 / n_layers as f64;
        let bump = (-((depth - params.visual_peak) / params.visual_width).powi(2)).exp();
        let late = 1.0 / (1.0 + (-(depth - params.prior_onset) / params.prior_sharpness).exp());
        let affinity = visual_affinity * bump - prior_affinity * late;
        let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n_heads {
            let jitter = 1.0 + 0.1 * rng.random_range(-1.0..1.0);
            let mut q = Matrix::zeros(d, d);
            let mut k = Matrix::zeros(d, d);
            // bias · tag carries the schedule; the √d cancels the score scaling
            q.set(DIM_BIAS, DIM_TAG, affinity * jitter * scale);
            k.set(DIM_TAG, DIM_TAG, 1.0);
            for r in 4..d {
                for c in 4..d {
                    q.set(r, c, noise.sample(&mut rng));
                    k.set(r, c, noise.sample(&mut rng));
                }
            }
            let mut v = Matrix::zeros(d, d);
            let gain = params.value_gain / n_heads as f64 * (1.0 + 0.1 * rng.random_range(-1.0..1.0));
            v.set(DIM_CORRECT, DIM_CORRECT, gain);
            v.set(DIM_INCORRECT, DIM_INCORRECT, gain);
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        w_q.push(qs);
        w_k.push(ks);
        w_v.push(vs);
    }

    let mut unembedding = Matrix::zeros(d, 2);
    unembedding.set(DIM_CORRECT, 0, 1.0);
    unembedding.set(DIM_INCORRECT, 1, 1.0);

    Ok(AttentionStack {
        layout: layout.clone(),
        n_layers,
        n_heads,
        d_model,
        seed,
        prior_bias,
        embeddings: x,
        w_q,
        w_k,
        w_v,
        unembedding,
    })
}

/// Lower-triangular row-stochastic `softmax(Q Kᵀ / √d)`.
pub fn causal_attention(x: &Matrix, w_q: &Matrix, w_k: &Matrix) -> Matrix {
    let q = x.matmul(w_q);
    let k = x.matmul(w_k);
    let seq = x.rows;
    let scale = (x.cols as f64).sqrt();
    let mut a = Matrix::zeros(seq, seq);
    for i in 0..seq {
        let logits: Vec<f64> = (0..=i)
            .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / scale)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            a.set(i, j, e / total);
        }
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaasConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Also scale textual-prior columns by `1 + beta`.
    pub suppress_prior: bool,
    /// Inclusive, 1-based.
    pub layers: (usize, usize),
    pub renormalize: bool,
    /// Low-confidence interval `[tau, s_max]`.
    pub gate: (f64, f64),
}

impl Default for CaasConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            suppress_prior: false,
            layers: DEFAULT_LAYERS,
            renormalize: false,
            gate: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

impl CaasConfig {
    pub fn with_threshold(mut self, model: &ThresholdModel) -> Self {
        self.gate = (model.tau, model.s_max);
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let (lo, hi) = self.layers;
        if lo == 0 || lo > hi || hi > n_layers {
            return Err(CaasError::InvalidConfig(format!(
                "layer range {lo}:{hi} invalid for {n_layers} layers"
            )));
        }
        if !positive(1.0 + self.alpha) || !positive(1.0 + self.beta) {
            return Err(CaasError::InvalidConfig("need 1+alpha > 0 and 1+beta > 0".into()));
        }
        Ok(())
    }

    pub fn gate_open(&self, s_img: f64) -> bool {
        self.gate.0 <= s_img && s_img <= self.gate.1
    }

    pub fn covers_layer(&self, layer: usize) -> bool {
        (self.layers.0..=self.layers.1).contains(&layer)
    }
}

fn positive(x: f64) -> bool {
    x.partial_cmp(&0.0) == Some(std::cmp::Ordering::Greater)
}

/// Scales the masked entries of one attention row by `factor`, optionally
/// renormalising the row to sum to one.
pub fn scale_attention_row(row: &mut [f64], mask: impl Fn(usize) -> bool, factor: f64, renormalize: bool) {
    for (j, a) in row.iter_mut().enumerate() {
        if mask(j) {
            *a *= factor;
        }
    }
    if renormalize {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|a| *a /= total);
        }
    }
}

fn intervene(a: &mut Matrix, layout: &TokenLayout, cfg: &CaasConfig) {
    for i in 0..a.rows {
        let row = &mut a.row_mut(i)[..=i];
        if cfg.alpha != 0.0 {
            scale_attention_row(row, |j| layout.is_visual(j), 1.0 + cfg.alpha, false);
        }
        if cfg.suppress_prior && cfg.beta != 0.0 {
            scale_attention_row(row, |j| layout.prior_indices.contains(&j), 1.0 + cfg.beta, false);
        }
        if cfg.renormalize {
            scale_attention_row(row, |_| false, 1.0, true);
        }
    }
}

/// Per-layer answer probabilities read at the answer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDynamics {
    /// `(p_correct, p_incorrect)` after each layer, index 0 = layer 1.
    pub probs: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub dynamics: LayerDynamics,
    pub correct: bool,
    pub gate_open: bool,
    /// `x^0 ..= x^L`.
    pub hidden: Vec<Matrix>,
    /// Softmax output per `[layer][head]`, before any intervention.
    pub attention_raw: Vec<Vec<Matrix>>,
    /// Weights actually used per `[layer][head]`.
    pub attention: Vec<Vec<Matrix>>,
}

fn probe(stack: &AttentionStack, h: &[f64]) -> (f64, f64) {
    let logit = |c: usize| (0..stack.d_model).map(|k| h[k] * stack.unembedding.get(k, c)).sum::<f64>();
    let (zc, zi) = (logit(0), logit(1));
    let m = zc.max(zi);
    let (ec, ei) = ((zc - m).exp(), (zi - m).exp());
    (ec / (ec + ei), ei / (ec + ei))
}

/// Runs every layer. `caas` carries the config and the expert score; the
/// intervention only happens when the score lies inside the config gate.
pub fn forward(stack: &AttentionStack, caas: Option<(&CaasConfig, f64)>) -> ForwardPass {
    let active = caas.filter(|(cfg, s)| cfg.gate_open(*s)).map(|(cfg, _)| cfg);
    let layout = &stack.layout;
    let last = layout.answer_position();
    let mut x = stack.embeddings.clone();
    let mut hidden = vec![x.clone()];
    let mut attention_raw = Vec::with_capacity(stack.n_layers);
    let mut attention = Vec::with_capacity(stack.n_layers);
    let mut probs = Vec::with_capacity(stack.n_layers);

    for l in 0..stack.n_layers {
        let layer = l + 1;
        let mut delta = Matrix::zeros(x.rows, x.cols);
        let mut raw_heads = Vec::with_capacity(stack.n_heads);
        let mut used_heads = Vec::with_capacity(stack.n_heads);
        for h in 0..stack.n_heads {
            let raw = causal_attention(&x, &stack.w_q[l][h], &stack.w_k[l][h]);
            let mut a = raw.clone();
            if let Some(cfg) = active.filter(|c| c.covers_layer(layer)) {
                intervene(&mut a, layout, cfg);
            }
            let contrib = a.matmul(&x).matmul(&stack.w_v[l][h]);
            delta.data.iter_mut().zip(&contrib.data).for_each(|(d, c)| *d += c);
            raw_heads.push(raw);
            used_heads.push(a);
        }
        x.data.iter_mut().zip(&delta.data).for_each(|(v, d)| *v += d);
        probs.push(probe(stack, x.row(last)));
        hidden.push(x.clone());
        attention_raw.push(raw_heads);
        attention.push(used_heads);
    }

    let correct = probs.last().is_some_and(|(c, i)| c > i);
    ForwardPass {
        dynamics: LayerDynamics { probs },
        correct,
        gate_open: active.is_some(),
        hidden,
        attention_raw,
        attention,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRatioReport {
    /// `AR^(l)`, index 0 = layer 1.
    pub ratios: Vec<f64>,
}

impl AttentionRatioReport {
    pub fn mean(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len().max(1) as f64
    }
}

/// Share of the answer position's head-averaged image attention that lands
/// on the ground-truth region, per layer.
pub fn attention_ratio(pass: &ForwardPass, layout: &TokenLayout) -> Result<AttentionRatioReport> {
    if layout.ground_truth.is_empty() {
        return Err(CaasError::EmptyGroundTruth);
    }
    let last = layout.answer_position();
    let ratios = pass
        .attention
        .iter()
        .map(|heads| {
            let n = heads.len() as f64;
            let mean = |p: usize| heads.iter().map(|a| a.get(last, p)).sum::<f64>() / n;
            let on_region: f64 = layout.ground_truth.iter().map(|&p| mean(p)).sum();
            let on_image: f64 = (0..layout.n_visual).map(mean).sum();
            if on_image > 0.0 {
                on_region / on_image
            } else {
                0.0
            }
        })
        .collect();
    Ok(AttentionRatioReport { ratios })
}

/// Shape of a seeded scenario family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioArgs {
    pub n_visual: usize,
    pub n_text: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub prior: PriorBias,
    pub base_seed: u64,
    pub params: ScenarioParams,
}

impl Default for ScenarioArgs {
    fn default() -> Self {
        Self {
            n_visual: 16,
            n_text: 6,
            n_layers: 32,
            n_heads: 4,
            d_model: 16,
            prior: PriorBias::Misleading,
            base_seed: 0,
            params: ScenarioParams::default(),
        }
    }
}

impl ScenarioArgs {
    /// Layout for trial `t`: a random contiguous defect region of the
    /// visual grid (treated as a square when possible).
    pub fn layout(&self, seed: u64) -> Result<TokenLayout> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let side = (self.n_visual as f64).sqrt().floor().max(1.0) as usize;
        let rows = self.n_visual / side;
        let rh = rng.random_range(1..=rows.div_ceil(3).max(1));
        let rw = rng.random_range(1..=side.div_ceil(3).max(1));
        let r0 = rng.random_range(0..=rows - rh);
        let c0 = rng.random_range(0..=side - rw);
        let region = (r0..r0 + rh).flat_map(|r| (c0..c0 + rw).map(move |c| r * side + c));
        TokenLayout::new(self.n_visual, self.n_text, region)
    }

    pub fn seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }

    pub fn build(&self, trial: usize) -> Result<AttentionStack> {
        let seed = self.seed(trial);
        build_stack_with(
            &self.layout(seed)?,
            self.n_layers,
            self.n_heads,
            self.d_model,
            seed,
            self.prior,
            &self.params,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Fraction of trials whose final prediction is correct.
    pub flip_rate: f64,
    pub correct: usize,
    pub trials: usize,
}

/// Runs `trials` seeded scenarios per α with the gate held open.
pub fn sweep_alpha(args: &ScenarioArgs, template: &CaasConfig, alphas: &[f64], trials: usize) -> Result<Vec<SweepRow>> {
    if trials == 0 {
        return Err(CaasError::InvalidConfig("trials must be >= 1".into()));
    }
    let stacks: Vec<AttentionStack> = (0..trials).map(|t| args.build(t)).collect::<Result<_>>()?;
    alphas
        .iter()
        .map(|&alpha| {
            let cfg = CaasConfig {
                alpha,
                gate: (f64::NEG_INFINITY, f64::INFINITY),
                ..*template
            };
            cfg.validate(args.n_layers)?;
            let correct = stacks
                .par_iter()
                .filter(|s| forward(s, Some((&cfg, 0.0))).correct)
                .count();
            Ok(SweepRow {
                alpha,
                flip_rate: correct as f64 / trials as f64,
                correct,
                trials,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AttentionStack {
        let layout = TokenLayout::new(6, 4, [2, 3]).unwrap();
        build_stack(&layout, 16, 2, 8, 3, PriorBias::Misleading).unwrap()
    }

    #[test]
    fn row_scaling_example() {
        let mut row = [0.25; 4];
        scale_attention_row(&mut row, |j| j < 2, 1.6, false);
        assert!((row[0] - 0.4).abs() < 1e-15 && (row[1] - 0.4).abs() < 1e-15);
        assert_eq!(&row[2..], &[0.25, 0.25]);
        assert!((row.iter().sum::<f64>() - 1.3).abs() < 1e-12);
        scale_attention_row(&mut row, |_| false, 1.0, true);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_when_scores_constant() {
        let x = Matrix { rows: 4, cols: 4, data: vec![1.0; 16] };
        let mut w = Matrix::zeros(4, 4);
        w.set(0, 0, 1.0);
        let a = causal_attention(&x, &w, &w);
        for i in 0..4 {
            for j in 0..4 {
                let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((a.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_build() {
        assert_eq!(small(), small());
        let layout = TokenLayout::new(6, 4, [2]).unwrap();
        let other = build_stack(&layout, 16, 2, 8, 4, PriorBias::Misleading).unwrap();
        assert_ne!(small().embeddings, other.embeddings);
    }

    #[test]
    fn rejects_bad_shapes() {
        let layout = TokenLayout::new(6, 4, [2]).unwrap();
        assert!(build_stack(&layout, 16, 2, 3, 0, PriorBias::None).is_err());
        assert!(TokenLayout::new(4, 3, [5]).is_err());
        assert!(TokenLayout::new(4, 1, [1]).is_err());
        let cfg = CaasConfig { layers: (9, 20), ..Default::default() };
        assert!(cfg.validate(16).is_err());
        let cfg = CaasConfig { alpha: -1.0, ..Default::default() };
        assert!(cfg.validate(16).is_err());
        assert!(CaasConfig::default().validate(16).is_ok());
    }

    #[test]
    fn gate_closed_is_bit_identical() {
        let s = small();
        let base = forward(&s, None);
        let cfg = CaasConfig { gate: (1.0, 2.0), ..Default::default() };
        let closed = forward(&s, Some((&cfg, 0.5)));
        assert!(!closed.gate_open);
        assert_eq!(base.hidden, closed.hidden);
        assert_eq!(base.dynamics, closed.dynamics);
        let zero = CaasConfig { alpha: 0.0, ..cfg };
        let open = forward(&s, Some((&zero, 1.5)));
        assert!(open.gate_open);
        assert_eq!(base.hidden, open.hidden);
    }

    #[test]
    fn causality_before_and_after() {
        let s = small();
        let p = forward(&s, Some((&CaasConfig::default(), 0.0)));
        for (raw_l, used_l) in p.attention_raw.iter().zip(&p.attention) {
            for (raw, used) in raw_l.iter().zip(used_l) {
                for i in 0..raw.rows {
                    for j in i + 1..raw.cols {
                        assert_eq!(raw.get(i, j), 0.0);
                        assert_eq!(used.get(i, j), 0.0);
                    }
                    assert!((raw.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn renormalized_rows_stay_stochastic() {
        let s = small();
        let cfg = CaasConfig { renormalize: true, suppress_prior: true, ..Default::default() };
        let p = forward(&s, Some((&cfg, 0.0)));
        for a in &p.attention[9] {
            for i in 0..a.rows {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_suppression_scales_prior_column() {
        let s = small();
        let cfg = CaasConfig { alpha: 0.0, suppress_prior: true, ..Default::default() };
        let p = forward(&s, Some((&cfg, 0.0)));
        let prior = *s.layout.prior_indices.first().unwrap();
        let (raw, used) = (&p.attention_raw[10][0], &p.attention[10][0]);
        let last = s.layout.answer_position();
        assert!((used.get(last, prior) - 0.6 * raw.get(last, prior)).abs() < 1e-15);
        assert_eq!(used.get(last, 0), raw.get(last, 0));
    }

    #[test]
    fn probe_pairs_sum_to_one() {
        for (c, i) in forward(&small(), None).dynamics.probs {
            assert!((c + i - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn no_prior_predicts_correct() {
        let layout = TokenLayout::new(16, 6, [5, 6, 9, 10]).unwrap();
        for seed in 0..10 {
            let s = build_stack(&layout, 16, 4, 8, seed, PriorBias::None).unwrap();
            let p = forward(&s, None);
            assert!(p.dynamics.probs.last().unwrap().0 > 0.5, "seed {seed}");
        }
    }

    #[test]
    fn attention_ratio_definition() {
        let layout = TokenLayout::new(4, 2, [2, 3]).unwrap();
        let mut a = Matrix::zeros(6, 6);
        a.row_mut(5).copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.0, 0.0]);
        let pass = ForwardPass {
            dynamics: LayerDynamics { probs: vec![] },
            correct: false,
            gate_open: false,
            hidden: vec![],
            attention_raw: vec![],
            attention: vec![vec![a.clone(), a]],
        };
        let r = attention_ratio(&pass, &layout).unwrap();
        assert!((r.ratios[0] - 0.7).abs() < 1e-12);
        let all = TokenLayout::new(4, 2, [0, 1, 2, 3]).unwrap();
        assert!((attention_ratio(&pass, &all).unwrap().ratios[0] - 1.0).abs() < 1e-12);
        let none = TokenLayout::new(4, 2, []).unwrap();
        assert_eq!(attention_ratio(&pass, &none), Err(CaasError::EmptyGroundTruth));
    }

    #[test]
    fn sweep_zero_alpha_is_baseline() {
        let args = ScenarioArgs { n_layers: 16, ..Default::default() };
        let rows = sweep_alpha(&args, &CaasConfig::default(), &[0.0], 20).unwrap();
        let baseline = (0..20).filter(|&t| forward(&args.build(t).unwrap(), None).correct).count();
        assert_eq!(rows[0].correct, baseline);
        assert!(sweep_alpha(&args, &CaasConfig::default(), &[0.0], 0).is_err());
    }
}
