//! Patch-feature grids on disk, local patch aggregation and a seeded
//! synthetic dataset generator.
//!
//! The `.eaglfeat` layout is:
//!
//! ```text
//! offset 0   8 bytes  magic "EAGLFEAT"
//! offset 8   u32 LE   C (channels)
//! offset 12  u32 LE   H (height)
//! offset 16  u32 LE   W (width)
//! offset 20  C*H*W    f32 LE, c-major, then h, then w
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 8] = b"EAGLFEAT";
pub const MASK_MAGIC: &[u8; 8] = b"EAGLMASK";
const HEADER_LEN: usize = 8 + 12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid shape {channels}x{height}x{width} for {len} values")]
    InvalidShape {
        channels: usize,
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A C×H×W patch-feature tensor for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width
        {
            return Err(FeatureError::InvalidShape {
                channels,
                height,
                width,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { index });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a grid from per-location vectors given in row-major (h, w) order.
    pub fn from_patches(height: usize, width: usize, patches: &[Vec<f32>]) -> Result<Self> {
        let channels = patches.first().map_or(0, Vec::len);
        if patches.len() != height * width || patches.iter().any(|p| p.len() != channels) {
            return Err(FeatureError::InvalidShape {
                channels,
                height,
                width,
                len: patches.iter().map(Vec::len).sum(),
            });
        }
        let hw = height * width;
        let mut data = vec![0.0f32; channels * hw];
        for (loc, patch) in patches.iter().enumerate() {
            for (c, &v) in patch.iter().enumerate() {
                data[c * hw + loc] = v;
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// Channel vector at flat patch index `j = h * W + w`.
    pub fn patch(&self, j: usize) -> Vec<f32> {
        let hw = self.num_patches();
        (0..self.channels).map(|c| self.data[c * hw + j]).collect()
    }

    /// All patch vectors in row-major (h, w) order.
    pub fn patches(&self) -> Vec<Vec<f32>> {
        (0..self.num_patches()).map(|j| self.patch(j)).collect()
    }

    /// Row-major flat buffer of patch vectors: `num_patches × channels`.
    pub fn patch_matrix(&self) -> Vec<f32> {
        let hw = self.num_patches();
        let mut out = vec![0.0f32; hw * self.channels];
        for c in 0..self.channels {
            let plane = &self.data[c * hw..(c + 1) * hw];
            for (j, &v) in plane.iter().enumerate() {
                out[j * self.channels + c] = v;
            }
        }
        out
    }

    /// Channel-wise mean over all spatial locations.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let hw = self.num_patches();
        (0..self.channels)
            .map(|c| {
                self.data[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>()
                    / hw as f64
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(FEATURE_MAGIC);
        for dim in [self.channels, self.height, self.width] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
            return Err(FeatureError::BadMagic {
                expected: "EAGLFEAT",
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FeatureError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let dim = |k: usize| {
            let off = 8 + 4 * k;
            u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
        };
        let (channels, height, width) = (dim(0), dim(1), dim(2));
        let count = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or(FeatureError::InvalidShape {
                channels,
                height,
                width,
                len: 0,
            })?;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() < expected {
            return Err(FeatureError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes[HEADER_LEN..expected]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(channels, height, width, data)
    }
}

pub fn load_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    FeatureGrid::from_bytes(&bytes)
}

pub fn save_feature_grid(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&grid.to_bytes()))
        .map_err(io_err(path))
}

/// Locally aware patch aggregation: channel-wise mean over a
/// `patchsize × patchsize` window centred on each sampled location.
///
/// Borders are zero padded and the mean always divides by `patchsize²`, so a
/// corner of a constant grid shrinks towards zero. Output size is
/// `ceil(H / stride) × ceil(W / stride)`.
pub fn aggregate_patches(grid: &FeatureGrid, patchsize: usize, stride: usize) -> Result<FeatureGrid> {
    if patchsize == 0 || patchsize.is_multiple_of(2) {
        return Err(FeatureError::InvalidArgument(format!(
            "patchsize must be odd and positive, got {patchsize}"
        )));
    }
    if patchsize > grid.height.min(grid.width) {
        return Err(FeatureError::InvalidArgument(format!(
            "patchsize {patchsize} exceeds grid {}x{}",
            grid.height, grid.width
        )));
    }
    if stride == 0 {
        return Err(FeatureError::InvalidArgument("stride must be positive".into()));
    }
    let (h_in, w_in) = (grid.height, grid.width);
    let h_out = h_in.div_ceil(stride);
    let w_out = w_in.div_ceil(stride);
    let radius = (patchsize / 2) as isize;
    let norm = (patchsize * patchsize) as f64;
    let mut data = vec![0.0f32; grid.channels * h_out * w_out];
    for c in 0..grid.channels {
        for oh in 0..h_out {
            for ow in 0..w_out {
                let (ch, cw) = ((oh * stride) as isize, (ow * stride) as isize);
                let mut acc = 0.0f64;
                for dh in -radius..=radius {
                    let h = ch + dh;
                    if h < 0 || h >= h_in as isize {
                        continue;
                    }
                    for dw in -radius..=radius {
                        let w = cw + dw;
                        if w < 0 || w >= w_in as isize {
                            continue;
                        }
                        acc += f64::from(grid.get(c, h as usize, w as usize));
                    }
                }
                data[(c * h_out + oh) * w_out + ow] = (acc / norm) as f32;
            }
        }
    }
    FeatureGrid::new(grid.channels, h_out, w_out, data)
}

/// Binary pixel mask marking anomalous pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl GroundTruthMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `EAGLMASK` magic, u32 LE height and width, then one byte (0/1) per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.mask.len());
        buf.extend_from_slice(MASK_MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend(self.mask.iter().map(|&m| u8::from(m)));
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MASK_MAGIC {
            return Err(FeatureError::BadMagic {
                expected: "EAGLMASK",
            });
        }
        if bytes.len() < 16 {
            return Err(FeatureError::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = 16 + height * width;
        if bytes.len() < expected {
            return Err(FeatureError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        Ok(Self {
            height,
            width,
            mask: bytes[16..expected].iter().map(|&b| b != 0).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainNormal,
    TestNormal,
    TestAnomalous,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainNormal => "train_normal",
            Split::TestNormal => "test_normal",
            Split::TestAnomalous => "test_anomalous",
        }
    }

    pub fn manifest_file_name(self) -> String {
        format!("{}.manifest.json", self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_normal" | "train" => Ok(Split::TrainNormal),
            "test_normal" => Ok(Split::TestNormal),
            "test_anomalous" => Ok(Split::TestAnomalous),
            other => Err(FeatureError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub feature_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    /// Optional RGB image used for rendering visual prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(FeatureError::Manifest(format!(
                    "duplicate image_id {:?}",
                    e.image_id
                )));
            }
            if self.split == Split::TrainNormal && e.label != Label::Normal {
                return Err(FeatureError::Manifest(format!(
                    "training entry {:?} is not labeled normal",
                    e.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| FeatureError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| FeatureError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    /// Resolves an entry-relative path against the manifest's directory.
    pub fn resolve(root: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    }
}

/// Parameters of the seeded synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anom: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Length of the feature-space shift inside the defect rectangle, in
    /// units of `noise_std`.
    pub anomaly_shift: f64,
    /// Per-channel standard deviation of every mixture component.
    pub noise_std: f64,
    /// Number of appearance modes; each image draws one.
    pub components: usize,
    /// Dimension of each mode's variation subspace. Coordinates there are
    /// uniform with std `noise_std`; 0 makes the variation isotropic
    /// Gaussian in all channels instead.
    pub latent_dim: usize,
    /// Isotropic noise std relative to `noise_std`, added on top of the
    /// subspace variation.
    pub ambient_ratio: f64,
    /// Each image's noise is scaled by a factor drawn from
    /// `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    /// Smallest defect side in patches; the largest is a quarter of the grid.
    pub min_defect_side: usize,
    /// Image pixels per patch cell along each axis; masks are stored at
    /// `height * pixels_per_patch × width * pixels_per_patch`.
    pub pixels_per_patch: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 40,
            n_test_normal: 50,
            n_test_anom: 50,
            channels: 16,
            height: 14,
            width: 14,
            anomaly_shift: 10.0,
            noise_std: 1.0,
            components: 4,
            latent_dim: 2,
            ambient_ratio: 0.0,
            scale_jitter: 0.0,
            min_defect_side: 2,
            pixels_per_patch: 8,
        }
    }
}

/// Manifests written by [`generate_synthetic_dataset`].
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: DatasetManifest,
    pub test_normal: DatasetManifest,
    pub test_anomalous: DatasetManifest,
}

/// In-memory draw of the synthetic generator (no files).
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image_id: String,
    pub grid: FeatureGrid,
    pub label: Label,
    /// Defect rectangle in patch-grid coordinates `(h0, w0, h1, w1)`, inclusive.
    pub defect: Option<(usize, usize, usize, usize)>,
}

struct Mixture {
    means: Vec<Vec<f64>>,
    /// Orthonormal basis of each mode's variation subspace; empty means
    /// isotropic variation.
    bases: Vec<Vec<Vec<f64>>>,
    weights: Vec<f64>,
    noise: Normal<f64>,
    /// Subspace coordinates are uniform on `[-w, w]` with std `noise_std`.
    latent_half_width: f64,
    ambient: Normal<f64>,
    shift_dir: Vec<f64>,
}

/// Removes from `v` its components along the orthonormal `basis`, then
/// appends the normalised remainder to `basis` when it is not negligible.
fn gram_schmidt_push(basis: &mut Vec<Vec<f64>>, mut v: Vec<f64>) {
    for q in basis.iter() {
        let d = dot(&v, q);
        v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
    }
    let n = dot(&v, &v).sqrt();
    if n > 1e-9 {
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
}

impl Mixture {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.components.max(1);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..spec.channels).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let unit = Normal::new(0.0, 1.0).unwrap();
        let r = spec.latent_dim.min(spec.channels);
        let bases: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| {
                let mut b = Vec::new();
                while r > 0 && b.len() < r {
                    gram_schmidt_push(&mut b, (0..spec.channels).map(|_| unit.sample(rng)).collect());
                }
                b
            })
            .collect();
        let raw_dir: Vec<f64> = (0..spec.channels).map(|_| unit.sample(rng)).collect();
        // keep the defect direction off the means and the variation subspaces
        let mut span = Vec::new();
        for v in means.iter().chain(bases.iter().flatten()) {
            gram_schmidt_push(&mut span, v.clone());
        }
        let mut dirs = span.clone();
        gram_schmidt_push(&mut dirs, raw_dir.clone());
        let shift_dir = if dirs.len() > span.len() {
            dirs.pop().unwrap()
        } else {
            let n = dot(&raw_dir, &raw_dir).sqrt().max(f64::MIN_POSITIVE);
            raw_dir.iter().map(|v| v / n).collect()
        };
        let std = spec.noise_std.max(0.0);
        Self {
            means,
            bases,
            weights,
            noise: Normal::new(0.0, std).unwrap(),
            latent_half_width: std * 3f64.sqrt(),
            ambient: Normal::new(0.0, std * spec.ambient_ratio.max(0.0)).unwrap(),
            shift_dir,
        }
    }

    fn draw_mode(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    fn draw_patch(&self, rng: &mut ChaCha8Rng, mode: usize, scale: f64) -> Vec<f64> {
        let basis = &self.bases[mode];
        if basis.is_empty() {
            return self.means[mode]
                .iter()
                .map(|m| m + scale * self.noise.sample(rng))
                .collect();
        }
        let mut v = self.means[mode].clone();
        for q in basis {
            let z = scale * self.latent_half_width * rng.random_range(-1.0..=1.0);
            v.iter_mut().zip(q).for_each(|(x, b)| *x += z * b);
        }
        for x in v.iter_mut() {
            *x += scale * self.ambient.sample(rng);
        }
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws the whole synthetic dataset in memory. Fully determined by `spec`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    if spec.anomaly_shift.is_nan() || spec.anomaly_shift < 0.0 {
        return Err(FeatureError::InvalidArgument("anomaly_shift must be >= 0".into()));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(FeatureError::InvalidArgument("grid shape must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mixture = Mixture::new(spec, &mut rng);
    let (h, w) = (spec.height, spec.width);
    let mut out = Vec::with_capacity(spec.n_train + spec.n_test_normal + spec.n_test_anom);

    let jitter = spec.scale_jitter.clamp(0.0, 0.99);
    let draw_grid = |rng: &mut ChaCha8Rng, defect: Option<(usize, usize, usize, usize)>| {
        let mode = mixture.draw_mode(rng);
        let scale = if jitter > 0.0 {
            rng.random_range(1.0 - jitter..=1.0 + jitter)
        } else {
            1.0
        };
        let patches: Vec<Vec<f32>> = (0..h * w)
            .map(|j| {
                let mut v = mixture.draw_patch(rng, mode, scale);
                if let Some((h0, w0, h1, w1)) = defect {
                    let (ph, pw) = (j / w, j % w);
                    if (h0..=h1).contains(&ph) && (w0..=w1).contains(&pw) {
                        for (x, d) in v.iter_mut().zip(&mixture.shift_dir) {
                            *x += spec.anomaly_shift * spec.noise_std * d;
                        }
                    }
                }
                v.into_iter().map(|x| x as f32).collect()
            })
            .collect();
        FeatureGrid::from_patches(h, w, &patches)
    };

    for i in 0..spec.n_train {
        out.push(SyntheticSample {
            image_id: format!("train_{i:04}"),
            grid: draw_grid(&mut rng, None)?,
            label: Label::Normal,
            defect: None,
        });
    }
    for i in 0..spec.n_test_normal {
        out.push(SyntheticSample {
            image_id: format!("good_{i:04}"),
            grid: draw_grid(&mut rng, None)?,
            label: Label::Normal,
            defect: None,
        });
    }
    for i in 0..spec.n_test_anom {
        let side = |n: usize, rng: &mut ChaCha8Rng| {
            let lo = spec.min_defect_side.clamp(1, n);
            rng.random_range(lo..=(n / 4).clamp(lo, n))
        };
        let rect_h = side(h, &mut rng);
        let rect_w = side(w, &mut rng);
        let h0 = rng.random_range(0..=h - rect_h);
        let w0 = rng.random_range(0..=w - rect_w);
        let rect = (h0, w0, h0 + rect_h - 1, w0 + rect_w - 1);
        out.push(SyntheticSample {
            image_id: format!("defect_{i:04}"),
            grid: draw_grid(&mut rng, Some(rect))?,
            label: Label::Anomalous,
            defect: Some(rect),
        });
    }
    Ok(out)
}

/// Pixel-resolution mask for a patch-grid rectangle.
pub fn rect_mask(
    spec: &SyntheticSpec,
    rect: Option<(usize, usize, usize, usize)>,
) -> GroundTruthMask {
    let s = spec.pixels_per_patch.max(1);
    let mut mask = GroundTruthMask::empty(spec.height * s, spec.width * s);
    if let Some((h0, w0, h1, w1)) = rect {
        for y in h0 * s..(h1 + 1) * s {
            for x in w0 * s..(w1 + 1) * s {
                mask.mask[y * mask.width + x] = true;
            }
        }
    }
    mask
}

/// Writes the synthetic dataset under `root`: feature grids in `features/`,
/// masks in `masks/`, and one `<split>.manifest.json` per split.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, root: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let root = root.as_ref();
    let samples = synthesize(spec)?;
    for dir in ["features", "masks"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut train = DatasetManifest {
        split: Split::TrainNormal,
        entries: Vec::new(),
    };
    let mut test_normal = DatasetManifest {
        split: Split::TestNormal,
        entries: Vec::new(),
    };
    let mut test_anomalous = DatasetManifest {
        split: Split::TestAnomalous,
        entries: Vec::new(),
    };
    for (idx, s) in samples.iter().enumerate() {
        let feature_rel = format!("features/{}.eaglfeat", s.image_id);
        save_feature_grid(&s.grid, root.join(&feature_rel))?;
        let mask_path = if s.label == Label::Anomalous {
            let rel = format!("masks/{}.eaglmask", s.image_id);
            rect_mask(spec, s.defect).save(root.join(&rel))?;
            Some(rel)
        } else {
            None
        };
        let entry = ManifestEntry {
            image_id: s.image_id.clone(),
            feature_path: feature_rel,
            mask_path,
            image_path: None,
            label: s.label,
        };
        if idx < spec.n_train {
            train.entries.push(entry);
        } else if s.label == Label::Normal {
            test_normal.entries.push(entry);
        } else {
            test_anomalous.entries.push(entry);
        }
    }
    for m in [&train, &test_normal, &test_anomalous] {
        m.save(root.join(m.split.manifest_file_name()))?;
    }
    let spec_path = root.join("synthetic.json");
    let mut text = serde_json::to_string_pretty(spec).map_err(|e| FeatureError::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&spec_path, text).map_err(io_err(&spec_path))?;
    Ok(SyntheticDataset {
        train,
        test_normal,
        test_anomalous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(c: usize, h: usize, w: usize, v: f32) -> FeatureGrid {
        FeatureGrid::new(c, h, w, vec![v; c * h * w]).unwrap()
    }

    #[test]
    fn decodes_minimal_file() {
        let mut bytes = FEATURE_MAGIC.to_vec();
        for d in [2u32, 1, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let grid = FeatureGrid::from_bytes(&bytes).unwrap();
        assert_eq!(grid, FeatureGrid::new(2, 1, 1, vec![1.0, 2.0]).unwrap());
    }

    #[test]
    fn rejects_bad_magic_truncation_and_nan() {
        let grid = constant(2, 2, 2, 1.0);
        let mut bytes = grid.to_bytes();
        assert!(matches!(
            FeatureGrid::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FeatureError::Truncated { .. })
        ));
        assert!(matches!(
            FeatureGrid::from_bytes(&bytes[..10]),
            Err(FeatureError::Truncated { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(FeatureGrid::from_bytes(&bytes), Err(FeatureError::BadMagic { .. })));

        let mut bytes = grid.to_bytes();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            FeatureGrid::from_bytes(&bytes),
            Err(FeatureError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn file_round_trip_64x28x28() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..64 * 28 * 28).map(|_| rng.random_range(-5.0..5.0)).collect();
        let grid = FeatureGrid::new(64, 28, 28, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.eaglfeat");
        save_feature_grid(&grid, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = load_feature_grid(&path).unwrap();
        assert_eq!(back, grid);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn aggregation_constant_grid_borders() {
        let grid = constant(1, 3, 3, 5.0);
        let out = aggregate_patches(&grid, 3, 1).unwrap();
        assert_eq!((out.height(), out.width()), (3, 3));
        assert_eq!(out.get(0, 1, 1), 5.0);
        // corner window covers 4 of 9 cells
        assert!((out.get(0, 0, 0) - 5.0 * 4.0 / 9.0).abs() < 1e-6);
        // edge window covers 6 of 9 cells
        assert!((out.get(0, 0, 1) - 5.0 * 6.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn aggregation_shapes_and_errors() {
        let grid = constant(2, 4, 4, 1.0);
        let out = aggregate_patches(&grid, 1, 2).unwrap();
        assert_eq!((out.height(), out.width()), (2, 2));
        let out = aggregate_patches(&constant(1, 5, 7, 1.0), 3, 2).unwrap();
        assert_eq!((out.height(), out.width()), (3, 4));
        assert!(aggregate_patches(&grid, 2, 1).is_err());
        assert!(aggregate_patches(&grid, 5, 1).is_err());
        assert!(aggregate_patches(&grid, 3, 0).is_err());
    }

    #[test]
    fn patch_accessors_agree() {
        let grid = FeatureGrid::from_patches(1, 2, &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(grid.channels(), 3);
        assert_eq!(grid.patch(1), vec![4.0, 5.0, 6.0]);
        assert_eq!(grid.patch_matrix(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(grid.mean_pooled(), vec![2.5, 3.5, 4.5]);
    }

    #[test]
    fn manifest_rejects_duplicates_and_abnormal_training() {
        let entry = |id: &str, label| ManifestEntry {
            image_id: id.into(),
            feature_path: format!("{id}.eaglfeat"),
            mask_path: None,
            image_path: None,
            label,
        };
        let dup = DatasetManifest {
            split: Split::TestNormal,
            entries: vec![entry("a", Label::Normal), entry("a", Label::Normal)],
        };
        assert!(dup.validate().is_err());
        let bad = DatasetManifest {
            split: Split::TrainNormal,
            entries: vec![entry("a", Label::Anomalous)],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn manifest_uses_documented_keys() {
        let m = DatasetManifest {
            split: Split::TestAnomalous,
            entries: vec![ManifestEntry {
                image_id: "x".into(),
                feature_path: "f".into(),
                mask_path: Some("m".into()),
                image_path: None,
                label: Label::Anomalous,
            }],
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["split"], "test_anomalous");
        let e = &v["entries"][0];
        assert_eq!(e["image_id"], "x");
        assert_eq!(e["feature_path"], "f");
        assert_eq!(e["mask_path"], "m");
        assert_eq!(e["label"], "anomalous");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_train: 3,
            n_test_normal: 2,
            n_test_anom: 2,
            height: 6,
            width: 6,
            channels: 4,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&spec, a.path()).unwrap();
        generate_synthetic_dataset(&spec, b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn zero_shift_only_changes_labels() {
        let spec = SyntheticSpec {
            anomaly_shift: 0.0,
            n_train: 0,
            n_test_normal: 0,
            n_test_anom: 3,
            ..Default::default()
        };
        let with_shift = SyntheticSpec {
            anomaly_shift: 4.0,
            ..spec.clone()
        };
        let a = synthesize(&spec).unwrap();
        let b = synthesize(&with_shift).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, Label::Anomalous);
            assert_eq!(x.defect, y.defect);
            let (h0, w0, h1, w1) = x.defect.unwrap();
            for j in 0..x.grid.num_patches() {
                let inside = (h0..=h1).contains(&(j / x.grid.width()))
                    && (w0..=w1).contains(&(j % x.grid.width()));
                assert_eq!(x.grid.patch(j) == y.grid.patch(j), !inside);
            }
        }
    }

    #[test]
    fn mask_round_trip() {
        let spec = SyntheticSpec {
            height: 4,
            width: 4,
            pixels_per_patch: 2,
            ..Default::default()
        };
        let mask = rect_mask(&spec, Some((1, 1, 2, 1)));
        assert_eq!((mask.height, mask.width), (8, 8));
        assert_eq!(mask.count(), 2 * 2 * 2);
        assert!(mask.get(2, 2) && !mask.get(1, 2));
        assert_eq!(GroundTruthMask::from_bytes(&mask.to_bytes()).unwrap(), mask);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn save_load_identity(c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let grid = FeatureGrid::new(c, h, w, data).unwrap();
            prop_assert_eq!(FeatureGrid::from_bytes(&grid.to_bytes()).unwrap(), grid);
        }

        #[test]
        fn unit_aggregation_is_identity(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-10.0f32..10.0)).collect();
            let grid = FeatureGrid::new(c, h, w, data).unwrap();
            prop_assert_eq!(aggregate_patches(&grid, 1, 1).unwrap(), grid);
        }
    }
}
