use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, PipelineError, Result, RunConfig};
use crate::dbt::{Decision, ThresholdModel};
use crate::prompting::{ChatRequest, ParsedAnswer, PromptBundle};
use crate::scoring::BoundingBox;

pub const SCHEMA_VERSION: u32 = 1;

pub const BANK_FILE: &str = "bank.eaglfeat";
pub const TRACE_FILE: &str = "trace.json";
pub const UNSAMPLED_FILE: &str = "unsampled.json";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const REQUESTS_FILE: &str = "requests.jsonl";
pub const MANIFEST_FILE: &str = "MANIFEST";

pub fn scores_file(split: &str) -> String {
    format!("scores_{split}.jsonl")
}

pub fn prompts_file(split: &str) -> String {
    format!("prompts_{split}.jsonl")
}

#[derive(Serialize)]
struct HashedFields<'a> {
    dataset_root: &'a Path,
    seed: u64,
    target_fraction: f64,
    patchsize: usize,
    stride: usize,
    projection_dim: Option<usize>,
    start: crate::coreset::StartRule,
    kappa: f64,
    exclude_flagged: bool,
    evt_quantile: Option<f64>,
}

/// SHA-256 over the fields that determine the expert artifacts.
pub fn config_hash(cfg: &RunConfig) -> String {
    let fields = HashedFields {
        dataset_root: &cfg.dataset_root,
        seed: cfg.seed,
        target_fraction: cfg.target_fraction,
        patchsize: cfg.patchsize,
        stride: cfg.stride,
        projection_dim: cfg.projection_dim,
        start: cfg.start,
        kappa: cfg.kappa,
        exclude_flagged: cfg.exclude_flagged,
        evt_quantile: cfg.evt_quantile,
    };
    let bytes = serde_json::to_vec(&fields).expect("config fields serialize");
    format!("{:x}", Sha256::digest(bytes))
}

/// Header every JSON artifact carries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub schema_version: u32,
    pub config_hash: String,
}

impl Stamp {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash(cfg),
        }
    }

    pub fn check(&self, cfg: &RunConfig, path: &Path) -> Result<()> {
        let incompatible = |reason: String| PipelineError::Incompatible {
            path: path.to_path_buf(),
            reason,
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(incompatible(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let expected = config_hash(cfg);
        if self.config_hash != expected {
            return Err(incompatible(format!(
                "config hash {} (expected {expected})",
                self.config_hash
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankRow {
    pub image_id: String,
    pub image_index: usize,
    pub patch: usize,
}

/// Provenance of the persisted bank: row `r` of `bank.eaglfeat` came from
/// `rows[r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankIndex {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub channels: usize,
    pub image_ids: Vec<String>,
    pub total_patches: Vec<usize>,
    pub selection_order: Vec<usize>,
    pub rows: Vec<BankRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsampledArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// Per training image (in manifest order) the patches not in the bank.
    pub by_image: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingScoreRow {
    pub image_id: String,
    pub score: f64,
    pub argmax_patch: Option<usize>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdArtifact {
    #[serde(flatten)]
    pub stamp: Stamp,
    #[serde(flatten)]
    pub model: ThresholdModel,
    pub flagged: Vec<String>,
    pub training_scores: Vec<TrainingScoreRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub s_img: f64,
    /// `(h, w)` on the aggregated grid.
    pub argmax_patch: (usize, usize),
    pub verdict: Decision,
    pub low_confidence: bool,
    /// Map resolution the boxes refer to, `(height, width)`.
    pub map_size: (usize, usize),
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub image_id: String,
    pub prompt: PromptBundle,
    pub request: ChatRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub image_id: String,
    /// Wire body as sent, without credentials.
    pub body: serde_json::Value,
    pub raw_text: Option<String>,
    pub parsed: Option<ParsedAnswer>,
    pub status: Option<u16>,
    pub latency_ms: Option<u64>,
    pub error: Option<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Rewrites `MANIFEST` with `sha256  relative/path` for every other file
/// under `out`, sorted by path.
pub fn write_manifest(out: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.sort();
    let mut text = String::new();
    for rel in files {
        if rel == MANIFEST_FILE {
            continue;
        }
        let path = out.join(&rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        text.push_str(&format!("{:x}  {}\n", Sha256::digest(&bytes), rel));
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
