//! End-to-end orchestration: configuration, persisted artifacts, the CLI
//! stages and evaluation.

mod artifacts;
mod config;
mod eval;
mod render;
mod sim;
mod stages;

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub use artifacts::{
    config_hash, write_manifest, BankIndex, BankRow, PromptRecord, RequestRecord, ScoreRecord, ThresholdArtifact,
    TrainingScoreRow, UnsampledArtifact, SCHEMA_VERSION,
};
pub use config::{CaasSettings, RunConfig, UnparseablePolicy};
pub use eval::{evaluate, EvalReport, EvalRow};
pub use render::{attach_preview_images, draw_boxes, png_data_url};
pub use sim::{run_caas_sim, write_caas_sim, CaasSimOptions, CaasSimSummary, LayerRow};
pub use stages::{
    cmd_build, cmd_eval, cmd_prompt, cmd_run, cmd_score, cmd_send, cmd_threshold, make_client, BuildOutput,
    EvalSource, RunOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Build,
    Threshold,
    Score,
    Prompt,
    Send,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Build => "build",
            Stage::Threshold => "threshold",
            Stage::Score => "score",
            Stage::Prompt => "prompt",
            Stage::Send => "send",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("{path} is incompatible with this config: {reason}")]
    Incompatible { path: PathBuf, reason: String },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("image rendering failed: {0}")]
    Render(String),
    #[error(transparent)]
    Feature(#[from] crate::feature_store::FeatureError),
    #[error(transparent)]
    Coreset(#[from] crate::coreset::CoresetError),
    #[error(transparent)]
    Scoring(#[from] crate::scoring::ScoringError),
    #[error(transparent)]
    Dbt(#[from] crate::dbt::DbtError),
    #[error(transparent)]
    Client(#[from] crate::prompting::ClientError),
    #[error(transparent)]
    Caas(#[from] crate::caas::CaasError),
    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    pub fn stage(self, stage: Stage) -> Self {
        match self {
            e @ PipelineError::Stage { .. } => e,
            e => PipelineError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Stage tag of a failure, when one was attached.
    pub fn failed_stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.into();
    move |source| PipelineError::Io { path, source }
}
