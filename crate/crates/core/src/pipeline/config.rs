use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, PipelineError, Result};
use crate::caas::{CaasConfig, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_LAYERS};
use crate::coreset::{StartRule, DEFAULT_TARGET_FRACTION, MAX_DEFAULT_PROJECTION_DIM};
use crate::dbt::DEFAULT_KAPPA;
use crate::prompting::{CaasHint, EndpointConfig, PriorStyle, RetryPolicy, StubClient};

/// How an answer that matches no parsing rule is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnparseablePolicy {
    #[default]
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaasSettings {
    pub alpha: f64,
    pub beta: f64,
    pub suppress_prior: bool,
    /// Inclusive, 1-based.
    pub layers: (usize, usize),
    pub renormalize: bool,
}

impl Default for CaasSettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            suppress_prior: false,
            layers: DEFAULT_LAYERS,
            renormalize: false,
        }
    }
}

impl CaasSettings {
    pub fn to_config(&self) -> CaasConfig {
        CaasConfig {
            alpha: self.alpha,
            beta: self.beta,
            suppress_prior: self.suppress_prior,
            layers: self.layers,
            renormalize: self.renormalize,
            ..CaasConfig::default()
        }
    }

    pub fn hint(&self) -> CaasHint {
        CaasHint {
            alpha: self.alpha,
            layers: self.layers,
        }
    }
}

/// Everything one pipeline run needs. Loads from TOML or JSON by file
/// extension; missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub target_fraction: f64,
    /// Neighbourhood aggregation window; 1 disables aggregation.
    pub patchsize: usize,
    pub stride: usize,
    /// Random projection width for coreset selection; `None` uses
    /// `min(C, 128)` and `Some(0)` selects in the original space.
    pub projection_dim: Option<usize>,
    pub start: StartRule,
    pub kappa: f64,
    pub exclude_flagged: bool,
    /// Gumbel tail quantile reported next to τ; `None` skips the fit.
    pub evt_quantile: Option<f64>,
    /// Anomaly-map pixels per feature cell, used when no image is attached.
    pub pixels_per_patch: usize,
    pub blur_sigma: Option<f64>,
    /// Map threshold for boxes; `None` uses τ.
    pub box_threshold: Option<f64>,
    pub box_min_area: usize,
    pub prior_style: PriorStyle,
    pub unparseable: UnparseablePolicy,
    pub caas: CaasSettings,
    pub endpoint: EndpointConfig,
    pub stub: Option<StubClient>,
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            target_fraction: DEFAULT_TARGET_FRACTION,
            patchsize: 3,
            stride: 1,
            projection_dim: None,
            start: StartRule::MaxNorm,
            kappa: DEFAULT_KAPPA,
            exclude_flagged: true,
            evt_quantile: Some(0.99),
            pixels_per_patch: 8,
            blur_sigma: None,
            box_threshold: None,
            box_min_area: 1,
            prior_style: PriorStyle::Detailed,
            unparseable: UnparseablePolicy::Normal,
            caas: CaasSettings::default(),
            endpoint: EndpointConfig::default(),
            stub: None,
            retry_attempts: 3,
            retry_base_ms: 250,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let parse_err = |message: String| PipelineError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))?,
            _ => toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        fs::write(path, text).map_err(io_err(path))
    }

    /// Applies `EAGLE_*` endpoint overrides from the environment.
    pub fn with_env_overrides(mut self) -> Self {
        self.endpoint = self.endpoint.with_env_overrides();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return bad("target_fraction must be in (0, 1]");
        }
        if self.patchsize == 0 || self.stride == 0 {
            return bad("patchsize and stride must be >= 1");
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return bad("kappa must be finite and >= 0");
        }
        if let Some(q) = self.evt_quantile {
            if !(q > 0.0 && q < 1.0) {
                return bad("evt_quantile must be in (0, 1)");
            }
        }
        if self.pixels_per_patch == 0 {
            return bad("pixels_per_patch must be >= 1");
        }
        if self.blur_sigma.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
            return bad("blur_sigma must be finite and >= 0");
        }
        if self.retry_attempts == 0 {
            return bad("retry_attempts must be >= 1");
        }
        if self.endpoint.max_in_flight == 0 {
            return bad("endpoint.max_in_flight must be >= 1");
        }
        let (lo, hi) = self.caas.layers;
        if lo == 0 || lo > hi {
            return bad("caas.layers must satisfy 1 <= lo <= hi");
        }
        if self.caas.to_config().validate(usize::MAX).is_err() {
            return bad("caas needs 1 + alpha > 0 and 1 + beta > 0");
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.retry_attempts,
            base_delay: std::time::Duration::from_millis(self.retry_base_ms),
        }
    }

    pub fn projection_width(&self, channels: usize) -> usize {
        self.projection_dim
            .unwrap_or_else(|| channels.min(MAX_DEFAULT_PROJECTION_DIM))
    }
}
