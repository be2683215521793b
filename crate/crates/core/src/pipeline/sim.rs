use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::{write_json, write_manifest};
use super::{io_err, PipelineError, Result};
use crate::caas::{attention_ratio, forward, sweep_alpha, CaasConfig, PriorBias, ScenarioArgs, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaasSimOptions {
    pub alpha: f64,
    pub beta: f64,
    pub suppress_prior: bool,
    pub layers: (usize, usize),
    pub renormalize: bool,
    pub seed: u64,
    pub trials: usize,
    pub prior: PriorBias,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
}

impl Default for CaasSimOptions {
    fn default() -> Self {
        let cfg = CaasConfig::default();
        Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            suppress_prior: false,
            layers: cfg.layers,
            renormalize: false,
            seed: 0,
            trials: 100,
            prior: PriorBias::Misleading,
            n_layers: 32,
            n_heads: 4,
            d_model: 16,
        }
    }
}

impl CaasSimOptions {
    pub fn scenario(&self) -> ScenarioArgs {
        ScenarioArgs {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            prior: self.prior,
            base_seed: self.seed,
            ..ScenarioArgs::default()
        }
    }

    pub fn config(&self) -> CaasConfig {
        CaasConfig {
            alpha: self.alpha,
            beta: self.beta,
            suppress_prior: self.suppress_prior,
            layers: self.layers,
            renormalize: self.renormalize,
            ..CaasConfig::default()
        }
    }
}

/// One layer of the first scenario, with and without the intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub p_correct_base: f64,
    pub p_incorrect_base: f64,
    pub p_correct_caas: f64,
    pub p_incorrect_caas: f64,
    pub ar_base: f64,
    pub ar_caas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaasSimSummary {
    pub options: CaasSimOptions,
    /// Final prediction of the first scenario.
    pub first_correct_base: bool,
    pub first_correct_caas: bool,
    pub baseline_correct_rate: f64,
    pub caas_correct_rate: f64,
    pub sweep: Vec<SweepRow>,
    /// Mean over layers and scenarios of AR, split by final correctness
    /// without intervention; `None` when a group is empty.
    pub mean_ar_correct: Option<f64>,
    pub mean_ar_incorrect: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

pub fn run_caas_sim(opts: &CaasSimOptions) -> Result<(CaasSimSummary, Vec<LayerRow>)> {
    let args = opts.scenario();
    let cfg = opts.config();
    cfg.validate(opts.n_layers)?;
    if opts.trials == 0 {
        return Err(PipelineError::Config("trials must be >= 1".into()));
    }

    let first = args.build(0)?;
    let base = forward(&first, None);
    let caas = forward(&first, Some((&cfg, 0.0)));
    let ar_base = attention_ratio(&base, &first.layout)?;
    let ar_caas = attention_ratio(&caas, &first.layout)?;
    let rows = (0..opts.n_layers)
        .map(|l| LayerRow {
            layer: l + 1,
            p_correct_base: base.dynamics.probs[l].0,
            p_incorrect_base: base.dynamics.probs[l].1,
            p_correct_caas: caas.dynamics.probs[l].0,
            p_incorrect_caas: caas.dynamics.probs[l].1,
            ar_base: ar_base.ratios[l],
            ar_caas: ar_caas.ratios[l],
        })
        .collect();

    let mut alphas = vec![0.0, 0.2, 0.4, 0.6];
    if !alphas.contains(&opts.alpha) {
        alphas.push(opts.alpha);
    }
    let sweep = sweep_alpha(&args, &cfg, &alphas, opts.trials)?;
    let rate_at = |a: f64| sweep.iter().find(|r| r.alpha == a).map_or(0.0, |r| r.flip_rate);

    let per_trial: Vec<(bool, f64)> = (0..opts.trials)
        .into_par_iter()
        .map(|t| {
            let stack = args.build(t)?;
            let pass = forward(&stack, None);
            Ok((pass.correct, attention_ratio(&pass, &stack.layout)?.mean()))
        })
        .collect::<std::result::Result<_, crate::caas::CaasError>>()?;
    let group_mean = |want: bool| {
        let v: Vec<f64> = per_trial.iter().filter(|(c, _)| *c == want).map(|(_, m)| *m).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };

    let summary = CaasSimSummary {
        options: opts.clone(),
        first_correct_base: base.correct,
        first_correct_caas: caas.correct,
        baseline_correct_rate: rate_at(0.0),
        caas_correct_rate: rate_at(opts.alpha),
        sweep,
        mean_ar_correct: group_mean(true),
        mean_ar_incorrect: group_mean(false),
        n_correct: per_trial.iter().filter(|(c, _)| *c).count(),
        n_incorrect: per_trial.iter().filter(|(c, _)| !*c).count(),
    };
    Ok((summary, rows))
}

/// Writes `caas_layers.csv` and `caas_summary.json` under `out`.
pub fn write_caas_sim(out: &Path, summary: &CaasSimSummary, rows: &[LayerRow]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let csv_path = out.join("caas_layers.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| PipelineError::Parse {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    for row in rows {
        w.serialize(row).map_err(|e| PipelineError::Parse {
            path: csv_path.clone(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    write_json(&out.join("caas_summary.json"), summary)?;
    write_manifest(out)
}
