use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eagle_core::caas::PriorBias;
use eagle_core::feature_store::{generate_synthetic_dataset, Split, SyntheticSpec};
use eagle_core::pipeline::{
    attach_preview_images, cmd_build, cmd_eval, cmd_prompt, cmd_run, cmd_score, cmd_send, cmd_threshold,
    make_client, run_caas_sim, write_caas_sim, CaasSimOptions, EvalSource, PipelineError, RunConfig, Stage,
};
use eagle_core::prompting::StubClient;

#[derive(Parser)]
#[command(name = "eagle", version, about = "Expert-guided industrial anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Answer with a local stub instead of the endpoint.
    #[arg(long, value_enum)]
    stub: Option<StubKind>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StubKind {
    Echo,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    TestNormal,
    TestAnomalous,
    Test,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::TrainNormal],
            SplitArg::TestNormal => vec![Split::TestNormal],
            SplitArg::TestAnomalous => vec![Split::TestAnomalous],
            SplitArg::Test => vec![Split::TestNormal, Split::TestAnomalous],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Correct,
    Misleading,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Select the memory bank from the training split.
    Build(Common),
    /// Fit the decision threshold from unsampled training patches.
    Threshold(Common),
    /// Score a split and write verdicts with boxes.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Build prompts for scored images; with --send also query the model.
    Prompt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        send: bool,
    },
    /// Evaluate expert verdicts or model answers against labels.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate expert verdicts instead of model answers.
        #[arg(long)]
        expert: bool,
    },
    /// Run every stage end to end.
    Run(Common),
    /// Simulate attention scaling on the toy attention stack.
    CaasSim {
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        #[arg(long, default_value_t = -0.4)]
        beta: f64,
        /// Also scale attention to the textual prior by 1 + beta.
        #[arg(long)]
        suppress_prior: bool,
        /// Inclusive 1-based layer range, LO:HI.
        #[arg(long, default_value = "9:15", value_parser = parse_layers)]
        layers: (usize, usize),
        #[arg(long)]
        renormalize: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_enum, default_value = "misleading")]
        prior: PriorArg,
        #[arg(long, default_value_t = 32)]
        n_layers: usize,
        #[arg(long, default_value = "caas_out")]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test_normal: Option<usize>,
        #[arg(long)]
        n_test_anom: Option<usize>,
        #[arg(long)]
        anomaly_shift: Option<f64>,
        /// Also write grayscale preview PNGs and reference them.
        #[arg(long)]
        images: bool,
    },
}

fn parse_layers(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn load_config(c: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    }
    .with_env_overrides();
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(data) = &c.data {
        cfg.dataset_root = data.clone();
    }
    match c.stub {
        Some(StubKind::Echo) => cfg.stub = Some(StubClient::EchoPrior),
        Some(StubKind::Adversarial) => cfg.stub = Some(StubClient::AdversarialLowConfidence),
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Build(c) => {
            let out = cmd_build(&load_config(&c)?)?;
            println!("bank rows: {} of {} patches", out.bank_rows, out.total_patches);
        }
        Command::Threshold(c) => {
            let t = cmd_threshold(&load_config(&c)?)?;
            print_json(&t.model);
        }
        Command::Score { common, split } => {
            let cfg = load_config(&common)?;
            for s in split.splits() {
                let recs = cmd_score(&cfg, s)?;
                let abnormal = recs.iter().filter(|r| r.verdict == eagle_core::dbt::Decision::Abnormal).count();
                println!("{}: {} images, {abnormal} abnormal", s.as_str(), recs.len());
            }
        }
        Command::Prompt { common, split, send } => {
            let cfg = load_config(&common)?;
            let splits = split.splits();
            for &s in &splits {
                let recs = cmd_prompt(&cfg, s)?;
                println!("{}: {} prompts", s.as_str(), recs.len());
            }
            if send {
                let client = make_client(&cfg).map_err(|e| e.stage(Stage::Send))?;
                let recs = cmd_send(&cfg, &splits, client.as_ref()).map_err(|e| e.stage(Stage::Send))?;
                println!("sent {} requests", recs.len());
            }
        }
        Command::Eval { common, expert } => {
            let cfg = load_config(&common)?;
            let source = if expert { EvalSource::Expert } else { EvalSource::Model };
            let mut report = cmd_eval(&cfg, source)?;
            report.rows.clear();
            print_json(&report);
        }
        Command::Run(c) => {
            let out = cmd_run(&load_config(&c)?)?;
            println!(
                "expert: accuracy {:.4} f1 {:.4} | model: accuracy {:.4} f1 {:.4}",
                out.expert.accuracy, out.expert.f1, out.model.accuracy, out.model.f1
            );
        }
        Command::CaasSim {
            alpha,
            beta,
            suppress_prior,
            layers,
            renormalize,
            seed,
            trials,
            prior,
            n_layers,
            out,
        } => {
            let opts = CaasSimOptions {
                alpha,
                beta,
                suppress_prior,
                layers,
                renormalize,
                seed,
                trials,
                prior: match prior {
                    PriorArg::Correct => PriorBias::Correct,
                    PriorArg::Misleading => PriorBias::Misleading,
                    PriorArg::None => PriorBias::None,
                },
                n_layers,
                ..CaasSimOptions::default()
            };
            let (summary, rows) = run_caas_sim(&opts)?;
            write_caas_sim(&out, &summary, &rows)?;
            for r in &summary.sweep {
                println!("alpha {:.2}: correct {}/{}", r.alpha, r.correct, r.trials);
            }
        }
        Command::Synth {
            out,
            seed,
            n_train,
            n_test_normal,
            n_test_anom,
            anomaly_shift,
            images,
        } => {
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                seed,
                n_train: n_train.unwrap_or(d.n_train),
                n_test_normal: n_test_normal.unwrap_or(d.n_test_normal),
                n_test_anom: n_test_anom.unwrap_or(d.n_test_anom),
                anomaly_shift: anomaly_shift.unwrap_or(d.anomaly_shift),
                ..d
            };
            generate_synthetic_dataset(&spec, &out)?;
            if images {
                attach_preview_images(&out, spec.pixels_per_patch)?;
            }
            println!("wrote synthetic dataset to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
