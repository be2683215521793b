use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::artifacts::{
    prompts_file, read_json, read_jsonl, scores_file, write_json, write_jsonl, write_manifest, BankIndex, BankRow,
    PromptRecord, RequestRecord, ScoreRecord, Stamp, ThresholdArtifact, TrainingScoreRow, UnsampledArtifact,
    BANK_FILE, REQUESTS_FILE, THRESHOLD_FILE, TRACE_FILE, UNSAMPLED_FILE,
};
use super::eval::{evaluate, EvalReport, EvalRow};
use super::render::{draw_boxes, load_rgb, png_data_url};
use super::{io_err, PipelineError, Result, RunConfig, Stage, UnparseablePolicy};
use crate::coreset::{build_coreset, patches_from_grids, unsampled_of, ProjectionMatrix, UnsampledIndex};
use crate::dbt::{
    classify, fit_evt, fit_threshold_with, training_scores, ConfidenceVerdict, Decision, ThresholdOptions,
};
use crate::feature_store::{
    aggregate_patches, load_feature_grid, save_feature_grid, DatasetManifest, FeatureGrid, Label, ManifestEntry, Split,
};
use crate::prompting::{
    assemble_request, build_prompt, retrieve_template_pooled, send_to_model, ChatClient, HttpChatClient, ImageRef,
    ImageRole, ParsedAnswer, QueryImages,
};
use crate::scoring::{extract_boxes, gaussian_blur, image_score, score_grid, upsample_map, MemoryBank};

pub const TEST_SPLITS: [Split; 2] = [Split::TestNormal, Split::TestAnomalous];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSource {
    /// Expert verdicts from the score stage.
    Expert,
    /// Parsed model answers from the send stage.
    Model,
}

impl EvalSource {
    fn file_name(self) -> &'static str {
        match self {
            EvalSource::Expert => "eval_expert.json",
            EvalSource::Model => "eval.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub bank_rows: usize,
    pub total_patches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub expert: EvalReport,
    pub model: EvalReport,
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(io_err(out))?;
    Ok(out)
}

fn load_manifest(cfg: &RunConfig, split: Split) -> Result<DatasetManifest> {
    let path = cfg.dataset_root.join(split.manifest_file_name());
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path));
    }
    let manifest = DatasetManifest::load(&path)?;
    if manifest.split != split {
        return Err(PipelineError::Parse {
            path,
            message: format!("manifest declares split {}", manifest.split.as_str()),
        });
    }
    Ok(manifest)
}

fn load_raw(cfg: &RunConfig, entry: &ManifestEntry) -> Result<FeatureGrid> {
    Ok(load_feature_grid(DatasetManifest::resolve(&cfg.dataset_root, &entry.feature_path))?)
}

fn aggregated(cfg: &RunConfig, raw: &FeatureGrid) -> Result<FeatureGrid> {
    if cfg.patchsize == 1 && cfg.stride == 1 {
        return Ok(raw.clone());
    }
    Ok(aggregate_patches(raw, cfg.patchsize, cfg.stride)?)
}

fn load_aggregated(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<FeatureGrid>> {
    manifest
        .entries
        .par_iter()
        .map(|e| aggregated(cfg, &load_raw(cfg, e)?))
        .collect()
}

pub fn cmd_build(cfg: &RunConfig) -> Result<BuildOutput> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let train = load_manifest(cfg, Split::TrainNormal)?;
    let grids = load_aggregated(cfg, &train)?;
    let features = patches_from_grids(&grids);
    let channels = grids.first().map_or(0, FeatureGrid::channels);
    let width = cfg.projection_width(channels);
    let projection = (width > 0).then(|| ProjectionMatrix::gaussian(cfg.seed, width, channels));
    let trace = build_coreset(&features, cfg.target_fraction, projection.as_ref(), cfg.start)?;
    log::info!("memory bank: {} of {} patches", trace.len(), features.len());

    let vectors: Vec<Vec<f32>> = trace.memory_bank.iter().map(|p| p.vector.clone()).collect();
    save_feature_grid(&FeatureGrid::from_patches(vectors.len(), 1, &vectors)?, out.join(BANK_FILE))?;

    let ids: Vec<String> = train.entries.iter().map(|e| e.image_id.clone()).collect();
    let stamp = Stamp::new(cfg);
    let index = BankIndex {
        stamp: stamp.clone(),
        channels,
        image_ids: ids.clone(),
        total_patches: grids.iter().map(FeatureGrid::num_patches).collect(),
        selection_order: trace.selection_order.clone(),
        rows: trace
            .memory_bank
            .iter()
            .map(|p| BankRow {
                image_id: ids[p.source_image].clone(),
                image_index: p.source_image,
                patch: p.source_patch,
            })
            .collect(),
    };
    write_json(&out.join(TRACE_FILE), &index)?;
    let unsampled = unsampled_of(&trace);
    let artifact = UnsampledArtifact {
        stamp,
        by_image: ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), unsampled.of_image(i).to_vec()))
            .collect(),
    };
    write_json(&out.join(UNSAMPLED_FILE), &artifact)?;
    write_manifest(out)?;
    Ok(BuildOutput {
        bank_rows: trace.len(),
        total_patches: features.len(),
    })
}

fn load_bank(cfg: &RunConfig) -> Result<(MemoryBank, BankIndex)> {
    let out = cfg.out_dir.as_path();
    let index_path = out.join(TRACE_FILE);
    let index: BankIndex = read_json(&index_path)?;
    index.stamp.check(cfg, &index_path)?;
    let bank_path = out.join(BANK_FILE);
    if !bank_path.exists() {
        return Err(PipelineError::MissingArtifact(bank_path));
    }
    let grid = load_feature_grid(&bank_path)?;
    if grid.num_patches() != index.rows.len() || grid.channels() != index.channels {
        return Err(PipelineError::Incompatible {
            path: bank_path,
            reason: format!(
                "{} rows of width {}, index lists {} rows of width {}",
                grid.num_patches(),
                grid.channels(),
                index.rows.len(),
                index.channels
            ),
        });
    }
    Ok((MemoryBank::new(grid.channels(), grid.patch_matrix())?, index))
}

fn load_threshold(cfg: &RunConfig) -> Result<ThresholdArtifact> {
    let path = cfg.out_dir.join(THRESHOLD_FILE);
    let t: ThresholdArtifact = read_json(&path)?;
    t.stamp.check(cfg, &path)?;
    Ok(t)
}

pub fn cmd_threshold(cfg: &RunConfig) -> Result<ThresholdArtifact> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let (bank, _) = load_bank(cfg)?;
    let path = out.join(UNSAMPLED_FILE);
    let unsampled: UnsampledArtifact = read_json(&path)?;
    unsampled.stamp.check(cfg, &path)?;

    let train = load_manifest(cfg, Split::TrainNormal)?;
    let ids: Vec<String> = train.entries.iter().map(|e| e.image_id.clone()).collect();
    let listed: Vec<&String> = unsampled.by_image.iter().map(|(id, _)| id).collect();
    if listed != ids.iter().collect::<Vec<_>>() {
        return Err(PipelineError::Incompatible {
            path,
            reason: "training images differ from those the bank was built on".into(),
        });
    }
    let index = UnsampledIndex {
        by_image: unsampled
            .by_image
            .into_iter()
            .enumerate()
            .map(|(i, (_, patches))| (i, patches))
            .collect(),
    };
    let grids = load_aggregated(cfg, &train)?;
    let ts = training_scores(&ids, &grids, &bank, &index)?;
    let opts = ThresholdOptions {
        kappa: cfg.kappa,
        exclude_flagged: cfg.exclude_flagged,
    };
    let mut model = fit_threshold_with(&ts, &opts)?;
    if let Some(q) = cfg.evt_quantile {
        match fit_evt(&ts, q) {
            Ok(fit) => model.evt = Some(fit),
            Err(e) => log::warn!("tail fit skipped: {e}"),
        }
    }
    let flagged: Vec<String> = ids
        .iter()
        .zip(&ts.flagged)
        .filter(|(_, &f)| f)
        .map(|(id, _)| id.clone())
        .collect();
    if !flagged.is_empty() {
        log::warn!("{} training images had no unsampled patches: {}", flagged.len(), flagged.join(", "));
    }
    log::info!("tau = {:.6} (mu {:.6}, sigma {:.6}), s_max = {:.6}", model.tau, model.mu, model.sigma, model.s_max);
    let artifact = ThresholdArtifact {
        stamp: Stamp::new(cfg),
        model,
        flagged,
        training_scores: (0..ts.len())
            .map(|i| TrainingScoreRow {
                image_id: ts.image_ids[i].clone(),
                score: ts.scores[i],
                argmax_patch: ts.per_image_argmax[i],
                flagged: ts.flagged[i],
            })
            .collect(),
    };
    write_json(&out.join(THRESHOLD_FILE), &artifact)?;
    write_manifest(out)?;
    Ok(artifact)
}

fn map_size(cfg: &RunConfig, entry: &ManifestEntry, raw: &FeatureGrid) -> Result<(usize, usize)> {
    match &entry.image_path {
        Some(rel) => {
            let path = DatasetManifest::resolve(&cfg.dataset_root, rel);
            let (w, h) = image::image_dimensions(&path)
                .map_err(|e| PipelineError::Render(format!("{}: {e}", path.display())))?;
            Ok((h as usize, w as usize))
        }
        None => Ok((raw.height() * cfg.pixels_per_patch, raw.width() * cfg.pixels_per_patch)),
    }
}

pub fn cmd_score(cfg: &RunConfig, split: Split) -> Result<Vec<ScoreRecord>> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let (bank, _) = load_bank(cfg)?;
    let threshold = load_threshold(cfg)?;
    let model = threshold.model;
    let manifest = load_manifest(cfg, split)?;
    let records: Vec<ScoreRecord> = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<ScoreRecord> {
            let raw = load_raw(cfg, entry)?;
            let sg = score_grid(&aggregated(cfg, &raw)?, &bank)?;
            let s = image_score(&sg)?;
            let verdict = classify(s.value, &model);
            let size = map_size(cfg, entry, &raw)?;
            let mut map = upsample_map(&sg, size)?;
            if let Some(sigma) = cfg.blur_sigma.filter(|&s| s > 0.0) {
                map = gaussian_blur(&map, sigma);
            }
            let boxes = extract_boxes(&map, cfg.box_threshold.unwrap_or(model.tau), cfg.box_min_area);
            Ok(ScoreRecord {
                image_id: entry.image_id.clone(),
                s_img: s.value,
                argmax_patch: s.argmax_patch,
                verdict: verdict.decision,
                low_confidence: verdict.low_confidence,
                map_size: size,
                boxes,
            })
        })
        .collect::<Result<_>>()?;
    let abnormal = records.iter().filter(|r| r.verdict == Decision::Abnormal).count();
    log::info!("{}: {abnormal} of {} abnormal", split.as_str(), records.len());
    write_jsonl(&out.join(scores_file(split.as_str())), &records)?;
    write_manifest(out)?;
    Ok(records)
}

fn image_url(cfg: &RunConfig, rel: &str, boxes: Option<&[crate::scoring::BoundingBox]>, map: (usize, usize)) -> Result<String> {
    let mut img = load_rgb(&DatasetManifest::resolve(&cfg.dataset_root, rel))?;
    if let Some(boxes) = boxes {
        let dims = (img.height() as usize, img.width() as usize);
        let scaled: Vec<_> = boxes
            .iter()
            .map(|b| if dims == map { *b } else { b.rescale(map, dims) })
            .collect();
        draw_boxes(&mut img, &scaled);
    }
    png_data_url(&img)
}

pub fn cmd_prompt(cfg: &RunConfig, split: Split) -> Result<Vec<PromptRecord>> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let scores: Vec<ScoreRecord> = read_jsonl(&out.join(scores_file(split.as_str())))?;
    let manifest = load_manifest(cfg, split)?;
    let entries: HashMap<&str, &ManifestEntry> = manifest.entries.iter().map(|e| (e.image_id.as_str(), e)).collect();
    let train = load_manifest(cfg, Split::TrainNormal)?;
    let pooled: Vec<Vec<f64>> = train
        .entries
        .par_iter()
        .map(|e| Ok(load_raw(cfg, e)?.mean_pooled()))
        .collect::<Result<_>>()?;

    let records: Vec<PromptRecord> = scores
        .par_iter()
        .map(|rec| -> Result<PromptRecord> {
            let entry = entries.get(rec.image_id.as_str()).ok_or_else(|| {
                PipelineError::LabelMismatch(format!("{} is not in the {} manifest", rec.image_id, split.as_str()))
            })?;
            let raw = load_raw(cfg, entry)?;
            let template = retrieve_template_pooled(&raw.mean_pooled(), &pooled).map(|i| &train.entries[i]);
            let verdict = ConfidenceVerdict {
                decision: rec.verdict,
                low_confidence: rec.low_confidence,
                s_img: rec.s_img,
            };
            let bundle = build_prompt(
                &verdict,
                &rec.boxes,
                template.map(|t| t.image_id.as_str()),
                cfg.prior_style,
            );
            let mut images = QueryImages::default();
            if let Some(rel) = &entry.image_path {
                images.query = Some(ImageRef {
                    image_id: entry.image_id.clone(),
                    role: ImageRole::Query,
                    url: Some(image_url(cfg, rel, None, rec.map_size)?),
                });
                if bundle.visual_boxes.as_ref().is_some_and(|b| !b.is_empty()) {
                    images.annotated = Some(ImageRef {
                        image_id: entry.image_id.clone(),
                        role: ImageRole::AnnotatedQuery,
                        url: Some(image_url(cfg, rel, Some(&rec.boxes), rec.map_size)?),
                    });
                }
            }
            if let Some(t) = template {
                images.template = Some(ImageRef {
                    image_id: t.image_id.clone(),
                    role: ImageRole::Template,
                    url: t.image_path.as_deref().map(|rel| image_url(cfg, rel, None, (0, 0))).transpose()?,
                });
            }
            let hint = (rec.low_confidence && cfg.endpoint.send_caas_hint).then(|| cfg.caas.hint());
            let request = assemble_request(&entry.image_id, &bundle, &images, hint);
            Ok(PromptRecord {
                image_id: entry.image_id.clone(),
                prompt: bundle,
                request,
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&out.join(prompts_file(split.as_str())), &records)?;
    write_manifest(out)?;
    Ok(records)
}

/// The configured stub, or an HTTP client for the configured endpoint.
pub fn make_client(cfg: &RunConfig) -> Result<Box<dyn ChatClient>> {
    match &cfg.stub {
        Some(stub) => Ok(Box::new(stub.clone()) as Box<dyn ChatClient>),
        None => Ok(Box::new(HttpChatClient::new(&cfg.endpoint)?)),
    }
}

/// Sends every prompt of `splits` with at most `max_in_flight` requests
/// outstanding. All outcomes are logged before the first failure, if any,
/// is returned.
pub fn cmd_send(cfg: &RunConfig, splits: &[Split], client: &dyn ChatClient) -> Result<Vec<RequestRecord>> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let mut prompts: Vec<PromptRecord> = Vec::new();
    for split in splits {
        prompts.extend(read_jsonl::<PromptRecord>(&out.join(prompts_file(split.as_str())))?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.endpoint.max_in_flight)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let retry = cfg.retry_policy();
    let include_caas = cfg.stub.is_some() || cfg.endpoint.send_caas_hint;
    let outcomes: Vec<(RequestRecord, Option<PipelineError>)> = pool.install(|| {
        prompts
            .par_iter()
            .map(|p| {
                let body = p.request.to_wire(&cfg.endpoint.model, include_caas);
                match send_to_model(&p.request, client, &retry) {
                    Ok((answer, resp)) => (
                        RequestRecord {
                            image_id: p.image_id.clone(),
                            body,
                            raw_text: Some(resp.raw_text),
                            parsed: Some(answer.parsed),
                            status: Some(resp.status),
                            latency_ms: Some(resp.latency_ms),
                            error: None,
                        },
                        None,
                    ),
                    Err(e) => (
                        RequestRecord {
                            image_id: p.image_id.clone(),
                            body,
                            raw_text: None,
                            parsed: None,
                            status: None,
                            latency_ms: None,
                            error: Some(e.to_string()),
                        },
                        Some(e.into()),
                    ),
                }
            })
            .collect()
    });
    let (records, errors): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    write_jsonl(&out.join(REQUESTS_FILE), &records)?;
    write_manifest(out)?;
    match errors.into_iter().flatten().next() {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

fn labels(cfg: &RunConfig) -> Result<HashMap<String, Label>> {
    let mut labels = HashMap::new();
    for split in TEST_SPLITS {
        for e in load_manifest(cfg, split)?.entries {
            labels.insert(e.image_id, e.label);
        }
    }
    Ok(labels)
}

pub fn cmd_eval(cfg: &RunConfig, source: EvalSource) -> Result<EvalReport> {
    let out = out_dir(cfg)?;
    let labels = labels(cfg)?;
    let predictions: Vec<(String, Decision, bool)> = match source {
        EvalSource::Expert => {
            let mut rows = Vec::new();
            for split in TEST_SPLITS {
                let recs: Vec<ScoreRecord> = read_jsonl(&out.join(scores_file(split.as_str())))?;
                rows.extend(recs.into_iter().map(|r| (r.image_id, r.verdict, false)));
            }
            rows
        }
        EvalSource::Model => read_jsonl::<RequestRecord>(&out.join(REQUESTS_FILE))?
            .into_iter()
            .map(|r| {
                let decision = match r.parsed {
                    Some(ParsedAnswer::DefectYes) => (Decision::Abnormal, false),
                    Some(ParsedAnswer::DefectNo) => (Decision::Normal, false),
                    _ => match cfg.unparseable {
                        UnparseablePolicy::Normal => (Decision::Normal, true),
                        UnparseablePolicy::Abnormal => (Decision::Abnormal, true),
                    },
                };
                (r.image_id, decision.0, decision.1)
            })
            .collect(),
    };
    let rows = predictions
        .into_iter()
        .map(|(image_id, predicted, unparseable)| {
            let label = *labels
                .get(&image_id)
                .ok_or_else(|| PipelineError::LabelMismatch(format!("no label for prediction {image_id}")))?;
            Ok(EvalRow {
                image_id,
                label,
                predicted,
                unparseable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(rows);
    write_json(&out.join(source.file_name()), &report)?;
    write_manifest(out)?;
    Ok(report)
}

/// build → threshold → score → prompt → send → eval. Errors carry the
/// failing stage.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    cmd_build(cfg).map_err(|e| e.stage(Stage::Build))?;
    cmd_threshold(cfg).map_err(|e| e.stage(Stage::Threshold))?;
    for split in TEST_SPLITS {
        cmd_score(cfg, split).map_err(|e| e.stage(Stage::Score))?;
    }
    for split in TEST_SPLITS {
        cmd_prompt(cfg, split).map_err(|e| e.stage(Stage::Prompt))?;
    }
    let client = make_client(cfg).map_err(|e| e.stage(Stage::Send))?;
    cmd_send(cfg, &TEST_SPLITS, client.as_ref()).map_err(|e| e.stage(Stage::Send))?;
    let expert = cmd_eval(cfg, EvalSource::Expert).map_err(|e| e.stage(Stage::Eval))?;
    let model = cmd_eval(cfg, EvalSource::Model).map_err(|e| e.stage(Stage::Eval))?;
    Ok(RunOutput { expert, model })
}
