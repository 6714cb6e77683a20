//! Stage orchestration with content-addressed caching.
//!
//! A run walks `source → detect → score → estimate → evaluate → report`.
//! Every stage gets a key hashed from the config sections it reads plus the
//! key and output hashes of the stage before it, so a config change re-runs
//! the first affected stage and everything after it.

mod annotate;
pub mod artifacts;
mod compare;
mod config;
mod manifest;
mod stages;

pub use annotate::{export_annotation_queue, merge_annotation_file, QueueExport, QueueRow};
pub use compare::{compare_runs, DriftPoint, DriftReport, DRIFT_FMRS};
pub use config::{Endpoint, RunConfig, ServiceConfig, SimulatorConfig, STORE_ENDPOINT};
pub use manifest::{canonical_hash, file_sha256, sha256_hex, RunManifest, Stage, StageRecord, StageStatus, MANIFEST_FILE};
pub use stages::{curve_file, EvaluationSummary, FnmrPoint, Report, ServiceSummary};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::detection::DetectionError;
use crate::estimation::EstimationError;
use crate::evaluation::EvaluationError;
use crate::scoring::ScoringError;
use crate::simulator::SimulationError;
use stages::Context;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn csv(path: &Path, e: csv::Error) -> Self {
        Self::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    /// Process exit code: 2 for validation errors, 3 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            _ => 3,
        }
    }
}

/// Hash of the canonical config, minus fields that cannot change results.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("workers");
        obj.remove("out_dir");
    }
    canonical_hash(&v)
}

fn file_hashes(paths: &[PathBuf]) -> Result<Vec<String>, PipelineError> {
    paths.iter().map(|p| file_sha256(p)).collect()
}

fn stage_section(cfg: &RunConfig, stage: Stage) -> Result<serde_json::Value, PipelineError> {
    Ok(match stage {
        Stage::Source => json!({
            "name_list": file_hashes(&cfg.name_list.iter().cloned().collect::<Vec<_>>())?,
            "providers": file_hashes(&cfg.providers)?,
            "demographics": cfg.demographics,
            "as_of": cfg.as_of(),
            "window_months": cfg.window_months,
            "max_results": cfg.max_results,
            "dedup_threshold": cfg.dedup_threshold,
            "world": cfg.simulator.as_ref().map(|s| &s.world),
        }),
        Stage::Detect => json!({
            "services": cfg.service_ids(),
            "iou_threshold": cfg.iou_threshold,
            "detections": file_hashes(&cfg.detections.iter().cloned().collect::<Vec<_>>())?,
        }),
        Stage::Score => {
            let fingerprints = cfg
                .service_ids()
                .iter()
                .map(|s| stages::service_fingerprint(cfg, s))
                .collect::<Result<Vec<_>, _>>()?;
            let modes: Vec<_> = cfg.services.iter().map(|s| s.modes).collect();
            json!({"seed": cfg.seed, "services": fingerprints, "modes": modes})
        }
        Stage::Estimate => json!({
            "thresholds": cfg.thresholds,
            "annotation_budget": cfg.annotation_budget,
            "annotations": file_hashes(&stages::annotation_inputs(cfg))?,
        }),
        Stage::Evaluate => json!({"confidence": cfg.confidence, "thresholds": cfg.thresholds}),
        Stage::Report => json!({"name": cfg.name, "config_hash": config_hash(cfg)}),
    })
}

fn stage_key(cfg: &RunConfig, stage: Stage, upstream: Option<&StageRecord>) -> Result<String, PipelineError> {
    Ok(canonical_hash(&json!({
        "stage": stage,
        "section": stage_section(cfg, stage)?,
        "upstream_key": upstream.map(|u| &u.key),
        "upstream_outputs": upstream.map(|u| &u.outputs),
    })))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Runs the requested stages, reusing earlier outputs whose key still
/// matches. Stages before the last requested one that are neither requested
/// nor reusable block everything after them.
///
/// Stage failures are recorded in the returned manifest; only invalid
/// configs and unreadable manifests are errors.
pub fn run(cfg: &RunConfig, stages: &[Stage]) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| PipelineError::io(&cfg.out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Validation(format!("worker pool: {e}")))?;
    pool.install(|| run_stages(cfg, stages))
}

fn run_stages(cfg: &RunConfig, requested: &[Stage]) -> Result<RunManifest, PipelineError> {
    let dir = cfg.out_dir.as_path();
    let previous = match RunManifest::load(dir) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("ignoring unreadable manifest: {e}");
            None
        }
    };
    let requested: BTreeSet<Stage> = requested.iter().copied().collect();
    let Some(&last) = requested.iter().next_back() else {
        return Err(PipelineError::Validation("no stages requested".into()));
    };
    let hash = config_hash(cfg);
    let ctx = Context::new(cfg);
    let mut manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash: hash.clone(),
        stages: Vec::new(),
    };
    let mut upstream: Option<StageRecord> = None;
    let mut blocked: Option<String> = None;

    for stage in Stage::ALL {
        if stage > last {
            // Keep later outputs that are still consistent with this run.
            if blocked.is_some() {
                break;
            }
            let key = stage_key(cfg, stage, upstream.as_ref())?;
            match previous.as_ref().and_then(|p| p.reusable(dir, stage, &key)) {
                Some(rec) => {
                    let mut rec = rec.clone();
                    rec.cached = true;
                    manifest.stages.push(rec.clone());
                    upstream = Some(rec);
                    continue;
                }
                None => break,
            }
        }
        if let Some(reason) = &blocked {
            if requested.contains(&stage) {
                manifest.stages.push(StageRecord {
                    stage,
                    status: StageStatus::Skipped,
                    key: String::new(),
                    outputs: Default::default(),
                    cached: false,
                    started_at: None,
                    finished_at: None,
                    error: Some(reason.clone()),
                });
            }
            continue;
        }
        let key = stage_key(cfg, stage, upstream.as_ref())?;
        if let Some(rec) = previous.as_ref().and_then(|p| p.reusable(dir, stage, &key)) {
            log::info!("{stage}: up to date");
            let mut rec = rec.clone();
            rec.cached = true;
            manifest.stages.push(rec.clone());
            upstream = Some(rec);
            continue;
        }
        if !requested.contains(&stage) {
            blocked = Some(format!("stage {stage} has no usable output and was not requested"));
            continue;
        }
        if let Some(old) = previous.as_ref().and_then(|p| p.stage(stage)) {
            stages::clear_outputs(dir, &old.outputs);
        }
        log::info!("{stage}: running");
        let started_at = now();
        let result = match stage {
            Stage::Source => stages::source(&ctx),
            Stage::Detect => stages::detect(&ctx),
            Stage::Score => stages::score(&ctx),
            Stage::Estimate => stages::estimate(&ctx),
            Stage::Evaluate => stages::evaluate(&ctx),
            Stage::Report => stages::report(&ctx, &hash),
        };
        let record = match result.and_then(|files| {
            files
                .into_iter()
                .map(|f| {
                    let h = file_sha256(&dir.join(&f))?;
                    Ok((f, h))
                })
                .collect::<Result<_, PipelineError>>()
        }) {
            Ok(outputs) => StageRecord {
                stage,
                status: StageStatus::Completed,
                key,
                outputs,
                cached: false,
                started_at: Some(started_at),
                finished_at: Some(now()),
                error: None,
            },
            Err(e) => {
                log::error!("{stage} failed: {e}");
                blocked = Some(format!("upstream stage {stage} failed"));
                StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    key,
                    outputs: Default::default(),
                    cached: false,
                    started_at: Some(started_at),
                    finished_at: Some(now()),
                    error: Some(e.to_string()),
                }
            }
        };
        manifest.stages.push(record.clone());
        manifest.save(dir)?;
        upstream = Some(record);
    }
    manifest.save(dir)?;
    Ok(manifest)
}
