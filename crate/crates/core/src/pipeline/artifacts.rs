//! Files a run leaves in its output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::estimation::{
    estimate_from_dump, EstimationRun, Thresholds, LabelDumpRow, LabelEstimate, SpectralResult, SpectralResults,
};
use crate::scoring::{ModePair, ScoreTable};
use crate::types::{DemographicKey, FaceId, FaceRecord, ImageId, Label, QueryId, ServiceId};

pub const QUERIES: &str = "queries.csv";
pub const IMAGES: &str = "images.csv";
pub const WORLD: &str = "world.csv";
pub const DETECTIONS: &str = "detections.csv";
pub const GROUPS: &str = "groups.csv";
pub const FACES: &str = "faces.csv";
pub const SCORE_STORE: &str = "scores.jsonl";
pub const SCORES: &str = "scores.csv";
pub const MODES: &str = "modes.json";
pub const LABELS: &str = "labels.csv";
pub const SPECTRAL: &str = "spectral.json";
pub const CURVES_DIR: &str = "curves";
pub const BIAS: &str = "bias.csv";
pub const EVALUATION: &str = "evaluation.json";
pub const REPORT: &str = "report.json";
pub const SUMMARY: &str = "summary.txt";
pub const ANNOTATIONS: &str = "annotations.csv";
pub const QUEUE: &str = "annotation_queue.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: QueryId,
    pub query_string: String,
    pub demographic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image_id: ImageId,
    pub query_id: QueryId,
    pub location: String,
    pub published_at: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRow {
    pub face_id: FaceId,
    pub image_id: ImageId,
    pub query_id: QueryId,
    pub demographic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldRow {
    pub face_id: ImageId,
    pub query_id: QueryId,
    pub true_identity: u32,
    pub demographic: String,
    pub y_star: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCsvRow {
    pub service: ServiceId,
    pub group: String,
    pub eer_est: Option<f64>,
    pub eer_ann: Option<f64>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

/// Spectral results plus the faces whose label came from an annotator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectralArtifact {
    pub thresholds: Thresholds,
    pub annotated: BTreeSet<FaceId>,
    pub results: Vec<SpectralResult>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::csv(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

/// Like [`write_csv`] but writes `header` even when there are no rows.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| PipelineError::csv(path, e))?;
    w.write_record(header).map_err(|e| PipelineError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| PipelineError::csv(path, e))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| PipelineError::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| PipelineError::csv(path, e))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    Ok(())
}

pub fn parse_demographic(s: &str) -> Result<DemographicKey, PipelineError> {
    s.parse().map_err(PipelineError::Validation)
}

pub fn load_faces(dir: &Path) -> Result<BTreeMap<FaceId, FaceRecord>, PipelineError> {
    read_csv::<FaceRow>(&dir.join(FACES))?
        .into_iter()
        .map(|r| {
            Ok((
                r.face_id,
                FaceRecord {
                    face_id: r.face_id,
                    image_id: r.image_id,
                    query_id: r.query_id,
                    demographic: parse_demographic(&r.demographic)?,
                },
            ))
        })
        .collect()
}

pub fn load_scores(dir: &Path) -> Result<ScoreTable, PipelineError> {
    Ok(ScoreTable::new(read_csv(&dir.join(SCORES))?))
}

pub fn load_modes(dir: &Path) -> Result<BTreeMap<ServiceId, ModePair>, PipelineError> {
    read_json(&dir.join(MODES))
}

pub struct StoredEstimation {
    pub run: EstimationRun,
    /// Labels carried in the dump's `y` column.
    pub annotated: BTreeMap<FaceId, Label>,
    pub thresholds: Thresholds,
}

pub fn load_estimation(dir: &Path) -> Result<StoredEstimation, PipelineError> {
    let rows: Vec<LabelDumpRow> = read_csv(&dir.join(LABELS))?;
    let (mut estimate, annotated) = estimate_from_dump(&rows).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let spectral: SpectralArtifact = read_json(&dir.join(SPECTRAL))?;
    for f in &spectral.annotated {
        estimate.precondition_failed.remove(f);
    }
    estimate.annotated = spectral.annotated;
    let results: SpectralResults = spectral
        .results
        .into_iter()
        .map(|r| ((r.query, r.service.clone()), r))
        .collect();
    Ok(StoredEstimation {
        run: EstimationRun { estimate, results },
        annotated,
        thresholds: spectral.thresholds,
    })
}

pub fn spectral_artifact(estimate: &LabelEstimate, results: &SpectralResults, thresholds: &Thresholds) -> SpectralArtifact {
    SpectralArtifact {
        thresholds: *thresholds,
        annotated: estimate.annotated.clone(),
        results: results.values().cloned().collect(),
    }
}
