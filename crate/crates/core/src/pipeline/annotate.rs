use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::*;
use super::config::RunConfig;
use super::manifest::{RunManifest, Stage};
use super::PipelineError;
use crate::estimation::{ambiguity_rank, read_annotations, write_annotations, ErrorType};
use crate::types::{FaceId, ImageId, Label, QueryId};

const QUEUE_HEADER: [&str; 9] = [
    "rank",
    "face_id",
    "query_id",
    "query_string",
    "query_size",
    "error_type",
    "ambiguity",
    "estimated_y",
    "location",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueRow {
    pub rank: usize,
    pub face_id: FaceId,
    pub query_id: QueryId,
    pub query_string: String,
    pub query_size: usize,
    pub error_type: ErrorType,
    pub ambiguity: Option<f64>,
    pub estimated_y: Label,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueExport {
    pub path: PathBuf,
    pub rows: Vec<QueueRow>,
    /// Length of the full ambiguity queue.
    pub queue_len: usize,
}

impl QueueExport {
    pub fn truncated(&self, requested: usize) -> bool {
        requested > self.queue_len
    }
}

/// Writes the `k` most ambiguous faces of a finished estimation, with the
/// context an annotator needs, to `annotation_queue.csv` in the run directory.
pub fn export_annotation_queue(dir: &Path, k: usize) -> Result<QueueExport, PipelineError> {
    let manifest = RunManifest::load(dir)?
        .ok_or_else(|| PipelineError::Validation(format!("{} has no run manifest", dir.display())))?;
    if !manifest.is_complete(Stage::Estimate) {
        return Err(PipelineError::Validation("the estimate stage has not completed".into()));
    }
    let stored = load_estimation(dir)?;
    let queue = ambiguity_rank(&stored.run.estimate, &stored.run.results, &stored.thresholds);
    if k > queue.len() {
        log::warn!("asked for {k} faces but the queue holds {}; exporting all", queue.len());
    }
    let queries: HashMap<QueryId, String> = read_csv::<QueryRow>(&dir.join(QUERIES))?
        .into_iter()
        .map(|q| (q.query_id, q.query_string))
        .collect();
    let locations: HashMap<ImageId, String> = read_csv::<ImageRow>(&dir.join(IMAGES))?
        .into_iter()
        .map(|i| (i.image_id, i.location))
        .collect();
    let faces = load_faces(dir)?;
    let rows: Vec<QueueRow> = queue
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| QueueRow {
            rank: i + 1,
            face_id: e.face_id,
            query_id: e.query_id,
            query_string: queries.get(&e.query_id).cloned().unwrap_or_default(),
            query_size: e.query_size,
            error_type: e.kind,
            ambiguity: e.ambiguity,
            estimated_y: stored.run.estimate.label(e.face_id),
            location: faces
                .get(&e.face_id)
                .and_then(|f| locations.get(&f.image_id))
                .cloned()
                .unwrap_or_default(),
        })
        .collect();
    let path = dir.join(QUEUE);
    write_csv_with_header(&path, &QUEUE_HEADER, &rows)?;
    Ok(QueueExport {
        path,
        rows,
        queue_len: queue.len(),
    })
}

/// Adds an annotation CSV to the run's accumulated annotations and re-runs
/// estimation and everything after it.
pub fn merge_annotation_file(cfg: &RunConfig, annotations: &Path) -> Result<RunManifest, PipelineError> {
    let read = |p: &Path| -> Result<BTreeMap<FaceId, Label>, PipelineError> {
        let f = fs::File::open(p).map_err(|e| PipelineError::io(p, e))?;
        read_annotations(f).map_err(|e| PipelineError::Validation(format!("{}: {e}", p.display())))
    };
    let incoming = read(annotations)?;
    let faces = load_faces(&cfg.out_dir)?;
    if let Some(f) = incoming.keys().find(|f| !faces.contains_key(f)) {
        return Err(PipelineError::Validation(format!("annotation for unknown face {f}")));
    }
    let merged_path = cfg.out_dir.join(ANNOTATIONS);
    let mut merged = if merged_path.is_file() {
        read(&merged_path)?
    } else {
        BTreeMap::new()
    };
    merged.extend(incoming);
    let mut buf = Vec::new();
    write_annotations(&mut buf, &merged).map_err(|e| PipelineError::Validation(e.to_string()))?;
    fs::write(&merged_path, buf).map_err(|e| PipelineError::io(&merged_path, e))?;
    super::run(cfg, &[Stage::Estimate, Stage::Evaluate, Stage::Report])
}
