use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::{read_csv, read_json, EVALUATION};
use super::manifest::{RunManifest, Stage};
use super::stages::{curve_file, EvaluationSummary, ServiceSummary};
use super::PipelineError;
use crate::evaluation::{fnmr_at_fmr, CurveKind, CurvePoint, CurveRow, EvalCurve};
use crate::types::ServiceId;

/// False-match rates at which two runs' estimated curves are compared.
pub const DRIFT_FMRS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub fmr: f64,
    pub fnmr_a: f64,
    pub fnmr_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub service: ServiceId,
    pub run_a: String,
    pub run_b: String,
    pub eer_a: f64,
    pub eer_a_bounds: (f64, f64),
    pub eer_b: f64,
    pub eer_b_bounds: (f64, f64),
    /// `eer_b - eer_a`.
    pub eer_delta: f64,
    pub points: Vec<DriftPoint>,
    /// The two runs' EER intervals do not overlap.
    pub probable_model_change: bool,
}

struct RunView {
    name: String,
    summary: ServiceSummary,
    curve: EvalCurve,
}

fn load_run(dir: &Path, service: &ServiceId) -> Result<RunView, PipelineError> {
    let manifest = RunManifest::load(dir)?
        .ok_or_else(|| PipelineError::Validation(format!("{} has no run manifest", dir.display())))?;
    if !manifest.is_complete(Stage::Evaluate) {
        return Err(PipelineError::Validation(format!(
            "run {} has not completed the evaluate stage",
            manifest.name
        )));
    }
    let eval: EvaluationSummary = read_json(&dir.join(EVALUATION))?;
    let summary = eval.service(service).cloned().ok_or_else(|| {
        PipelineError::Validation(format!("run {} did not evaluate service {service}", manifest.name))
    })?;
    let rows: Vec<CurveRow> = read_csv(&dir.join(curve_file(service)))?;
    let points = rows
        .into_iter()
        .filter(|r| r.which == CurveKind::Estimated)
        .map(|r| CurvePoint {
            threshold: r.threshold,
            fmr: r.fmr,
            fnmr: r.fnmr,
            fmr_lo: r.fmr_lo,
            fmr_hi: r.fmr_hi,
            fnmr_lo: r.fnmr_lo,
            fnmr_hi: r.fnmr_hi,
        })
        .collect();
    let curve = EvalCurve {
        points,
        n_genuine: summary.n_genuine_estimated,
        n_impostor: summary.n_impostor_estimated,
    };
    Ok(RunView {
        name: manifest.name,
        summary,
        curve,
    })
}

/// Compares one service's annotation-free results across two runs.
pub fn compare_runs(dir_a: &Path, dir_b: &Path, service: &ServiceId) -> Result<DriftReport, PipelineError> {
    let a = load_run(dir_a, service)?;
    let b = load_run(dir_b, service)?;
    let (alo, ahi) = a.summary.eer_estimated_bounds;
    let (blo, bhi) = b.summary.eer_estimated_bounds;
    let points = DRIFT_FMRS
        .iter()
        .map(|&fmr| {
            let fa = fnmr_at_fmr(&a.curve, fmr);
            let fb = fnmr_at_fmr(&b.curve, fmr);
            DriftPoint {
                fmr,
                fnmr_a: fa,
                fnmr_b: fb,
                delta: fb - fa,
            }
        })
        .collect();
    Ok(DriftReport {
        service: service.clone(),
        run_a: a.name,
        run_b: b.name,
        eer_a: a.summary.eer_estimated,
        eer_a_bounds: (alo, ahi),
        eer_b: b.summary.eer_estimated,
        eer_b_bounds: (blo, bhi),
        eer_delta: b.summary.eer_estimated - a.summary.eer_estimated,
        points,
        probable_model_change: ahi < blo || bhi < alo,
    })
}
