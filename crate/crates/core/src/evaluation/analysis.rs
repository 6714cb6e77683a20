use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    achievable_labels, curve_discrepancy, eer_bounds, equal_error_rate, fmr_fnmr_curve, fnmr_at_fmr,
    score_sets, EvalCurve, EvaluationError, ScoreSets,
};
use crate::estimation::{reconsolidate, EstimationRun, LabelEstimate, Thresholds};
use crate::scoring::ScoreTable;
use crate::types::{DemographicKey, FaceId, FaceRecord, Label, ServiceId};

/// Target false-match rates of the composition sweep.
pub const COMPOSITION_FMRS: [f64; 2] = [0.01, 0.001];

/// Curves and summary numbers for one service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEvaluation {
    pub service: ServiceId,
    pub annotated: EvalCurve,
    pub estimated: EvalCurve,
    /// Annotated labels on faces the estimation kept; absent when that leaves
    /// no genuine or no impostor pair.
    pub achievable: Option<EvalCurve>,
    pub eer_annotated: f64,
    pub eer_estimated: f64,
    pub eer_annotated_bounds: (f64, f64),
    pub eer_estimated_bounds: (f64, f64),
    /// Area between the annotated and estimated curves.
    pub discrepancy: f64,
    /// Share of the discrepancy from excluded faces (annotated vs achievable).
    pub discrepancy_exclusion: Option<f64>,
    /// Share from wrongly assigned faces (achievable vs estimated).
    pub discrepancy_assignment: Option<f64>,
}

fn curve_for(
    table: &ScoreTable,
    service: &ServiceId,
    labels: &BTreeMap<FaceId, Label>,
    faces: &BTreeMap<FaceId, FaceRecord>,
    confidence: f64,
) -> Result<EvalCurve, EvaluationError> {
    let sets = score_sets(table.for_service(service), labels, faces);
    empty_check(service, &sets)?;
    fmr_fnmr_curve(&sets, confidence)
}

fn empty_check(service: &ServiceId, sets: &ScoreSets) -> Result<(), EvaluationError> {
    if sets.is_usable() {
        Ok(())
    } else {
        Err(EvaluationError::EmptySet {
            service: service.clone(),
            genuine: sets.genuine.len(),
            impostor: sets.impostor.len(),
        })
    }
}

pub fn evaluate_service(
    table: &ScoreTable,
    service: &ServiceId,
    annotated: &BTreeMap<FaceId, Label>,
    estimated: &BTreeMap<FaceId, Label>,
    faces: &BTreeMap<FaceId, FaceRecord>,
    confidence: f64,
) -> Result<ServiceEvaluation, EvaluationError> {
    let ann = curve_for(table, service, annotated, faces, confidence)?;
    let est = curve_for(table, service, estimated, faces, confidence)?;
    let ach = curve_for(table, service, &achievable_labels(annotated, estimated), faces, confidence).ok();
    let eer_annotated = equal_error_rate(&ann);
    let eer_estimated = equal_error_rate(&est);
    Ok(ServiceEvaluation {
        service: service.clone(),
        eer_annotated_bounds: eer_bounds(&ann, eer_annotated, confidence)?,
        eer_estimated_bounds: eer_bounds(&est, eer_estimated, confidence)?,
        eer_annotated,
        eer_estimated,
        discrepancy: curve_discrepancy(&ann, &est),
        discrepancy_exclusion: ach.as_ref().map(|a| curve_discrepancy(&ann, a)),
        discrepancy_assignment: ach.as_ref().map(|a| curve_discrepancy(a, &est)),
        annotated: ann,
        estimated: est,
        achievable: ach,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub service: ServiceId,
    pub group: DemographicKey,
    pub eer_estimated: Option<f64>,
    pub eer_annotated: Option<f64>,
    pub estimated_bounds: Option<(f64, f64)>,
    pub annotated_bounds: Option<(f64, f64)>,
    /// Pair counts under the annotated labels.
    pub n_genuine: usize,
    pub n_impostor: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub rows: Vec<BiasRow>,
}

impl BiasTable {
    pub fn row(&self, group: &DemographicKey) -> Option<&BiasRow> {
        self.rows.iter().find(|r| &r.group == group)
    }
}

/// Equal error rates per demographic group. Groups without genuine or
/// impostor pairs are listed with no EER.
pub fn disaggregate_bias(
    table: &ScoreTable,
    service: &ServiceId,
    annotated: &BTreeMap<FaceId, Label>,
    estimated: &BTreeMap<FaceId, Label>,
    faces: &BTreeMap<FaceId, FaceRecord>,
    confidence: f64,
) -> Result<BiasTable, EvaluationError> {
    let groups: BTreeSet<&DemographicKey> = faces.values().map(|f| &f.demographic).collect();
    let in_group = |labels: &BTreeMap<FaceId, Label>, g: &DemographicKey| -> BTreeMap<FaceId, Label> {
        labels
            .iter()
            .map(|(f, &l)| {
                let member = faces.get(f).is_some_and(|r| &r.demographic == g);
                (*f, if member { l } else { Label::Unknown })
            })
            .collect()
    };
    let eer = |sets: &ScoreSets| -> Result<Option<(f64, (f64, f64))>, EvaluationError> {
        if !sets.is_usable() {
            return Ok(None);
        }
        let c = fmr_fnmr_curve(sets, confidence)?;
        let e = equal_error_rate(&c);
        Ok(Some((e, eer_bounds(&c, e, confidence)?)))
    };
    let mut rows = Vec::new();
    for g in groups {
        let ann = score_sets(table.for_service(service), &in_group(annotated, g), faces);
        let est = score_sets(table.for_service(service), &in_group(estimated, g), faces);
        let a = eer(&ann)?;
        let e = eer(&est)?;
        if a.is_none() || e.is_none() {
            log::warn!("service {service}, group {g}: not enough pairs for an equal error rate");
        }
        rows.push(BiasRow {
            service: service.clone(),
            group: g.clone(),
            eer_estimated: e.map(|x| x.0),
            eer_annotated: a.map(|x| x.0),
            estimated_bounds: e.map(|x| x.1),
            annotated_bounds: a.map(|x| x.1),
            n_genuine: ann.genuine.len(),
            n_impostor: ann.impostor.len(),
        });
    }
    Ok(BiasTable { rows })
}

/// Counts over (annotated, estimated) labels in `[1, 0, -1]` order, plus the
/// faces that failed a precondition and so were never estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub counts: [[u64; 3]; 3],
    pub n_excluded: u64,
}

impl ConfusionMatrix3 {
    pub fn get(&self, y: Label, y_hat: Label) -> u64 {
        self.counts[y.index()][y_hat.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion_matrix(
    annotated: &BTreeMap<FaceId, Label>,
    estimate: &LabelEstimate,
) -> Result<ConfusionMatrix3, EvaluationError> {
    let mut cm = ConfusionMatrix3::default();
    for (f, &y_hat) in &estimate.labels {
        if estimate.precondition_failed.contains(f) {
            cm.n_excluded += 1;
            continue;
        }
        let y = annotated
            .get(f)
            .ok_or_else(|| EvaluationError::Validation(format!("face {f} has no annotated label")))?;
        cm.counts[y.index()][y_hat.index()] += 1;
    }
    Ok(cm)
}

/// Agreement among faces that both labellings place in {0, 1}.
pub fn agreement_rate(cm: &ConfusionMatrix3) -> Result<f64, EvaluationError> {
    let (p, n) = (Label::Positive, Label::Negative);
    let agree = cm.get(p, p) + cm.get(n, n);
    let total = agree + cm.get(p, n) + cm.get(n, p);
    if total == 0 {
        return Err(EvaluationError::Validation("no face is labelled 0 or 1 by both".into()));
    }
    Ok(agree as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub service: ServiceId,
    /// Discrepancy when the service's labels come from its own matrix alone.
    pub discrepancy_no_mv: Option<f64>,
    /// Discrepancy under the labels consolidated across all services.
    pub discrepancy_mv: Option<f64>,
}

/// Per service, curve discrepancy before and after majority-vote consolidation.
pub fn majority_vote_ablation(
    table: &ScoreTable,
    run: &EstimationRun,
    annotated: &BTreeMap<FaceId, Label>,
    faces: &BTreeMap<FaceId, FaceRecord>,
    services: &[ServiceId],
    thresholds: &Thresholds,
    confidence: f64,
) -> Result<Vec<AblationRow>, EvaluationError> {
    services
        .par_iter()
        .map(|s| {
            let ann = curve_for(table, s, annotated, faces, confidence)?;
            let single = reconsolidate(run, std::slice::from_ref(s), thresholds);
            let discrepancy = |labels: &BTreeMap<FaceId, Label>| {
                curve_for(table, s, labels, faces, confidence)
                    .ok()
                    .map(|c| curve_discrepancy(&ann, &c))
            };
            Ok(AblationRow {
                service: s.clone(),
                discrepancy_no_mv: discrepancy(&single.labels),
                discrepancy_mv: discrepancy(&run.estimate.labels),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub subset: Vec<ServiceId>,
    pub service: ServiceId,
    pub fmr: f64,
    pub fnmr_annotated: f64,
    pub fnmr_estimated: Option<f64>,
    /// `|FNMR_estimated - FNMR_annotated|` at `fmr`.
    pub delta_fnmr: Option<f64>,
}

/// Re-runs consolidation on every subset of at least three services and
/// reports the FNMR gap at each target FMR for each member service.
pub fn service_composition_sweep(
    table: &ScoreTable,
    run: &EstimationRun,
    annotated: &BTreeMap<FaceId, Label>,
    faces: &BTreeMap<FaceId, FaceRecord>,
    services: &[ServiceId],
    thresholds: &Thresholds,
    fmrs: &[f64],
    confidence: f64,
) -> Result<Vec<CompositionRow>, EvaluationError> {
    let n = services.len();
    if n < 3 {
        return Err(EvaluationError::Validation(format!(
            "composition sweep needs at least 3 services, got {n}"
        )));
    }
    if n > 20 {
        return Err(EvaluationError::Validation(format!("too many services for a subset sweep: {n}")));
    }
    let ann: BTreeMap<&ServiceId, EvalCurve> = services
        .iter()
        .map(|s| Ok((s, curve_for(table, s, annotated, faces, confidence)?)))
        .collect::<Result<_, EvaluationError>>()?;

    let mut subsets: Vec<Vec<ServiceId>> = (1u32..1 << n)
        .filter(|m| m.count_ones() >= 3)
        .map(|m| (0..n).filter(|&i| m & (1 << i) != 0).map(|i| services[i].clone()).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));

    let per_subset: Vec<Vec<CompositionRow>> = subsets
        .par_iter()
        .map(|subset| {
            let labels = reconsolidate(run, subset, thresholds).labels;
            let mut rows = Vec::new();
            for s in subset {
                let est = curve_for(table, s, &labels, faces, confidence).ok();
                for &fmr in fmrs {
                    let fa = fnmr_at_fmr(&ann[s], fmr);
                    let fe = est.as_ref().map(|c| fnmr_at_fmr(c, fmr));
                    rows.push(CompositionRow {
                        subset: subset.clone(),
                        service: s.clone(),
                        fmr,
                        fnmr_annotated: fa,
                        fnmr_estimated: fe,
                        delta_fnmr: fe.map(|e| (e - fa).abs()),
                    });
                }
            }
            rows
        })
        .collect();
    Ok(per_subset.into_iter().flatten().collect())
}
