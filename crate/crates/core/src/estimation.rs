//! Identity-label estimation from the services' own confidence matrices.
//!
//! For one query and one service the confidence matrix is close to block
//! diagonal: the faces of the person the query names form one large block of
//! high confidences. The leading eigenpair exposes it. An eigenvalue above
//! `T` means a block of roughly that many faces, and the eigenvector, scaled
//! by the square root of its eigenvalue, scores block members near one and
//! everyone else near zero. Queries with no such block, with several, or with
//! a mixed-sign indicator are dropped. The per-service indicators are then
//! combined by strict majority vote.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{assemble_confidence_matrix, ConfidenceMatrix, ScoreTable, ScoringError};
use crate::types::{FaceId, FaceRecord, Label, QueryId, ServiceId};

/// Entries of an accepted indicator below `-NEGATIVE_TOLERANCE` reject it.
pub const NEGATIVE_TOLERANCE: f64 = 0.02;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("eigen-decomposition did not converge for query {query}, service {service}")]
    NoConvergence { query: QueryId, service: ServiceId },
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Minimum eigenvalue `T` of a prevalent identity block.
    pub eigen: f64,
    /// Indicator threshold `tau` for a face to count as a block member.
    pub z: f64,
    pub min_prevalent: usize,
    pub min_crawled: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eigen: 4.0,
            z: 0.2,
            min_prevalent: 5,
            min_crawled: 8,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), EstimationError> {
        let bad = |m: String| Err(EstimationError::Validation(m));
        if !(self.eigen > 1.0) {
            return bad(format!("eigenvalue threshold must exceed 1, got {}", self.eigen));
        }
        if !(self.z > 0.0 && self.z < 1.0) {
            return bad(format!("z threshold must be in (0, 1), got {}", self.z));
        }
        if self.min_prevalent < 2 {
            return bad(format!("min_prevalent must be >= 2, got {}", self.min_prevalent));
        }
        if self.min_crawled < self.min_prevalent {
            return bad(format!(
                "min_crawled ({}) must be >= min_prevalent ({})",
                self.min_crawled, self.min_prevalent
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoPrevalentIdentity,
    MultipleIdentities,
    NegativeEntries,
    /// Too many failed pairs to assemble a matrix.
    TooFewFaces,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpectralOutcome {
    Accepted { eigenvalue: f64, z: Vec<f64> },
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    pub query: QueryId,
    pub service: ServiceId,
    pub faces: Vec<FaceId>,
    pub outcome: SpectralOutcome,
}

impl SpectralResult {
    pub fn is_accepted(&self) -> bool {
        matches!(self.outcome, SpectralOutcome::Accepted { .. })
    }

    /// Indicator value of `face`, if accepted and the face is in the matrix.
    pub fn z_of(&self, face: FaceId) -> Option<f64> {
        match &self.outcome {
            SpectralOutcome::Accepted { z, .. } => {
                self.faces.binary_search(&face).ok().map(|i| z[i])
            }
            SpectralOutcome::Rejected(_) => None,
        }
    }
}

/// Finds the single prevalent identity block of `matrix`, if there is one.
pub fn spectral_identity(
    matrix: &ConfidenceMatrix,
    eigen_threshold: f64,
) -> Result<SpectralResult, EstimationError> {
    let result = |outcome| SpectralResult {
        query: matrix.query,
        service: matrix.service.clone(),
        faces: matrix.faces.clone(),
        outcome,
    };
    if matrix.len() < 2 {
        return Ok(result(SpectralOutcome::Rejected(RejectReason::TooFewFaces)));
    }
    let eig = SymmetricEigen::try_new(matrix.values.clone(), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| EstimationError::NoConvergence {
            query: matrix.query,
            service: matrix.service.clone(),
        })?;
    // The relative slack keeps an exact block of size T from passing on rounding.
    let cut = eigen_threshold * (1.0 + 1e-9);
    let selected: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > cut)
        .collect();
    let k = match selected.as_slice() {
        [] => return Ok(result(SpectralOutcome::Rejected(RejectReason::NoPrevalentIdentity))),
        [k] => *k,
        _ => return Ok(result(SpectralOutcome::Rejected(RejectReason::MultipleIdentities))),
    };
    let eigenvalue = eig.eigenvalues[k];
    let v = eig.eigenvectors.column(k);
    let sign = if v.sum() < 0.0 { -1.0 } else { 1.0 };
    let scale = sign * eigenvalue.sqrt();
    let z: Vec<f64> = v.iter().map(|x| x * scale).collect();
    if z.iter().any(|&x| x < -NEGATIVE_TOLERANCE) {
        return Ok(result(SpectralOutcome::Rejected(RejectReason::NegativeEntries)));
    }
    Ok(result(SpectralOutcome::Accepted { eigenvalue, z }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    /// Fewer crawled faces than `min_crawled`.
    TooFewCrawled,
    /// Some service did not find exactly one identity.
    NoConsensus,
    /// Fewer than `min_prevalent` faces voted into the identity.
    TooFewPrevalent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryDisposition {
    Included,
    Excluded(ExclusionReason),
}

impl QueryDisposition {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryDisposition::Included => "included",
            QueryDisposition::Excluded(ExclusionReason::TooFewCrawled) => "excluded_too_few_crawled",
            QueryDisposition::Excluded(ExclusionReason::NoConsensus) => "excluded_no_consensus",
            QueryDisposition::Excluded(ExclusionReason::TooFewPrevalent) => "excluded_too_few_prevalent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "included" => QueryDisposition::Included,
            "excluded_too_few_crawled" => QueryDisposition::Excluded(ExclusionReason::TooFewCrawled),
            "excluded_no_consensus" => QueryDisposition::Excluded(ExclusionReason::NoConsensus),
            "excluded_too_few_prevalent" => QueryDisposition::Excluded(ExclusionReason::TooFewPrevalent),
            _ => return None,
        })
    }
}

/// Labels of one query's faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEstimate {
    pub query: QueryId,
    pub disposition: QueryDisposition,
    pub labels: BTreeMap<FaceId, Label>,
    /// Services voting the face in minus services voting it out.
    pub margins: BTreeMap<FaceId, i32>,
    /// Faces that fail a precondition (query too small, or some service has
    /// no indicator for the face); they sit outside the evaluation entirely.
    pub precondition_failed: BTreeSet<FaceId>,
}

/// Combines per-service indicators for one query into labels.
pub fn consolidate(
    query: QueryId,
    faces: &[FaceId],
    results: &BTreeMap<ServiceId, SpectralResult>,
    thresholds: &Thresholds,
) -> QueryEstimate {
    let mut faces = faces.to_vec();
    faces.sort();
    faces.dedup();
    let all = |label: Label| faces.iter().map(|&f| (f, label)).collect::<BTreeMap<_, _>>();
    let excluded = |reason, precondition: bool| QueryEstimate {
        query,
        disposition: QueryDisposition::Excluded(reason),
        labels: all(Label::Unknown),
        margins: BTreeMap::new(),
        precondition_failed: if precondition {
            faces.iter().copied().collect()
        } else {
            BTreeSet::new()
        },
    };

    if faces.len() < thresholds.min_crawled {
        return excluded(ExclusionReason::TooFewCrawled, true);
    }
    if results.is_empty() || results.values().any(|r| !r.is_accepted()) {
        return excluded(ExclusionReason::NoConsensus, false);
    }

    let mut labels = BTreeMap::new();
    let mut margins = BTreeMap::new();
    let mut precondition_failed = BTreeSet::new();
    let n_services = results.len();
    for &f in &faces {
        let zs: Option<Vec<f64>> = results.values().map(|r| r.z_of(f)).collect();
        let Some(zs) = zs else {
            labels.insert(f, Label::Unknown);
            precondition_failed.insert(f);
            continue;
        };
        let above = zs.iter().filter(|&&z| z > thresholds.z).count();
        margins.insert(f, above as i32 - (n_services - above) as i32);
        let label = if 2 * above > n_services {
            Label::Positive
        } else {
            Label::Negative
        };
        labels.insert(f, label);
    }

    let prevalent = labels.values().filter(|l| l.is_positive()).count();
    if prevalent < thresholds.min_prevalent {
        let mut e = excluded(ExclusionReason::TooFewPrevalent, false);
        e.margins = margins;
        e.precondition_failed = precondition_failed;
        return e;
    }
    QueryEstimate {
        query,
        disposition: QueryDisposition::Included,
        labels,
        margins,
        precondition_failed,
    }
}

/// Estimated labels for a whole corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelEstimate {
    pub labels: BTreeMap<FaceId, Label>,
    pub margins: BTreeMap<FaceId, i32>,
    pub face_query: BTreeMap<FaceId, QueryId>,
    pub dispositions: BTreeMap<QueryId, QueryDisposition>,
    pub precondition_failed: BTreeSet<FaceId>,
    /// Faces whose label came from a human annotation.
    pub annotated: BTreeSet<FaceId>,
}

impl LabelEstimate {
    pub fn from_queries(queries: impl IntoIterator<Item = QueryEstimate>) -> Self {
        let mut out = Self::default();
        for q in queries {
            for (&f, &l) in &q.labels {
                out.labels.insert(f, l);
                out.face_query.insert(f, q.query);
            }
            out.margins.extend(q.margins);
            out.precondition_failed.extend(q.precondition_failed);
            out.dispositions.insert(q.query, q.disposition);
        }
        out
    }

    pub fn label(&self, face: FaceId) -> Label {
        self.labels.get(&face).copied().unwrap_or(Label::Unknown)
    }

    pub fn query_sizes(&self) -> BTreeMap<QueryId, usize> {
        let mut sizes = BTreeMap::new();
        for q in self.face_query.values() {
            *sizes.entry(*q).or_insert(0) += 1;
        }
        sizes
    }
}

/// Per-(query, service) spectral results keyed for deterministic iteration.
pub type SpectralResults = BTreeMap<(QueryId, ServiceId), SpectralResult>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimationRun {
    pub estimate: LabelEstimate,
    pub results: SpectralResults,
}

impl EstimationRun {
    /// Results of one query, keyed by service.
    pub fn query_results(&self, query: QueryId) -> BTreeMap<ServiceId, SpectralResult> {
        self.results
            .range((query, ServiceId::new(""))..)
            .take_while(|((q, _), _)| *q == query)
            .map(|((_, s), r)| (s.clone(), r.clone()))
            .collect()
    }
}

/// Spectral results for one query under every service; assembly failures
/// become `TooFewFaces` rejections.
pub fn query_spectral_results(
    query: QueryId,
    faces: &[FaceId],
    table: &ScoreTable,
    services: &[ServiceId],
    thresholds: &Thresholds,
) -> Result<BTreeMap<ServiceId, SpectralResult>, EstimationError> {
    let mut out = BTreeMap::new();
    for s in services {
        let r = match assemble_confidence_matrix(query, s, faces, table, thresholds.min_prevalent) {
            Ok(m) => spectral_identity(&m, thresholds.eigen)?,
            Err(ScoringError::TooFewFaces { .. }) => SpectralResult {
                query,
                service: s.clone(),
                faces: Vec::new(),
                outcome: SpectralOutcome::Rejected(RejectReason::TooFewFaces),
            },
            Err(e) => return Err(e.into()),
        };
        out.insert(s.clone(), r);
    }
    Ok(out)
}

/// Runs the estimation over every query. Queries below `min_crawled` are not
/// decomposed at all. Per-query work runs on the current rayon pool; the
/// result does not depend on its size.
pub fn estimate_labels(
    faces: &[FaceRecord],
    table: &ScoreTable,
    services: &[ServiceId],
    thresholds: &Thresholds,
) -> Result<EstimationRun, EstimationError> {
    thresholds.validate()?;
    let mut by_query: BTreeMap<QueryId, Vec<FaceId>> = BTreeMap::new();
    for f in faces {
        by_query.entry(f.query_id).or_default().push(f.face_id);
    }
    let queries: Vec<(QueryId, Vec<FaceId>)> = by_query.into_iter().collect();
    let per_query: Vec<(QueryEstimate, BTreeMap<ServiceId, SpectralResult>)> = queries
        .par_iter()
        .map(|(q, ids)| {
            let results = if ids.len() < thresholds.min_crawled {
                BTreeMap::new()
            } else {
                query_spectral_results(*q, ids, table, services, thresholds)?
            };
            Ok((consolidate(*q, ids, &results, thresholds), results))
        })
        .collect::<Result<_, EstimationError>>()?;

    let mut results = SpectralResults::new();
    let mut estimates = Vec::with_capacity(per_query.len());
    for (est, res) in per_query {
        for (s, r) in res {
            results.insert((est.query, s), r);
        }
        estimates.push(est);
    }
    Ok(EstimationRun {
        estimate: LabelEstimate::from_queries(estimates),
        results,
    })
}

/// Re-consolidates stored spectral results using only `services`.
pub fn reconsolidate(
    run: &EstimationRun,
    services: &[ServiceId],
    thresholds: &Thresholds,
) -> LabelEstimate {
    let mut by_query: BTreeMap<QueryId, Vec<FaceId>> = BTreeMap::new();
    for (&f, &q) in &run.estimate.face_query {
        by_query.entry(q).or_default().push(f);
    }
    let keep: BTreeSet<&ServiceId> = services.iter().collect();
    LabelEstimate::from_queries(by_query.into_iter().map(|(q, ids)| {
        let results: BTreeMap<ServiceId, SpectralResult> = run
            .query_results(q)
            .into_iter()
            .filter(|(s, _)| keep.contains(s))
            .collect();
        consolidate(q, &ids, &results, thresholds)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorType {
    /// Excluded face; annotating it grows the evaluated set.
    A,
    /// Included face whose label may be wrong.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub face_id: FaceId,
    pub query_id: QueryId,
    pub query_size: usize,
    pub kind: ErrorType,
    /// Median over services of `|z - tau|`; absent for type A entries.
    pub ambiguity: Option<f64>,
}

/// Orders not-yet-annotated faces for human review: excluded faces first,
/// largest queries first, then included faces from most to least ambiguous.
pub fn ambiguity_rank(
    estimate: &LabelEstimate,
    results: &SpectralResults,
    thresholds: &Thresholds,
) -> Vec<QueueEntry> {
    let sizes = estimate.query_sizes();
    let mut type_a = Vec::new();
    let mut type_b = Vec::new();
    for (&f, &label) in &estimate.labels {
        if estimate.annotated.contains(&f) {
            continue;
        }
        let q = estimate.face_query[&f];
        let size = sizes[&q];
        if label == Label::Unknown {
            type_a.push(QueueEntry {
                face_id: f,
                query_id: q,
                query_size: size,
                kind: ErrorType::A,
                ambiguity: None,
            });
            continue;
        }
        let mut dist: Vec<f64> = results
            .range((q, ServiceId::new(""))..)
            .take_while(|((rq, _), _)| *rq == q)
            .filter_map(|(_, r)| r.z_of(f))
            .map(|z| (z - thresholds.z).abs())
            .collect();
        type_b.push(QueueEntry {
            face_id: f,
            query_id: q,
            query_size: size,
            kind: ErrorType::B,
            ambiguity: median(&mut dist),
        });
    }
    type_a.sort_by(|a, b| {
        b.query_size
            .cmp(&a.query_size)
            .then(a.query_id.cmp(&b.query_id))
            .then(a.face_id.cmp(&b.face_id))
    });
    type_b.sort_by(|a, b| {
        let (x, y) = (a.ambiguity.unwrap_or(f64::INFINITY), b.ambiguity.unwrap_or(f64::INFINITY));
        x.total_cmp(&y).then(a.face_id.cmp(&b.face_id))
    });
    type_a.extend(type_b);
    type_a
}

pub(crate) fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2.0
    })
}

/// Replaces estimated labels with human annotations for the first
/// `ceil(budget * queue.len())` queue entries.
pub fn apply_annotations(
    estimate: &LabelEstimate,
    queue: &[QueueEntry],
    annotations: &BTreeMap<FaceId, Label>,
    budget: f64,
) -> Result<LabelEstimate, EstimationError> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(EstimationError::Validation(format!("budget must be in [0, 1], got {budget}")));
    }
    if let Some(f) = annotations.keys().find(|f| !estimate.labels.contains_key(f)) {
        return Err(EstimationError::Validation(format!("annotation for unknown face {f}")));
    }
    let take = (budget * queue.len() as f64).ceil() as usize;
    let mut out = estimate.clone();
    for entry in &queue[..take.min(queue.len())] {
        let y = annotations.get(&entry.face_id).ok_or_else(|| {
            EstimationError::Validation(format!("no annotation for queued face {}", entry.face_id))
        })?;
        out.labels.insert(entry.face_id, *y);
        out.annotated.insert(entry.face_id);
        out.precondition_failed.remove(&entry.face_id);
    }
    Ok(out)
}

/// Applies every given annotation regardless of queue position.
pub fn merge_annotations(
    estimate: &LabelEstimate,
    annotations: &BTreeMap<FaceId, Label>,
) -> Result<LabelEstimate, EstimationError> {
    let mut out = estimate.clone();
    for (f, y) in annotations {
        if !out.labels.contains_key(f) {
            return Err(EstimationError::Validation(format!("annotation for unknown face {f}")));
        }
        out.labels.insert(*f, *y);
        out.annotated.insert(*f);
        out.precondition_failed.remove(f);
    }
    Ok(out)
}

/// One line of the label dump CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDumpRow {
    pub query_id: QueryId,
    pub face_id: FaceId,
    pub y: Option<Label>,
    pub estimated_y: Label,
    pub vote_margin: Option<i32>,
    /// Query disposition, or `precondition_failed` for a face of an included
    /// query that some service could not score.
    pub disposition: String,
}

const PRECONDITION_FAILED: &str = "precondition_failed";

pub fn label_dump_rows(
    estimate: &LabelEstimate,
    annotated: Option<&BTreeMap<FaceId, Label>>,
) -> Vec<LabelDumpRow> {
    let mut rows: Vec<LabelDumpRow> = estimate
        .labels
        .iter()
        .map(|(&f, &l)| {
            let q = estimate.face_query[&f];
            let disposition = estimate.dispositions.get(&q).copied().unwrap_or(QueryDisposition::Included);
            let disposition = if disposition == QueryDisposition::Included && estimate.precondition_failed.contains(&f) {
                PRECONDITION_FAILED.to_owned()
            } else {
                disposition.as_str().to_owned()
            };
            LabelDumpRow {
                query_id: q,
                face_id: f,
                y: annotated.and_then(|a| a.get(&f).copied()),
                estimated_y: l,
                vote_margin: estimate.margins.get(&f).copied(),
                disposition,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.query_id, r.face_id));
    rows
}

/// Rebuilds an estimate and whatever annotations the dump carries.
pub fn estimate_from_dump(
    rows: &[LabelDumpRow],
) -> Result<(LabelEstimate, BTreeMap<FaceId, Label>), EstimationError> {
    let mut est = LabelEstimate::default();
    let mut annotated = BTreeMap::new();
    for r in rows {
        if est.labels.insert(r.face_id, r.estimated_y).is_some() {
            return Err(EstimationError::Validation(format!("face {} listed twice", r.face_id)));
        }
        est.face_query.insert(r.face_id, r.query_id);
        if let Some(m) = r.vote_margin {
            est.margins.insert(r.face_id, m);
        }
        if let Some(y) = r.y {
            annotated.insert(r.face_id, y);
        }
        let disposition = if r.disposition == PRECONDITION_FAILED {
            est.precondition_failed.insert(r.face_id);
            QueryDisposition::Included
        } else {
            let d = QueryDisposition::parse(&r.disposition).ok_or_else(|| {
                EstimationError::Validation(format!("unknown disposition {:?} for face {}", r.disposition, r.face_id))
            })?;
            if d == QueryDisposition::Excluded(ExclusionReason::TooFewCrawled) {
                est.precondition_failed.insert(r.face_id);
            }
            d
        };
        if let Some(prev) = est.dispositions.insert(r.query_id, disposition) {
            if prev != disposition {
                return Err(EstimationError::Validation(format!(
                    "query {} has conflicting dispositions",
                    r.query_id
                )));
            }
        }
    }
    Ok((est, annotated))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub face_id: FaceId,
    pub y: Label,
}

pub fn read_annotations<R: std::io::Read>(reader: R) -> Result<BTreeMap<FaceId, Label>, EstimationError> {
    let mut out = BTreeMap::new();
    for (i, row) in csv::Reader::from_reader(reader).deserialize::<AnnotationRow>().enumerate() {
        let row = row.map_err(|e| EstimationError::Validation(format!("annotation row {}: {e}", i + 1)))?;
        if out.insert(row.face_id, row.y).is_some() {
            return Err(EstimationError::Validation(format!("face {} annotated twice", row.face_id)));
        }
    }
    Ok(out)
}

pub fn write_annotations<W: std::io::Write>(
    writer: W,
    annotations: &BTreeMap<FaceId, Label>,
) -> Result<(), EstimationError> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| EstimationError::Validation(format!("writing annotations: {e}"));
    w.write_record(["face_id", "y"]).map_err(err)?;
    for (f, y) in annotations {
        w.write_record([f.to_string(), y.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| EstimationError::Validation(format!("writing annotations: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn block_matrix(blocks: &[usize], singles: usize) -> ConfidenceMatrix {
        let n: usize = blocks.iter().sum::<usize>() + singles;
        let mut m = DMatrix::identity(n, n);
        let mut start = 0;
        for &b in blocks {
            for i in start..start + b {
                for j in start..start + b {
                    m[(i, j)] = 1.0;
                }
            }
            start += b;
        }
        ConfidenceMatrix::new(QueryId(0), ServiceId::new("s"), (0..n as u32).map(FaceId).collect(), m).unwrap()
    }

    fn accepted_z(r: &SpectralResult) -> &[f64] {
        match &r.outcome {
            SpectralOutcome::Accepted { z, .. } => z,
            other => panic!("expected acceptance, got {other:?}"),
        }
    }

    #[test]
    fn all_ones_six() {
        let r = spectral_identity(&block_matrix(&[6], 0), 4.0).unwrap();
        for z in accepted_z(&r) {
            assert!((z - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn blocks_of_five_and_three() {
        let r = spectral_identity(&block_matrix(&[5, 3], 0), 4.0).unwrap();
        let z = accepted_z(&r);
        for (i, v) in z.iter().enumerate() {
            let expected = if i < 5 { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-9, "z[{i}] = {v}");
        }
        if let SpectralOutcome::Accepted { eigenvalue, .. } = r.outcome {
            assert!((eigenvalue - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn small_and_twin_blocks_are_rejected() {
        let r = spectral_identity(&block_matrix(&[3], 0), 4.0).unwrap();
        assert_eq!(r.outcome, SpectralOutcome::Rejected(RejectReason::NoPrevalentIdentity));
        let r = spectral_identity(&block_matrix(&[4], 3), 4.0).unwrap();
        assert_eq!(r.outcome, SpectralOutcome::Rejected(RejectReason::NoPrevalentIdentity));
        let r = spectral_identity(&block_matrix(&[6, 6], 0), 4.0).unwrap();
        assert_eq!(r.outcome, SpectralOutcome::Rejected(RejectReason::MultipleIdentities));
    }

    #[test]
    fn two_blocks_above_threshold() {
        let mut m = DMatrix::identity(10, 10);
        for i in 0..5 {
            for j in 0..5 {
                m[(i, j)] = 1.0;
            }
        }
        for i in 5..10 {
            for j in 5..10 {
                m[(i, j)] = 0.9;
            }
            m[(i, i)] = 1.0;
        }
        // Eigenvalues 5 and 4.6; with T = 4.5 both are selected.
        let c = ConfidenceMatrix::new(QueryId(0), ServiceId::new("s"), (0..10).map(FaceId).collect(), m).unwrap();
        let r = spectral_identity(&c, 4.5).unwrap();
        assert_eq!(r.outcome, SpectralOutcome::Rejected(RejectReason::MultipleIdentities));
    }

    fn accepted(face_z: &[(u32, f64)]) -> SpectralResult {
        SpectralResult {
            query: QueryId(0),
            service: ServiceId::new("s"),
            faces: face_z.iter().map(|(f, _)| FaceId(*f)).collect(),
            outcome: SpectralOutcome::Accepted {
                eigenvalue: 10.0,
                z: face_z.iter().map(|(_, z)| *z).collect(),
            },
        }
    }

    fn services_with(zs: &[Vec<f64>]) -> BTreeMap<ServiceId, SpectralResult> {
        zs.iter()
            .enumerate()
            .map(|(s, z)| {
                let mut r = accepted(&z.iter().enumerate().map(|(i, v)| (i as u32, *v)).collect::<Vec<_>>());
                r.service = ServiceId::new(format!("s{s}"));
                (r.service.clone(), r)
            })
            .collect()
    }

    fn faces(n: u32) -> Vec<FaceId> {
        (0..n).map(FaceId).collect()
    }

    #[test]
    fn majority_vote_counts_services_above_tau() {
        // Face 0 has z = (0.9, 0.8, 0.1, 0.9, 0.05): three of five above 0.2.
        let face0 = [0.9, 0.8, 0.1, 0.9, 0.05];
        let zs: Vec<Vec<f64>> = face0
            .iter()
            .map(|&z0| {
                let mut v = vec![z0];
                v.extend(std::iter::repeat(1.0).take(5));
                v.extend(std::iter::repeat(0.0).take(2));
                v
            })
            .collect();
        let est = consolidate(QueryId(0), &faces(8), &services_with(&zs), &Thresholds::default());
        assert_eq!(est.disposition, QueryDisposition::Included);
        assert_eq!(est.labels[&FaceId(0)], Label::Positive);
        assert_eq!(est.margins[&FaceId(0)], 1);
        assert_eq!(est.labels[&FaceId(7)], Label::Negative);
        assert_eq!(est.margins[&FaceId(7)], -5);
    }

    #[test]
    fn even_split_votes_out() {
        let zs: Vec<Vec<f64>> = (0..4)
            .map(|s| {
                let mut v = vec![if s < 2 { 0.9 } else { 0.1 }];
                v.extend(std::iter::repeat(1.0).take(7));
                v
            })
            .collect();
        let est = consolidate(QueryId(0), &faces(8), &services_with(&zs), &Thresholds::default());
        assert_eq!(est.labels[&FaceId(0)], Label::Negative);
        assert_eq!(est.margins[&FaceId(0)], 0);
    }

    #[test]
    fn exclusion_rules() {
        let t = Thresholds::default();
        let zs = vec![vec![1.0; 7]; 3];
        let est = consolidate(QueryId(0), &faces(7), &services_with(&zs), &t);
        assert_eq!(est.disposition, QueryDisposition::Excluded(ExclusionReason::TooFewCrawled));
        assert_eq!(est.precondition_failed.len(), 7);
        assert!(est.labels.values().all(|l| *l == Label::Unknown));

        let mut z = vec![1.0; 4];
        z.extend(vec![0.0; 6]);
        let est = consolidate(QueryId(0), &faces(10), &services_with(&vec![z; 5]), &t);
        assert_eq!(est.disposition, QueryDisposition::Excluded(ExclusionReason::TooFewPrevalent));
        assert!(est.labels.values().all(|l| *l == Label::Unknown));
        assert!(est.precondition_failed.is_empty());

        let mut results = services_with(&vec![vec![1.0; 10]; 3]);
        results.get_mut(&ServiceId::new("s1")).unwrap().outcome =
            SpectralOutcome::Rejected(RejectReason::MultipleIdentities);
        let est = consolidate(QueryId(0), &faces(10), &results, &t);
        assert_eq!(est.disposition, QueryDisposition::Excluded(ExclusionReason::NoConsensus));
    }

    #[test]
    fn face_missing_from_one_service_fails_precondition() {
        let mut results = services_with(&vec![vec![1.0; 10]; 3]);
        let r = results.get_mut(&ServiceId::new("s2")).unwrap();
        r.faces.remove(3);
        if let SpectralOutcome::Accepted { z, .. } = &mut r.outcome {
            z.remove(3);
        }
        let est = consolidate(QueryId(0), &faces(10), &results, &Thresholds::default());
        assert_eq!(est.disposition, QueryDisposition::Included);
        assert_eq!(est.labels[&FaceId(3)], Label::Unknown);
        assert!(est.precondition_failed.contains(&FaceId(3)));
        assert_eq!(est.labels.values().filter(|l| l.is_positive()).count(), 9);
    }

    fn run_with(entries: &[(u32, u32, Label)], results: SpectralResults) -> EstimationRun {
        let mut est = LabelEstimate::default();
        for &(f, q, l) in entries {
            est.labels.insert(FaceId(f), l);
            est.face_query.insert(FaceId(f), QueryId(q));
        }
        EstimationRun { estimate: est, results }
    }

    #[test]
    fn queue_orders_type_a_then_ambiguity() {
        let t = Thresholds::default();
        // Query 0 (3 faces) and query 1 (2 faces) excluded; query 2 included.
        let mut entries = vec![
            (0, 0, Label::Unknown),
            (1, 0, Label::Unknown),
            (2, 0, Label::Unknown),
            (3, 1, Label::Unknown),
            (4, 1, Label::Unknown),
        ];
        entries.extend([(10, 2, Label::Positive), (11, 2, Label::Positive), (12, 2, Label::Negative)]);
        let mut results = SpectralResults::new();
        for s in 0..3 {
            let mut r = accepted(&[(10, 0.25 + 0.1 * s as f64), (11, 0.9), (12, 0.21)]);
            r.query = QueryId(2);
            r.service = ServiceId::new(format!("s{s}"));
            results.insert((QueryId(2), r.service.clone()), r);
        }
        let run = run_with(&entries, results);
        let q = ambiguity_rank(&run.estimate, &run.results, &t);
        let order: Vec<u32> = q.iter().map(|e| e.face_id.0).collect();
        // Face 12: median |0.21 - 0.2| = 0.01; face 10: median of 0.05, 0.15, 0.25.
        assert_eq!(order, vec![0, 1, 2, 3, 4, 12, 10, 11]);
        assert!((q[6].ambiguity.unwrap() - 0.15).abs() < 1e-12);
        assert!(q[..5].iter().all(|e| e.kind == ErrorType::A));
    }

    #[test]
    fn annotations_by_budget() {
        let t = Thresholds::default();
        let entries = [(0, 0, Label::Unknown), (1, 0, Label::Unknown), (2, 1, Label::Positive), (3, 1, Label::Negative)];
        let mut results = SpectralResults::new();
        let mut r = accepted(&[(2, 0.9), (3, 0.3)]);
        r.query = QueryId(1);
        results.insert((QueryId(1), r.service.clone()), r);
        let run = run_with(&entries, results);
        let queue = ambiguity_rank(&run.estimate, &run.results, &t);
        let y: BTreeMap<FaceId, Label> = [(0, Label::Positive), (1, Label::Negative), (2, Label::Positive), (3, Label::Positive)]
            .iter()
            .map(|&(f, l)| (FaceId(f), l))
            .collect();

        assert_eq!(apply_annotations(&run.estimate, &queue, &y, 0.0).unwrap().labels, run.estimate.labels);
        let half = apply_annotations(&run.estimate, &queue, &y, 0.5).unwrap();
        assert_eq!(half.labels[&FaceId(0)], Label::Positive);
        assert_eq!(half.labels[&FaceId(3)], Label::Negative);
        let full = apply_annotations(&run.estimate, &queue, &y, 1.0).unwrap();
        assert_eq!(full.labels, y);
        // Annotated faces leave the queue.
        assert_eq!(ambiguity_rank(&half, &run.results, &t).len(), 2);

        let mut bad = y.clone();
        bad.insert(FaceId(99), Label::Positive);
        assert!(apply_annotations(&run.estimate, &queue, &bad, 0.5).is_err());
        assert!(apply_annotations(&run.estimate, &queue, &y, 1.5).is_err());
    }

    #[test]
    fn label_dump_round_trip() {
        let mut results = services_with(&vec![vec![1.0; 10]; 3]);
        let r = results.get_mut(&ServiceId::new("s2")).unwrap();
        r.faces.remove(3);
        if let SpectralOutcome::Accepted { z, .. } = &mut r.outcome {
            z.remove(3);
        }
        let t = Thresholds::default();
        let included = consolidate(QueryId(0), &faces(10), &results, &t);
        let small = consolidate(QueryId(1), &[FaceId(20), FaceId(21)], &BTreeMap::new(), &t);
        let est = LabelEstimate::from_queries([included, small]);
        let y: BTreeMap<FaceId, Label> = [(FaceId(0), Label::Positive)].into_iter().collect();
        let rows = label_dump_rows(&est, Some(&y));
        assert_eq!(rows[3].disposition, "precondition_failed");
        assert_eq!(rows[10].disposition, "excluded_too_few_crawled");
        let (back, ann) = estimate_from_dump(&rows).unwrap();
        assert_eq!(back, est);
        assert_eq!(ann, y);
    }

    #[test]
    fn annotation_csv_round_trip() {
        let y: BTreeMap<FaceId, Label> = [(FaceId(2), Label::Unknown), (FaceId(5), Label::Positive)].into_iter().collect();
        let mut buf = Vec::new();
        write_annotations(&mut buf, &y).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "face_id,y\n2,-1\n5,1\n");
        assert_eq!(read_annotations(buf.as_slice()).unwrap(), y);
        assert!(read_annotations("face_id,y\n1,2\n".as_bytes()).is_err());
        assert!(read_annotations("face_id,y\n1,1\n1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn thresholds_validate() {
        assert!(Thresholds::default().validate().is_ok());
        let t = Thresholds { eigen: 1.0, ..Thresholds::default() };
        assert!(t.validate().is_err());
        let t = Thresholds { min_crawled: 4, ..Thresholds::default() };
        assert!(t.validate().is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn noisy_blocks() -> impl Strategy<Value = (Vec<usize>, usize, Vec<f64>, Vec<usize>)> {
            (prop::collection::vec(1usize..12, 0..4), 0usize..6).prop_flat_map(|(blocks, singles)| {
                let n: usize = blocks.iter().sum::<usize>() + singles;
                (
                    Just(blocks),
                    Just(singles),
                    prop::collection::vec(0.0f64..0.1, n * n),
                    Just(n).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle()),
                )
            })
        }

        proptest! {
            #[test]
            fn permutation_and_noiseless_block_rule((blocks, singles, _noise, perm) in noisy_blocks()) {
                let n = perm.len();
                prop_assume!(n >= 2);
                let base = block_matrix(&blocks, singles);
                let r = spectral_identity(&base, 4.0).unwrap();

                let big: Vec<usize> = blocks.iter().enumerate().filter(|(_, &b)| b > 4).map(|(k, _)| k).collect();
                if big.len() == 1 {
                    let start: usize = blocks[..big[0]].iter().sum();
                    let members: BTreeSet<usize> = (start..start + blocks[big[0]]).collect();
                    let z = accepted_z(&r);
                    let above: BTreeSet<usize> = (0..n).filter(|&i| z[i] > 0.2).collect();
                    prop_assert_eq!(above, members);
                } else {
                    prop_assert!(!r.is_accepted());
                }

                let mut pv = DMatrix::identity(n, n);
                for i in 0..n {
                    for j in 0..n {
                        pv[(i, j)] = base.values[(perm[i], perm[j])];
                    }
                }
                let permuted = ConfidenceMatrix::new(QueryId(0), ServiceId::new("s"), base.faces.clone(), pv).unwrap();
                let rp = spectral_identity(&permuted, 4.0).unwrap();
                match (&r.outcome, &rp.outcome) {
                    (SpectralOutcome::Accepted { z, .. }, SpectralOutcome::Accepted { z: zp, .. }) => {
                        for i in 0..n {
                            prop_assert!((zp[i] - z[perm[i]]).abs() < 1e-8);
                        }
                    }
                    (a, b) => prop_assert_eq!(a, b),
                }
            }

            #[test]
            fn vote_depends_only_on_indicators(
                zs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 10), 1..6),
                scale in 0.3f64..3.0,
            ) {
                let t = Thresholds::default();
                let base = consolidate(QueryId(0), &faces(10), &services_with(&zs), &t);
                // Monotone rescaling that keeps each side of tau fixed.
                let warped: Vec<Vec<f64>> = zs.iter().map(|v| v.iter().map(|&z| {
                    if z > t.z { t.z + (z - t.z) * scale + 1e-9 } else { z / (1.0 + scale) }
                }).collect()).collect();
                let other = consolidate(QueryId(0), &faces(10), &services_with(&warped), &t);
                prop_assert_eq!(&base.labels, &other.labels);
                if base.disposition == QueryDisposition::Included {
                    prop_assert!(base.labels.values().filter(|l| l.is_positive()).count() >= t.min_prevalent);
                }
            }
        }
    }
}
