//! Genuine/impostor score sets, FMR/FNMR curves, equal error rates and the
//! comparisons built on them.

mod analysis;
mod wilson;

pub use analysis::{
    agreement_rate, confusion_matrix, disaggregate_bias, evaluate_service, majority_vote_ablation,
    service_composition_sweep, AblationRow, BiasRow, BiasTable, CompositionRow, ConfusionMatrix3,
    ServiceEvaluation, COMPOSITION_FMRS,
};
pub use wilson::{normal_quantile, wilson_interval, z_for_confidence, DEFAULT_CONFIDENCE};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{PairKind, ScoreRow, ScoreTable};
use crate::types::{FaceId, FaceRecord, Label, ServiceId};

/// Lower end of the log10-FMR range compared by [`curve_discrepancy`].
pub const LOG_FMR_MIN: f64 = -4.0;
const DISCREPANCY_GRID: usize = 401;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("{0}")]
    Validation(String),
    #[error("no curve for service {service}: {genuine} genuine and {impostor} impostor scores")]
    EmptySet {
        service: ServiceId,
        genuine: usize,
        impostor: usize,
    },
}

/// Genuine and impostor raw scores under one labelling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSets {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSets {
    pub fn is_usable(&self) -> bool {
        !self.genuine.is_empty() && !self.impostor.is_empty()
    }
}

/// Score sets under the annotated (`G`, `I`) and estimated labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSets {
    pub annotated: ScoreSets,
    pub estimated: ScoreSets,
}

/// Genuine pairs: same query, both faces labelled positive. Impostor pairs:
/// different queries of the same demographic, both faces positive.
pub fn score_sets<'a>(
    rows: impl IntoIterator<Item = &'a ScoreRow>,
    labels: &BTreeMap<FaceId, Label>,
    faces: &BTreeMap<FaceId, FaceRecord>,
) -> ScoreSets {
    let positive = |f: &FaceId| labels.get(f).is_some_and(|l| l.is_positive());
    let mut sets = ScoreSets::default();
    for row in rows {
        let Some(raw) = row.raw else { continue };
        if !positive(&row.face_i) || !positive(&row.face_j) {
            continue;
        }
        match row.kind {
            PairKind::SameQuery if row.query_i == row.query_j => sets.genuine.push(raw),
            PairKind::CrossQuery if row.query_i != row.query_j => {
                let same_group = match (faces.get(&row.face_i), faces.get(&row.face_j)) {
                    (Some(a), Some(b)) => a.demographic == b.demographic,
                    _ => false,
                };
                if same_group {
                    sets.impostor.push(raw);
                }
            }
            _ => {}
        }
    }
    sets
}

/// Builds `G`, `I` from annotated labels and their estimated counterparts
/// for one service.
pub fn build_eval_sets(
    table: &ScoreTable,
    service: &ServiceId,
    annotated: &BTreeMap<FaceId, Label>,
    estimated: &BTreeMap<FaceId, Label>,
    faces: &BTreeMap<FaceId, FaceRecord>,
) -> Result<EvalSets, EvaluationError> {
    let sets = EvalSets {
        annotated: score_sets(table.for_service(service), annotated, faces),
        estimated: score_sets(table.for_service(service), estimated, faces),
    };
    for s in [&sets.annotated, &sets.estimated] {
        if !s.is_usable() {
            return Err(EvaluationError::EmptySet {
                service: service.clone(),
                genuine: s.genuine.len(),
                impostor: s.impostor.len(),
            });
        }
    }
    Ok(sets)
}

/// Annotated labels restricted to faces the estimation did not exclude.
pub fn achievable_labels(
    annotated: &BTreeMap<FaceId, Label>,
    estimated: &BTreeMap<FaceId, Label>,
) -> BTreeMap<FaceId, Label> {
    annotated
        .iter()
        .map(|(&f, &y)| {
            let keep = estimated.get(&f).is_some_and(|l| *l != Label::Unknown);
            (f, if keep { y } else { Label::Unknown })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub fmr_lo: f64,
    pub fmr_hi: f64,
    pub fnmr_lo: f64,
    pub fnmr_hi: f64,
}

/// FMR and FNMR at every distinct score, bracketed by `-inf` and `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

/// A score matches at threshold `t` iff it is `>= t`.
pub fn fmr_fnmr_curve(sets: &ScoreSets, confidence: f64) -> Result<EvalCurve, EvaluationError> {
    if !sets.is_usable() {
        return Err(EvaluationError::Validation(format!(
            "curve needs genuine and impostor scores, got {} and {}",
            sets.genuine.len(),
            sets.impostor.len()
        )));
    }
    if sets.genuine.iter().chain(&sets.impostor).any(|x| !x.is_finite()) {
        return Err(EvaluationError::Validation("non-finite score".into()));
    }
    let z = z_for_confidence(confidence)?;
    let mut g = sets.genuine.clone();
    let mut imp = sets.impostor.clone();
    g.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (ng, ni) = (g.len() as f64, imp.len() as f64);
    let point = |t: f64| {
        let false_match = (imp.len() - imp.partition_point(|&x| x < t)) as f64;
        let false_non_match = g.partition_point(|&x| x < t) as f64;
        let (fmr_lo, fmr_hi) = wilson::wilson_with_z(false_match, ni, z);
        let (fnmr_lo, fnmr_hi) = wilson::wilson_with_z(false_non_match, ng, z);
        CurvePoint {
            threshold: t,
            fmr: false_match / ni,
            fnmr: false_non_match / ng,
            fmr_lo,
            fmr_hi,
            fnmr_lo,
            fnmr_hi,
        }
    };
    let points = std::iter::once(f64::NEG_INFINITY)
        .chain(thresholds)
        .chain(std::iter::once(f64::INFINITY))
        .map(point)
        .collect();
    Ok(EvalCurve {
        points,
        n_genuine: g.len(),
        n_impostor: imp.len(),
    })
}

/// The rate where FMR and FNMR cross, interpolated linearly between the two
/// thresholds that bracket the sign change.
pub fn equal_error_rate(curve: &EvalCurve) -> f64 {
    let p = &curve.points;
    for k in 0..p.len() {
        let d0 = p[k].fmr - p[k].fnmr;
        if d0 == 0.0 {
            return p[k].fmr;
        }
        if let Some(next) = p.get(k + 1) {
            let d1 = next.fmr - next.fnmr;
            if d0 > 0.0 && d1 < 0.0 {
                let s = d0 / (d0 - d1);
                return p[k].fmr + (next.fmr - p[k].fmr) * s;
            }
        }
    }
    // Unreachable for curves built by `fmr_fnmr_curve`, whose ends are (1, 0) and (0, 1).
    0.5
}

/// Wilson bounds on an EER, taking the smaller of the two pair counts as
/// the number of trials.
pub fn eer_bounds(curve: &EvalCurve, eer: f64, confidence: f64) -> Result<(f64, f64), EvaluationError> {
    let n = curve.n_genuine.min(curve.n_impostor) as f64;
    let z = z_for_confidence(confidence)?;
    Ok(wilson::wilson_with_z(eer * n, n, z))
}

/// FNMR at a target FMR along the piecewise-linear ROC. Where several
/// thresholds share the target FMR the smallest FNMR is returned.
pub fn fnmr_at_fmr(curve: &EvalCurve, target: f64) -> f64 {
    let p = &curve.points;
    // FMR is non-increasing along the curve.
    let first_at_or_below = p.partition_point(|q| q.fmr > target);
    if first_at_or_below == p.len() {
        return p.last().map_or(1.0, |q| q.fnmr);
    }
    let q = &p[first_at_or_below];
    if q.fmr == target || first_at_or_below == 0 {
        return q.fnmr;
    }
    let prev = &p[first_at_or_below - 1];
    let s = (prev.fmr - target) / (prev.fmr - q.fmr);
    prev.fnmr + (q.fnmr - prev.fnmr) * s
}

/// Area between two FNMR-vs-log10(FMR) curves over `[LOG_FMR_MIN, 0]`,
/// trapezoidal on a uniform grid.
pub fn curve_discrepancy(a: &EvalCurve, b: &EvalCurve) -> f64 {
    let step = -LOG_FMR_MIN / (DISCREPANCY_GRID - 1) as f64;
    let diffs: Vec<f64> = (0..DISCREPANCY_GRID)
        .map(|k| {
            let fmr = 10f64.powf(LOG_FMR_MIN + step * k as f64);
            (fnmr_at_fmr(a, fmr) - fnmr_at_fmr(b, fmr)).abs()
        })
        .collect();
    diffs.windows(2).map(|w| (w[0] + w[1]) / 2.0 * step).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Annotated,
    Estimated,
    Achievable,
    True,
}

/// One line of the curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub which: CurveKind,
    pub service: ServiceId,
    pub group: String,
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
    pub fmr_lo: f64,
    pub fmr_hi: f64,
    pub fnmr_lo: f64,
    pub fnmr_hi: f64,
}

pub fn curve_rows(which: CurveKind, service: &ServiceId, group: &str, curve: &EvalCurve) -> Vec<CurveRow> {
    curve
        .points
        .iter()
        .map(|p| CurveRow {
            which,
            service: service.clone(),
            group: group.to_owned(),
            threshold: p.threshold,
            fmr: p.fmr,
            fnmr: p.fnmr,
            fmr_lo: p.fmr_lo,
            fmr_hi: p.fmr_hi,
            fnmr_lo: p.fnmr_lo,
            fnmr_hi: p.fnmr_hi,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Disposition;
    use crate::types::{DemographicKey, ImageId, QueryId};

    fn sets(g: &[f64], i: &[f64]) -> ScoreSets {
        ScoreSets {
            genuine: g.to_vec(),
            impostor: i.to_vec(),
        }
    }

    fn at(curve: &EvalCurve, t: f64) -> (f64, f64) {
        let p = curve.points.iter().find(|p| p.threshold == t).unwrap();
        (p.fmr, p.fnmr)
    }

    #[test]
    fn counting_example() {
        let c = fmr_fnmr_curve(&sets(&[0.9, 0.8], &[0.1, 0.95]), 0.95).unwrap();
        // t = 0.5 falls between 0.1 and 0.8; the next threshold up is 0.8.
        assert_eq!(at(&c, 0.8), (0.5, 0.0));
        assert_eq!(at(&c, f64::NEG_INFINITY), (1.0, 0.0));
        assert_eq!(at(&c, f64::INFINITY), (0.0, 1.0));
    }

    #[test]
    fn eer_examples() {
        let c = fmr_fnmr_curve(&sets(&[0.6, 0.7, 0.8, 0.9], &[0.1, 0.2, 0.65, 0.75]), 0.95).unwrap();
        assert!((equal_error_rate(&c) - 0.25).abs() < 1e-12);
        let c = fmr_fnmr_curve(&sets(&[0.7, 0.8], &[0.1, 0.2]), 0.95).unwrap();
        assert_eq!(equal_error_rate(&c), 0.0);
        let same = [0.1, 0.4, 0.5, 0.9, 0.3];
        let c = fmr_fnmr_curve(&sets(&same, &same), 0.95).unwrap();
        assert!((equal_error_rate(&c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(fmr_fnmr_curve(&sets(&[], &[0.1]), 0.95).is_err());
    }

    #[test]
    fn fnmr_interpolation() {
        let c = fmr_fnmr_curve(&sets(&[0.6, 0.7, 0.8, 0.9], &[0.1, 0.2, 0.65, 0.75]), 0.95).unwrap();
        // Points (fmr, fnmr): (1,0) (1,0) (.75,0) (.5,0) (.5,.25) (.25,.25) (.25,.5) (0,.5) (0,.75) (0,1)
        assert_eq!(fnmr_at_fmr(&c, 0.5), 0.0);
        assert_eq!(fnmr_at_fmr(&c, 0.25), 0.25);
        assert!((fnmr_at_fmr(&c, 0.375) - 0.25).abs() < 1e-12);
        assert_eq!(fnmr_at_fmr(&c, 0.125), 0.5);
        assert_eq!(fnmr_at_fmr(&c, 0.0), 0.5);
        assert_eq!(curve_discrepancy(&c, &c), 0.0);
    }

    #[test]
    fn discrepancy_of_constant_offset() {
        // Curves whose FNMR differ by a constant over the whole FMR range.
        let a = EvalCurve {
            points: vec![point(1.0, 0.0), point(0.0, 0.0)],
            n_genuine: 1,
            n_impostor: 1,
        };
        let b = EvalCurve {
            points: vec![point(1.0, 0.1), point(0.0, 0.1)],
            n_genuine: 1,
            n_impostor: 1,
        };
        assert!((curve_discrepancy(&a, &b) - 0.4).abs() < 1e-9);
    }

    fn point(fmr: f64, fnmr: f64) -> CurvePoint {
        CurvePoint {
            threshold: 0.0,
            fmr,
            fnmr,
            fmr_lo: 0.0,
            fmr_hi: 1.0,
            fnmr_lo: 0.0,
            fnmr_hi: 1.0,
        }
    }

    fn face(id: u32, q: u32, group: &str) -> (FaceId, FaceRecord) {
        (
            FaceId(id),
            FaceRecord {
                face_id: FaceId(id),
                image_id: ImageId(id),
                query_id: QueryId(q),
                demographic: DemographicKey::new("female", group, ""),
            },
        )
    }

    fn row(a: u32, qa: u32, b: u32, qb: u32, raw: f64) -> ScoreRow {
        ScoreRow {
            service: ServiceId::new("s"),
            face_i: FaceId(a),
            face_j: FaceId(b),
            query_i: QueryId(qa),
            query_j: QueryId(qb),
            kind: if qa == qb { PairKind::SameQuery } else { PairKind::CrossQuery },
            raw: Some(raw),
            normalized: None,
            disposition: Disposition::Ok,
        }
    }

    #[test]
    fn set_predicates() {
        let faces: BTreeMap<_, _> = [face(0, 0, "asian"), face(1, 0, "asian"), face(2, 1, "asian"), face(3, 2, "black")]
            .into_iter()
            .collect();
        let mut labels: BTreeMap<FaceId, Label> = (0..4).map(|i| (FaceId(i), Label::Positive)).collect();
        let rows = vec![row(0, 0, 1, 0, 0.93), row(0, 0, 2, 1, 0.2), row(1, 0, 3, 2, 0.3)];
        let s = score_sets(&rows, &labels, &faces);
        assert_eq!(s.genuine, vec![0.93]);
        assert_eq!(s.impostor, vec![0.2]);

        labels.insert(FaceId(2), Label::Negative);
        let s = score_sets(&rows, &labels, &faces);
        assert!(s.impostor.is_empty());
    }

    #[test]
    fn achievable_masks_excluded() {
        let y: BTreeMap<_, _> = [(FaceId(0), Label::Positive), (FaceId(1), Label::Negative)].into_iter().collect();
        let est: BTreeMap<_, _> = [(FaceId(0), Label::Unknown), (FaceId(1), Label::Positive)].into_iter().collect();
        let a = achievable_labels(&y, &est);
        assert_eq!(a[&FaceId(0)], Label::Unknown);
        assert_eq!(a[&FaceId(1)], Label::Negative);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn brute(sets: &ScoreSets, t: f64) -> (f64, f64) {
            let fm = sets.impostor.iter().filter(|&&x| x >= t).count() as f64 / sets.impostor.len() as f64;
            let fnm = sets.genuine.iter().filter(|&&x| x < t).count() as f64 / sets.genuine.len() as f64;
            (fm, fnm)
        }

        fn score_sets_strategy() -> impl Strategy<Value = ScoreSets> {
            (
                prop::collection::vec((0u32..200).prop_map(|x| x as f64 / 200.0), 1..120),
                prop::collection::vec((0u32..200).prop_map(|x| x as f64 / 200.0), 1..120),
            )
                .prop_map(|(g, i)| ScoreSets { genuine: g, impostor: i })
        }

        proptest! {
            #[test]
            fn curve_matches_brute_force(s in score_sets_strategy()) {
                let c = fmr_fnmr_curve(&s, 0.95).unwrap();
                for w in c.points.windows(2) {
                    prop_assert!(w[1].fmr <= w[0].fmr && w[1].fnmr >= w[0].fnmr);
                }
                for p in &c.points {
                    prop_assert_eq!((p.fmr, p.fnmr), brute(&s, p.threshold));
                    prop_assert!(p.fmr_lo <= p.fmr && p.fmr <= p.fmr_hi);
                }
            }

            #[test]
            fn eer_invariant_under_monotone_transform(s in score_sets_strategy()) {
                let c = fmr_fnmr_curve(&s, 0.95).unwrap();
                let f = |x: &f64| (3.0 * x).exp() - 7.0;
                let t = ScoreSets {
                    genuine: s.genuine.iter().map(f).collect(),
                    impostor: s.impostor.iter().map(f).collect(),
                };
                let ct = fmr_fnmr_curve(&t, 0.95).unwrap();
                prop_assert!((equal_error_rate(&c) - equal_error_rate(&ct)).abs() < 1e-12);
            }

            #[test]
            fn eer_is_between_rates_at_crossing(s in score_sets_strategy()) {
                let c = fmr_fnmr_curve(&s, 0.95).unwrap();
                let e = equal_error_rate(&c);
                prop_assert!((0.0..=1.0).contains(&e));
                // Some threshold has both rates on either side of the EER.
                let ok = c.points.windows(2).any(|w| {
                    let lo = w[0].fnmr.min(w[1].fmr) - 1e-12;
                    let hi = w[0].fmr.max(w[1].fnmr) + 1e-12;
                    lo <= e && e <= hi
                });
                prop_assert!(ok);
            }
        }
    }
}
