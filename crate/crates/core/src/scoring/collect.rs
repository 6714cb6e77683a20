use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::backend::{Comparison, RetryPolicy, ServiceBackend, TokenBucket};
use super::store::{Disposition, ScoreStore, StoreRecord};
use super::{PairKind, PairPlan, ScoreRow, ScoreTable, ScoringError};
use crate::types::{FaceId, FaceRecord, Pair};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectOptions {
    pub retry: RetryPolicy,
    /// Concurrent backend calls for this service.
    pub parallelism: usize,
    /// Abort when more than this fraction of planned pairs fail.
    pub max_failure_rate: f64,
    /// Requests per second; `None` is unlimited.
    pub rate_limit: Option<f64>,
    pub burst: u32,
}

impl Default for CollectOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            parallelism: 4,
            max_failure_rate: 0.05,
            rate_limit: None,
            burst: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectStats {
    pub planned: usize,
    pub cache_hits: usize,
    pub backend_calls: usize,
    pub retries: usize,
    pub failed: usize,
    pub invalid: usize,
}

/// Scores every planned pair with `backend`, reusing answers already in
/// `store` and appending new ones in canonical pair order.
pub fn collect_scores(
    plan: &PairPlan,
    faces: &BTreeMap<FaceId, FaceRecord>,
    backend: &dyn ServiceBackend,
    store: &mut ScoreStore,
    opts: &CollectOptions,
) -> Result<(ScoreTable, CollectStats), ScoringError> {
    let service = backend.id().clone();
    let (lo, hi) = backend.native_range();
    let mut planned: Vec<(Pair, PairKind)> = plan
        .same_query
        .iter()
        .map(|&p| (p, PairKind::SameQuery))
        .chain(plan.cross_query.iter().map(|&p| (p, PairKind::CrossQuery)))
        .collect();
    planned.sort();
    for (p, _) in &planned {
        for f in [p.first(), p.second()] {
            if !faces.contains_key(&f) {
                return Err(ScoringError::Validation(format!("planned face {f} has no record")));
            }
        }
    }

    let todo: Vec<Pair> = planned
        .iter()
        .map(|(p, _)| *p)
        .filter(|p| store.cached(&service, *p).is_none())
        .collect();
    let mut stats = CollectStats {
        planned: planned.len(),
        cache_hits: planned.len() - todo.len(),
        ..CollectStats::default()
    };

    let bucket = opts
        .rate_limit
        .map(|rate| TokenBucket::new(rate, opts.burst));
    let calls = AtomicUsize::new(0);
    let retries = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<(Option<f64>, Disposition)>>> =
        todo.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        let workers = opts.parallelism.max(1).min(todo.len().max(1));
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= todo.len() {
                    break;
                }
                let (a, b) = (&faces[&todo[i].first()], &faces[&todo[i].second()]);
                let mut attempt = 0;
                let outcome = loop {
                    if let Some(bucket) = &bucket {
                        bucket.acquire();
                    }
                    calls.fetch_add(1, Ordering::Relaxed);
                    match backend.compare(a, b) {
                        Ok(Comparison::Score(raw)) if raw >= lo && raw <= hi => {
                            break (Some(raw), Disposition::Ok)
                        }
                        Ok(Comparison::Score(raw)) => {
                            log::warn!(
                                "{service}: score {raw} for {} outside native range [{lo}, {hi}]",
                                todo[i].first()
                            );
                            break (None, Disposition::Failed);
                        }
                        Ok(Comparison::Invalid) => break (None, Disposition::Invalid),
                        Err(e) if attempt < opts.retry.max_retries => {
                            log::debug!("{service}: retry {} after {e}", attempt + 1);
                            retries.fetch_add(1, Ordering::Relaxed);
                            std::thread::sleep(opts.retry.delay(attempt));
                            attempt += 1;
                        }
                        Err(e) => {
                            log::warn!("{service}: giving up on pair after {e}");
                            break (None, Disposition::Failed);
                        }
                    }
                };
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let fresh: Vec<StoreRecord> = todo
        .iter()
        .zip(slots)
        .map(|(p, slot)| {
            let (raw, disposition) = slot.into_inner().unwrap().expect("every pair is attempted");
            StoreRecord {
                service: service.clone(),
                q_i: faces[&p.first()].query_id,
                face_i: p.first(),
                q_j: faces[&p.second()].query_id,
                face_j: p.second(),
                raw,
                disposition,
            }
        })
        .collect();
    store.append(&fresh)?;
    stats.backend_calls = calls.into_inner();
    stats.retries = retries.into_inner();
    if stats.retries > 0 {
        log::info!("{service}: {} retries over {} calls", stats.retries, stats.backend_calls);
    }

    let mut rows = Vec::with_capacity(planned.len());
    for (p, kind) in planned {
        let rec = store.get(&service, p).expect("stored above or cached");
        match rec.disposition {
            Disposition::Failed => stats.failed += 1,
            Disposition::Invalid => stats.invalid += 1,
            Disposition::Ok => {}
        }
        rows.push(ScoreRow {
            service: service.clone(),
            face_i: p.first(),
            face_j: p.second(),
            query_i: faces[&p.first()].query_id,
            query_j: faces[&p.second()].query_id,
            kind,
            raw: rec.raw,
            normalized: None,
            disposition: rec.disposition,
        });
    }

    if stats.planned > 0 && stats.failed as f64 / stats.planned as f64 > opts.max_failure_rate {
        return Err(ScoringError::FailureCeiling {
            service,
            failed: stats.failed,
            total: stats.planned,
            ceiling: opts.max_failure_rate,
        });
    }
    Ok((ScoreTable::new(rows), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{build_pair_plan, TransportError};
    use crate::types::{DemographicKey, ImageId, QueryId, ServiceId};
    use std::collections::HashMap;

    struct Flaky {
        id: ServiceId,
        /// Pairs (by first face) that fail this many times before succeeding.
        faults: HashMap<FaceId, usize>,
        seen: Mutex<HashMap<Pair, usize>>,
        calls: AtomicUsize,
    }

    impl Flaky {
        fn new(faults: HashMap<FaceId, usize>) -> Self {
            Self {
                id: ServiceId::new("flaky"),
                faults,
                seen: Mutex::new(HashMap::new()),
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl ServiceBackend for Flaky {
        fn id(&self) -> &ServiceId {
            &self.id
        }

        fn native_range(&self) -> (f64, f64) {
            (0.0, 1.0)
        }

        fn compare(&self, a: &FaceRecord, b: &FaceRecord) -> Result<Comparison, TransportError> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let p = Pair::new(a.face_id, b.face_id);
            let mut seen = self.seen.lock().unwrap();
            let n = seen.entry(p).or_insert(0);
            *n += 1;
            let budget = self.faults.get(&p.first()).copied().unwrap_or(0);
            if *n <= budget {
                return Err(TransportError::new("503"));
            }
            let same = a.query_id == b.query_id;
            Ok(Comparison::Score(if same { 0.9 } else { 0.1 }))
        }
    }

    fn world(n_queries: u32, per_query: u32) -> BTreeMap<FaceId, FaceRecord> {
        let mut out = BTreeMap::new();
        for q in 0..n_queries {
            for k in 0..per_query {
                let id = q * per_query + k;
                out.insert(
                    FaceId(id),
                    FaceRecord {
                        face_id: FaceId(id),
                        image_id: ImageId(id),
                        query_id: QueryId(q),
                        demographic: DemographicKey::new("male", "europe", ""),
                    },
                );
            }
        }
        out
    }

    fn opts() -> CollectOptions {
        CollectOptions {
            retry: RetryPolicy::no_delay(3),
            parallelism: 4,
            ..CollectOptions::default()
        }
    }

    #[test]
    fn empty_plan_gives_empty_table() {
        let faces = world(0, 0);
        let plan = build_pair_plan(&[], 0).unwrap();
        let backend = Flaky::new(HashMap::new());
        let (table, stats) =
            collect_scores(&plan, &faces, &backend, &mut ScoreStore::in_memory(), &opts()).unwrap();
        assert!(table.is_empty());
        assert_eq!(stats.backend_calls, 0);
    }

    #[test]
    fn transient_faults_are_retried_and_cache_is_reused() {
        // Two queries of ten faces: 90 same + 90 cross = 180 pairs.
        let faces = world(2, 10);
        let recs: Vec<FaceRecord> = faces.values().cloned().collect();
        let plan = build_pair_plan(&recs, 11).unwrap();
        assert_eq!(plan.len(), 180);
        // Fault exactly three distinct pairs once each.
        let targets: Vec<Pair> = vec![plan.same_query[0], plan.same_query[20], plan.cross_query[5]];
        let backend = FaultOnce::new(targets);
        let mut store = ScoreStore::in_memory();
        let (table, stats) = collect_scores(&plan, &faces, &backend, &mut store, &opts()).unwrap();
        assert_eq!(table.len(), 180);
        assert!(table.rows.iter().all(|r| r.disposition == Disposition::Ok));
        assert_eq!(stats.retries, 3);
        assert_eq!(stats.backend_calls, 183);

        let (again, stats) = collect_scores(&plan, &faces, &backend, &mut store, &opts()).unwrap();
        assert_eq!(stats.backend_calls, 0);
        assert_eq!(stats.cache_hits, 180);
        assert_eq!(again, table);
    }

    struct FaultOnce {
        inner: Flaky,
        targets: Vec<Pair>,
    }

    impl FaultOnce {
        fn new(targets: Vec<Pair>) -> Self {
            Self {
                inner: Flaky::new(HashMap::new()),
                targets,
            }
        }
    }

    impl ServiceBackend for FaultOnce {
        fn id(&self) -> &ServiceId {
            self.inner.id()
        }

        fn native_range(&self) -> (f64, f64) {
            (0.0, 1.0)
        }

        fn compare(&self, a: &FaceRecord, b: &FaceRecord) -> Result<Comparison, TransportError> {
            let p = Pair::new(a.face_id, b.face_id);
            let mut seen = self.inner.seen.lock().unwrap();
            let n = seen.entry(p).or_insert(0);
            *n += 1;
            if *n == 1 && self.targets.contains(&p) {
                return Err(TransportError::new("reset"));
            }
            Ok(Comparison::Score(0.5))
        }
    }

    #[test]
    fn exhausted_retries_mark_failed_and_ceiling_aborts() {
        let faces = world(1, 5);
        let recs: Vec<FaceRecord> = faces.values().cloned().collect();
        let plan = build_pair_plan(&recs, 0).unwrap();
        let backend = Flaky::new(HashMap::from([(FaceId(0), 100)]));
        let mut lenient = opts();
        lenient.max_failure_rate = 1.0;
        let mut store = ScoreStore::in_memory();
        let (table, stats) = collect_scores(&plan, &faces, &backend, &mut store, &lenient).unwrap();
        assert_eq!(stats.failed, 4);
        assert_eq!(table.rows.iter().filter(|r| r.raw.is_none()).count(), 4);
        // Failed pairs are retried on the next run.
        let before = backend.calls.load(Ordering::Relaxed);
        collect_scores(&plan, &faces, &backend, &mut store, &lenient).unwrap();
        assert_eq!(backend.calls.load(Ordering::Relaxed) - before, 4 * 4);

        let err = collect_scores(&plan, &faces, &backend, &mut ScoreStore::in_memory(), &opts());
        assert!(matches!(err, Err(ScoringError::FailureCeiling { failed: 4, total: 10, .. })));
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let faces = world(4, 6);
        let recs: Vec<FaceRecord> = faces.values().cloned().collect();
        let plan = build_pair_plan(&recs, 5).unwrap();
        let run = |workers: usize| {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.jsonl");
            let mut store = ScoreStore::open(&path).unwrap();
            let mut o = opts();
            o.parallelism = workers;
            let backend = Flaky::new(HashMap::new());
            collect_scores(&plan, &faces, &backend, &mut store, &o).unwrap();
            drop(store);
            std::fs::read(&path).unwrap()
        };
        assert_eq!(run(1), run(8));
    }
}
