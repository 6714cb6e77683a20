//! Pair planning, score collection, and score normalization.

mod backend;
mod collect;
mod gmm;
mod matrix;
mod plan;
mod store;

pub use backend::{Comparison, RetryPolicy, ServiceBackend, TokenBucket, TransportError};
pub use collect::{collect_scores, CollectOptions, CollectStats};
pub use gmm::{fit_bimodal_modes, normalize_scores, ModePair};
pub use matrix::{assemble_confidence_matrix, ConfidenceMatrix};
pub use plan::{build_pair_plan, PairPlan};
pub use store::{Disposition, ScoreStore, StoreRecord};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FaceId, Pair, QueryId, ServiceId};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("{0}")]
    Validation(String),
    #[error("bimodal fit is degenerate ({0}); specify the two modes manually")]
    DegenerateFit(String),
    #[error("{failed} of {total} pairs failed for service {service}, above the {ceiling} ceiling")]
    FailureCeiling {
        service: ServiceId,
        failed: usize,
        total: usize,
        ceiling: f64,
    },
    #[error("query {query} excluded for service {service}: {remaining} faces left after dropping {dropped} with missing scores")]
    TooFewFaces {
        query: QueryId,
        service: ServiceId,
        remaining: usize,
        dropped: usize,
    },
    #[error("score store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    SameQuery,
    CrossQuery,
}

/// One planned pair under one service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub service: ServiceId,
    pub face_i: FaceId,
    pub face_j: FaceId,
    pub query_i: QueryId,
    pub query_j: QueryId,
    pub kind: PairKind,
    pub raw: Option<f64>,
    pub normalized: Option<f64>,
    pub disposition: Disposition,
}

impl ScoreRow {
    pub fn pair(&self) -> Pair {
        Pair::new(self.face_i, self.face_j)
    }
}

/// Flat score records, ordered by `(service, pair)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(mut rows: Vec<ScoreRow>) -> Self {
        rows.sort_by(|a, b| a.service.cmp(&b.service).then(a.pair().cmp(&b.pair())));
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn merge(tables: impl IntoIterator<Item = ScoreTable>) -> Self {
        Self::new(tables.into_iter().flat_map(|t| t.rows).collect())
    }

    pub fn services(&self) -> Vec<ServiceId> {
        let mut s: Vec<ServiceId> = self.rows.iter().map(|r| r.service.clone()).collect();
        s.dedup();
        s
    }

    pub fn for_service<'a>(&'a self, service: &'a ServiceId) -> impl Iterator<Item = &'a ScoreRow> + 'a {
        self.rows.iter().filter(move |r| &r.service == service)
    }

    pub fn raw_scores(&self, service: &ServiceId) -> Vec<f64> {
        self.for_service(service).filter_map(|r| r.raw).collect()
    }

    /// Fits impostor/genuine modes per service on all of its raw scores.
    /// Services listed in `fixed` keep the given modes instead.
    pub fn fit_modes(
        &self,
        fixed: &BTreeMap<ServiceId, ModePair>,
    ) -> Result<BTreeMap<ServiceId, ModePair>, ScoringError> {
        let mut modes = BTreeMap::new();
        for s in self.services() {
            let m = match fixed.get(&s) {
                Some(m) => *m,
                None => fit_bimodal_modes(&self.raw_scores(&s)).map_err(|e| match e {
                    ScoringError::DegenerateFit(m) => ScoringError::DegenerateFit(format!("service {s}: {m}")),
                    other => other,
                })?,
            };
            modes.insert(s, m);
        }
        Ok(modes)
    }

    /// Fills `normalized` for every scored row of the services in `modes`.
    pub fn normalize(&mut self, modes: &BTreeMap<ServiceId, ModePair>) {
        for row in &mut self.rows {
            if let (Some(raw), Some(m)) = (row.raw, modes.get(&row.service)) {
                row.normalized = Some(m.normalize(raw));
            }
        }
    }
}
