use nalgebra::DMatrix;

use super::{PairKind, ScoreTable, ScoringError};
use crate::types::{FaceId, Pair, QueryId, ServiceId};

/// Normalized pairwise confidences of one query's faces under one service.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    pub query: QueryId,
    pub service: ServiceId,
    /// Row/column order.
    pub faces: Vec<FaceId>,
    pub values: DMatrix<f64>,
    /// Faces removed because some of their pairs had no score.
    pub dropped: Vec<FaceId>,
}

impl ConfidenceMatrix {
    /// Checks symmetry, the unit diagonal and the [0, 1] range.
    pub fn new(
        query: QueryId,
        service: ServiceId,
        faces: Vec<FaceId>,
        values: DMatrix<f64>,
    ) -> Result<Self, ScoringError> {
        let n = faces.len();
        if values.nrows() != n || values.ncols() != n {
            return Err(ScoringError::Validation(format!(
                "matrix is {}x{} for {n} faces",
                values.nrows(),
                values.ncols()
            )));
        }
        for i in 0..n {
            if values[(i, i)] != 1.0 {
                return Err(ScoringError::Validation(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..i {
                let v = values[(i, j)];
                if v != values[(j, i)] {
                    return Err(ScoringError::Validation(format!("entry ({i}, {j}) is not symmetric")));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(ScoringError::Validation(format!("entry ({i}, {j}) = {v} outside [0, 1]")));
                }
            }
        }
        Ok(Self {
            query,
            service,
            faces,
            values,
            dropped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

impl ScoreTable {
    /// Row for `pair` under `service`; rows are sorted so this is a binary search.
    pub fn find(&self, service: &ServiceId, pair: Pair) -> Option<&super::ScoreRow> {
        self.rows
            .binary_search_by(|r| r.service.cmp(service).then(r.pair().cmp(&pair)))
            .ok()
            .map(|i| &self.rows[i])
    }
}

/// Builds the matrix for `query` from the normalized same-query scores.
/// Faces with missing pairs are dropped, worst first, until the matrix is
/// complete; fewer than `min_faces` survivors excludes the query.
pub fn assemble_confidence_matrix(
    query: QueryId,
    service: &ServiceId,
    faces: &[FaceId],
    table: &ScoreTable,
    min_faces: usize,
) -> Result<ConfidenceMatrix, ScoringError> {
    let mut faces = faces.to_vec();
    faces.sort();
    faces.dedup();
    let n = faces.len();
    let mut values = DMatrix::<f64>::identity(n, n);
    let mut missing = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let row = table
                .find(service, Pair::new(faces[i], faces[j]))
                .filter(|r| r.kind == PairKind::SameQuery && r.query_i == query);
            match row {
                Some(r) if r.raw.is_some() => {
                    let v = r.normalized.ok_or_else(|| {
                        ScoringError::Validation(format!("scores for service {service} are not normalized"))
                    })?;
                    values[(i, j)] = v;
                    values[(j, i)] = v;
                }
                _ => {
                    missing[i][j] = true;
                    missing[j][i] = true;
                }
            }
        }
    }

    let mut keep: Vec<bool> = vec![true; n];
    let mut dropped = Vec::new();
    loop {
        let counts: Vec<usize> = (0..n)
            .map(|i| {
                if !keep[i] {
                    return 0;
                }
                (0..n).filter(|&j| keep[j] && missing[i][j]).count()
            })
            .collect();
        let worst = (0..n).filter(|&i| counts[i] > 0).max_by_key(|&i| (counts[i], i));
        let Some(worst) = worst else { break };
        keep[worst] = false;
        log::info!(
            "query {query}, service {service}: dropping face {} with {} missing scores",
            faces[worst],
            counts[worst]
        );
        dropped.push(faces[worst]);
    }

    let idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    if idx.len() < min_faces.max(2) {
        return Err(ScoringError::TooFewFaces {
            query,
            service: service.clone(),
            remaining: idx.len(),
            dropped: dropped.len(),
        });
    }
    let values = values.select_rows(&idx).select_columns(&idx);
    let mut m = ConfidenceMatrix::new(query, service.clone(), idx.iter().map(|&i| faces[i]).collect(), values)?;
    dropped.sort();
    m.dropped = dropped;
    Ok(m)
}
