use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ScoringError;
use crate::types::{DemographicKey, FaceId, FaceRecord, Pair, QueryId};

/// Candidate cross pairs are enumerated up to this count; larger strata are
/// sampled by rejection.
const ENUMERATION_LIMIT: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPlan {
    pub same_query: Vec<Pair>,
    pub cross_query: Vec<Pair>,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PairPlan {
    pub fn len(&self) -> usize {
        self.same_query.len() + self.cross_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All same-query pairs, plus as many cross-query pairs per demographic
/// stratum as that stratum has same-query pairs, drawn uniformly without
/// replacement.
pub fn build_pair_plan(faces: &[FaceRecord], seed: u64) -> Result<PairPlan, ScoringError> {
    let mut by_query: BTreeMap<QueryId, (DemographicKey, Vec<FaceId>)> = BTreeMap::new();
    let mut seen = HashSet::new();
    for f in faces {
        if !seen.insert(f.face_id) {
            return Err(ScoringError::Validation(format!("face {} listed twice", f.face_id)));
        }
        let entry = by_query
            .entry(f.query_id)
            .or_insert_with(|| (f.demographic.clone(), Vec::new()));
        if entry.0 != f.demographic {
            return Err(ScoringError::Validation(format!(
                "query {} mixes demographics {} and {}",
                f.query_id, entry.0, f.demographic
            )));
        }
        entry.1.push(f.face_id);
    }

    let mut same_query = Vec::new();
    let mut strata: BTreeMap<DemographicKey, Vec<(QueryId, Vec<FaceId>)>> = BTreeMap::new();
    for (q, (demo, mut ids)) in by_query {
        ids.sort();
        for (k, &a) in ids.iter().enumerate() {
            for &b in &ids[k + 1..] {
                same_query.push(Pair::new(a, b));
            }
        }
        strata.entry(demo).or_default().push((q, ids));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cross_query = Vec::new();
    let mut warnings = Vec::new();
    for (demo, queries) in &strata {
        let same: u64 = queries.iter().map(|(_, ids)| choose2(ids.len() as u64)).sum();
        if queries.len() < 2 {
            let msg = format!("stratum {demo} has {} query; no cross-query pairs", queries.len());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let members: Vec<(usize, FaceId)> = queries
            .iter()
            .enumerate()
            .flat_map(|(qi, (_, ids))| ids.iter().map(move |&f| (qi, f)))
            .collect();
        let candidates = choose2(members.len() as u64) - same;
        let k = same.min(candidates);
        if k < same {
            let msg = format!("stratum {demo}: only {candidates} cross-query pairs available for {same} same-query pairs");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        cross_query.extend(sample_cross_pairs(&members, candidates, k as usize, &mut rng));
    }
    same_query.sort();
    cross_query.sort();
    Ok(PairPlan {
        same_query,
        cross_query,
        seed,
        warnings,
    })
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

fn sample_cross_pairs(
    members: &[(usize, FaceId)],
    candidates: u64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Pair> {
    if candidates <= ENUMERATION_LIMIT {
        let mut all = Vec::with_capacity(candidates as usize);
        for (a, &(qa, fa)) in members.iter().enumerate() {
            for &(qb, fb) in &members[a + 1..] {
                if qa != qb {
                    all.push(Pair::new(fa, fb));
                }
            }
        }
        return index::sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect();
    }
    let mut chosen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let a = rng.random_range(0..members.len());
        let b = rng.random_range(0..members.len());
        if members[a].0 == members[b].0 {
            continue;
        }
        let p = Pair::new(members[a].1, members[b].1);
        if chosen.insert(p) {
            out.push(p);
        }
    }
    out
}
