use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ScoringError;
use crate::types::{FaceId, Pair, QueryId, ServiceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Ok,
    /// The service refused the pair; this is data and is cached.
    Invalid,
    /// Retries exhausted; not treated as cached.
    Failed,
}

/// One line of the score store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub service: ServiceId,
    pub q_i: QueryId,
    pub face_i: FaceId,
    pub q_j: QueryId,
    pub face_j: FaceId,
    pub raw: Option<f64>,
    pub disposition: Disposition,
}

impl StoreRecord {
    pub fn pair(&self) -> Pair {
        Pair::new(self.face_i, self.face_j)
    }
}

/// Append-only JSON-lines cache of raw scores. Later lines win.
#[derive(Debug)]
pub struct ScoreStore {
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
    entries: HashMap<(ServiceId, Pair), StoreRecord>,
}

impl ScoreStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            writer: None,
            entries: HashMap::new(),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, ScoringError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: StoreRecord = serde_json::from_str(&line).map_err(|e| {
                    ScoringError::Store(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                entries.insert((rec.service.clone(), rec.pair()), rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            writer: Some(BufWriter::new(file)),
            entries,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, service: &ServiceId, pair: Pair) -> Option<&StoreRecord> {
        self.entries.get(&(service.clone(), pair))
    }

    /// A stored answer that does not need to be requested again.
    pub fn cached(&self, service: &ServiceId, pair: Pair) -> Option<&StoreRecord> {
        self.get(service, pair)
            .filter(|r| r.disposition != Disposition::Failed)
    }

    pub fn append(&mut self, records: &[StoreRecord]) -> Result<(), ScoringError> {
        if let Some(w) = self.writer.as_mut() {
            for r in records {
                let line = serde_json::to_string(r).map_err(|e| ScoringError::Store(e.to_string()))?;
                w.write_all(line.as_bytes())?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        for r in records {
            self.entries.insert((r.service.clone(), r.pair()), r.clone());
        }
        Ok(())
    }
}
