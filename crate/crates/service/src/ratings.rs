//! Append-only rating log with an in-memory index.
//!
//! Every rating is appended as one JSON line. On open the log is replayed;
//! a later line for the same (user, outfit) replaces the earlier one.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use outfit_core::analysis::RatingRecord;

#[derive(Debug, thiserror::Error)]
pub enum RatingLogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} line {line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Default)]
pub struct RatingStore {
    path: Option<PathBuf>,
    records: Vec<RatingRecord>,
    index: HashMap<(String, String), usize>,
}

/// Outcome of storing one rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recorded {
    pub observations: usize,
    pub overwritten: bool,
}

impl RatingStore {
    /// A store that keeps ratings in memory only.
    pub fn in_memory() -> Self {
        RatingStore::default()
    }

    /// Opens (or creates) a log file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, RatingLogError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| RatingLogError::Io { path: path.clone(), source };
        let mut store = RatingStore {
            path: Some(path.clone()),
            ..RatingStore::default()
        };
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: RatingRecord = serde_json::from_str(&line).map_err(|e| RatingLogError::Malformed {
                    path: path.clone(),
                    line: n + 1,
                    message: e.to_string(),
                })?;
                store.apply(record);
            }
        }
        Ok(store)
    }

    fn apply(&mut self, record: RatingRecord) -> bool {
        let key = (record.user.clone(), record.outfit.clone());
        match self.index.get(&key) {
            Some(&i) => {
                self.records[i] = record;
                true
            }
            None => {
                self.index.insert(key, self.records.len());
                self.records.push(record);
                false
            }
        }
    }

    /// Writes the record to the log, then updates the index.
    pub fn record(&mut self, record: RatingRecord) -> Result<Recorded, RatingLogError> {
        if let Some(path) = &self.path {
            let io = |source| RatingLogError::Io { path: path.clone(), source };
            let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
            let line = serde_json::to_string(&record).expect("ratings serialise");
            writeln!(file, "{line}").map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        let overwritten = self.apply(record);
        Ok(Recorded {
            observations: self.records.len(),
            overwritten,
        })
    }

    pub fn records(&self) -> &[RatingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_rated(&self, user: &str, outfit: &str) -> bool {
        self.index.contains_key(&(user.to_string(), outfit.to_string()))
    }
}
