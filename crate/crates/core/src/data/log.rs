use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

/// How to split a line into user, item and timestamp columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineFormat {
    /// Column separator. `"ws"` splits on any run of whitespace.
    pub delimiter: String,
    pub user_column: usize,
    pub item_column: usize,
    pub timestamp_column: usize,
    pub has_header: bool,
}

impl Default for LineFormat {
    fn default() -> Self {
        Self {
            delimiter: "\t".to_string(),
            user_column: 0,
            item_column: 1,
            timestamp_column: 2,
            has_header: false,
        }
    }
}

impl LineFormat {
    pub fn whitespace() -> Self {
        Self {
            delimiter: "ws".to_string(),
            ..Self::default()
        }
    }

    /// MovieLens `ratings.dat`: `UserID::MovieID::Rating::Timestamp`.
    pub fn movielens() -> Self {
        Self {
            delimiter: "::".to_string(),
            user_column: 0,
            item_column: 1,
            timestamp_column: 3,
            has_header: false,
        }
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        if self.delimiter == "ws" {
            line.split_whitespace().collect()
        } else {
            line.split(self.delimiter.as_str()).map(str::trim).collect()
        }
    }
}

/// Raw implicit-feedback events in file order, free of duplicate triples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    /// Duplicate lines dropped at ingestion.
    pub duplicates_removed: usize,
}

impl InteractionLog {
    /// Builds a log from records, dropping repeated (user, item, timestamp)
    /// triples and keeping the first occurrence.
    pub fn from_records(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        let mut duplicates_removed = 0;
        for r in records {
            if seen.insert(r.clone()) {
                kept.push(r);
            } else {
                duplicates_removed += 1;
            }
        }
        Self {
            records: kept,
            duplicates_removed,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn parse_str(text: &str, format: &LineFormat, origin: &Path) -> Result<Self> {
        let max_col = format
            .user_column
            .max(format.item_column)
            .max(format.timestamp_column);
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && format.has_header {
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols = format.split(line);
            if cols.len() <= max_col {
                return Err(parse_err(format!(
                    "expected at least {} columns, found {}",
                    max_col + 1,
                    cols.len()
                )));
            }
            let user = cols[format.user_column];
            let item = cols[format.item_column];
            if user.is_empty() || item.is_empty() {
                return Err(parse_err("empty user or item id".into()));
            }
            let ts = cols[format.timestamp_column];
            let timestamp = ts.parse::<u64>().map_err(|_| {
                parse_err(format!("timestamp {ts:?} is not a non-negative integer"))
            })?;
            records.push(Interaction {
                user: user.to_string(),
                item: item.to_string(),
                timestamp,
            });
        }
        if records.is_empty() {
            return Err(Error::EmptyInput(format!(
                "{} contains no interactions",
                origin.display()
            )));
        }
        Ok(Self::from_records(records))
    }
}

pub fn load_interactions(path: impl AsRef<Path>, format: &LineFormat) -> Result<InteractionLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    InteractionLog::parse_str(&text, format, path)
}

/// Single-pass minimum-interaction filter: items first, then users.
///
/// Item counts are taken on the input log; user counts on the item-filtered
/// log. There is no iteration to a fixed point, so survivors may end up below
/// `min_count` on the other axis.
pub fn filter_min_interactions(log: &InteractionLog, min_count: usize) -> Result<InteractionLog> {
    if min_count == 0 {
        return Err(Error::contract("min_count must be at least 1"));
    }
    let mut item_counts: HashMap<&str, usize> = HashMap::new();
    for r in &log.records {
        *item_counts.entry(r.item.as_str()).or_default() += 1;
    }
    let items_kept: Vec<&Interaction> = log
        .records
        .iter()
        .filter(|r| item_counts[r.item.as_str()] >= min_count)
        .collect();
    let mut user_counts: HashMap<&str, usize> = HashMap::new();
    for r in &items_kept {
        *user_counts.entry(r.user.as_str()).or_default() += 1;
    }
    let records: Vec<Interaction> = items_kept
        .into_iter()
        .filter(|r| user_counts[r.user.as_str()] >= min_count)
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interactions survive min_count = {min_count}"
        )));
    }
    Ok(InteractionLog {
        records,
        duplicates_removed: log.duplicates_removed,
    })
}
