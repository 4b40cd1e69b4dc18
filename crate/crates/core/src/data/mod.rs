//! Interaction ingestion, filtering, sequence building and leave-one-out splits.

pub mod augment;
pub mod dataset;
pub mod log;
pub mod split;
pub mod synthetic;

pub use augment::{augment_duplicate, augment_sliding_window, truncate_sequence, window_offsets};
pub use dataset::{fingerprint, popularity_distribution, DatasetStats, SequenceDataset, PAD_ID};
pub use log::{
    filter_min_interactions, load_interactions, Interaction, InteractionLog, LineFormat,
};
pub use split::{build_splits, EvalCase, SelectionToken, SplitView};
pub use synthetic::MarkovSpec;

use crate::error::Result;

/// Options for the end-to-end preparation pipeline.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrepareOptions {
    pub format: LineFormat,
    pub min_count: usize,
    pub max_len: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            format: LineFormat::default(),
            min_count: 5,
            max_len: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrepareReport {
    pub raw_interactions: usize,
    pub duplicates_removed: usize,
    pub filtered_interactions: usize,
    pub dropped_short_users: usize,
    pub stats: DatasetStats,
}

/// Filter, group and index a log.
pub fn prepare(
    log: &InteractionLog,
    opts: &PrepareOptions,
) -> Result<(SequenceDataset, PrepareReport)> {
    let filtered = filter_min_interactions(log, opts.min_count)?;
    let (dataset, dropped) = SequenceDataset::from_log(&filtered, opts.max_len)?;
    let report = PrepareReport {
        raw_interactions: log.len(),
        duplicates_removed: log.duplicates_removed,
        filtered_interactions: filtered.len(),
        dropped_short_users: dropped,
        stats: dataset.stats(),
    };
    Ok((dataset, report))
}
