//! Versioned experiment configs, run directories, JSON-lines logs and
//! paired run comparison.

mod compare;
mod config;
mod run;

pub use compare::{compare_runs, CompareRow, CompareTable};
pub use config::{
    parse_versioned, read_versioned, to_toml, DatasetSource, ExperimentConfig, SweepManifest,
    SCHEMA_VERSION,
};
pub use run::{
    execute_evaluate, execute_train, execute_tune, read_json, read_json_lines, JsonLines,
    LogRecord, RunSummary, TuneSummary, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, SUMMARY_FILE,
};
