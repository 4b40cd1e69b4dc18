use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{to_toml, DatasetSource, ExperimentConfig, SweepManifest, SCHEMA_VERSION};
use crate::data::{fingerprint, SelectionToken};
use crate::error::{Error, Result};
use crate::eval::{MetricReport, RankingProtocol, Split};
use crate::model::{Causality, Model};
use crate::trainer::{train_trial, Control, TrainData, TrialStatus};
use crate::tuner::{
    run_sweep, trial_specs, LeaderboardEntry, Strategy, Suggester, TrainingExecutor,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "run.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        seed: u64,
        dataset_fingerprint: String,
        config_fingerprint: String,
        parameters: usize,
    },
    Epoch {
        epoch: usize,
        loss: f64,
        lr: f64,
        seconds: f64,
    },
    /// `epoch` is `None` for the final test evaluation.
    Metrics {
        epoch: Option<usize>,
        report: MetricReport,
    },
    Finish {
        status: TrialStatus,
        epochs: usize,
        best_epoch: usize,
        #[serde(with = "crate::serde_helpers::score")]
        best_recall10: f64,
        diagnostic: Option<String>,
    },
}

/// Append-only JSON-lines writer; every record is flushed on write.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, text + "\n")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub causality: Causality,
    pub dataset_fingerprint: String,
    pub config_fingerprint: String,
    pub status: TrialStatus,
    pub epochs: usize,
    pub best_epoch: usize,
    #[serde(with = "crate::serde_helpers::score")]
    pub best_recall10: f64,
    pub diagnostic: Option<String>,
    pub test: Vec<MetricReport>,
}

impl RunSummary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let s: Self = read_json(&run_dir.join(SUMMARY_FILE))?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION.to_string(),
                found: s.schema_version.to_string(),
            });
        }
        Ok(s)
    }
}

/// Bundle paths made absolute so a copied config works from any directory.
fn resolve_source(source: &DatasetSource, base: &Path) -> DatasetSource {
    match source {
        DatasetSource::Bundle { path } => {
            let joined = base.join(path);
            DatasetSource::Bundle {
                path: fs::canonicalize(&joined).unwrap_or(joined),
            }
        }
        other => other.clone(),
    }
}

/// Trains one configuration with early stopping, saves the best checkpoint
/// and then evaluates the test split once per protocol.
///
/// Writes `config.toml`, `log.jsonl`, `model.ckpt` and `run.json` to `out`.
pub fn execute_train(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = ExperimentConfig {
        dataset: resolve_source(&cfg.dataset, base),
        output_dir: None,
        ..cfg.clone()
    };
    let (dataset, dataset_fp) = resolved.dataset.load(Path::new("."))?;
    let config_text = to_toml(&resolved)?;
    write_file(&out.join(CONFIG_FILE), &config_text)?;
    let config_fp = fingerprint(config_text.as_bytes());
    let data = TrainData::new(&dataset, config_fp.clone())?;

    let mut log = JsonLines::create(&out.join(LOG_FILE))?;
    log.append(&LogRecord::Start {
        seed: cfg.seed,
        dataset_fingerprint: dataset_fp.clone(),
        config_fingerprint: config_fp.clone(),
        parameters: cfg
            .model
            .parameter_count(dataset.n_items(), dataset.n_users()),
    })?;
    let mut log_error = None;
    let result = train_trial(
        &cfg.model,
        &cfg.environment,
        &cfg.train,
        &data,
        cfg.seed,
        cfg.train.max_epochs,
        &mut |rec| {
            let written = log
                .append(&LogRecord::Epoch {
                    epoch: rec.epoch,
                    loss: rec.loss,
                    lr: rec.lr,
                    seconds: rec.seconds,
                })
                .and_then(|_| {
                    log.append(&LogRecord::Metrics {
                        epoch: Some(rec.epoch),
                        report: rec.validation.clone(),
                    })
                });
            match written {
                Ok(()) => Control::Continue,
                Err(e) => {
                    log_error = Some(e);
                    Control::Stop
                }
            }
        },
    )?;
    if let Some(e) = log_error {
        return Err(e);
    }

    let mut test = Vec::new();
    if result.status != TrialStatus::Diverged {
        write_file(&out.join(CHECKPOINT_FILE), result.model.to_checkpoint()?)?;
        let token = SelectionToken::conclude("early stopping fixed the reported epoch");
        for p in &cfg.protocols {
            let report = data.evaluate_test(&result.model, p, &token, cfg.seed)?;
            log.append(&LogRecord::Metrics {
                epoch: None,
                report: report.clone(),
            })?;
            test.push(report);
        }
    }
    let state = &result.state;
    log.append(&LogRecord::Finish {
        status: result.status,
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        best_recall10: state.best_recall10,
        diagnostic: result.diagnostic.clone(),
    })?;
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        causality: cfg.model.causality,
        dataset_fingerprint: dataset_fp,
        config_fingerprint: config_fp,
        status: result.status,
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        best_recall10: state.best_recall10,
        diagnostic: result.diagnostic,
        test,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    if summary.status == TrialStatus::Diverged {
        return Err(Error::Diverged(
            summary.diagnostic.clone().unwrap_or_default(),
        ));
    }
    Ok(summary)
}

/// Re-evaluates a finished run's checkpoint.
pub fn execute_evaluate(
    run_dir: &Path,
    protocols: &[RankingProtocol],
    split: Split,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let cfg = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    let model = Model::from_checkpoint(&bytes)?;
    let (dataset, _) = cfg.dataset.load(run_dir)?;
    if dataset.n_items() != model.n_items {
        return Err(Error::Format(format!(
            "checkpoint expects {} items, dataset has {}",
            model.n_items,
            dataset.n_items()
        )));
    }
    let config_text =
        fs::read_to_string(run_dir.join(CONFIG_FILE)).map_err(|e| Error::io(run_dir, e))?;
    let data = TrainData::new(&dataset, fingerprint(config_text.as_bytes()))?;
    let token = SelectionToken::conclude("evaluating a finished run");
    protocols
        .iter()
        .map(|p| {
            p.validate()?;
            match split {
                Split::Validation => data.evaluate_validation(&model, p, seed),
                Split::Test => data.evaluate_test(&model, p, &token, seed),
            }
        })
        .collect()
}

/// Result of [`execute_tune`].
#[derive(Debug, Clone)]
pub struct TuneSummary {
    pub best: LeaderboardEntry,
    pub leaderboard: Vec<LeaderboardEntry>,
    pub table: String,
}

/// Runs a sweep and writes `manifest.toml`, `leaderboard.jsonl`,
/// `leaderboard.txt`, `replay.jsonl`, `best.toml` and `best.ckpt` to `out`.
pub fn execute_tune(
    manifest: &SweepManifest,
    base: &Path,
    out: &Path,
    parallelism: usize,
) -> Result<TuneSummary> {
    manifest.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = SweepManifest {
        dataset: resolve_source(&manifest.dataset, base),
        output_dir: None,
        ..manifest.clone()
    };
    let (dataset, _) = resolved.dataset.load(Path::new("."))?;
    let text = to_toml(&resolved)?;
    write_file(&out.join("manifest.toml"), &text)?;
    let data = TrainData::new(&dataset, fingerprint(text.as_bytes()))?;

    let mut suggester = Suggester::new(manifest.space.clone(), manifest.strategy, manifest.seed)?;
    let count = match (manifest.strategy, manifest.trials) {
        (_, Some(n)) => n,
        (Strategy::Grid, None) => usize::MAX,
        (Strategy::Random, None) => {
            return Err(Error::Config("random search needs `trials`".into()))
        }
    };
    let specs = trial_specs(suggester.take(count)?, manifest.seed);
    let exec = TrainingExecutor {
        data: &data,
        env: manifest.environment,
        train: manifest.train.clone(),
    };
    let outcome = run_sweep(&exec, &specs, manifest.asha, parallelism)?;

    let mut board = JsonLines::create(&out.join("leaderboard.jsonl"))?;
    for e in outcome.ranked() {
        board.append(e)?;
    }
    let mut replay = JsonLines::create(&out.join("replay.jsonl"))?;
    for r in &outcome.replay {
        replay.append(r)?;
    }
    let table = outcome.table();
    write_file(&out.join("leaderboard.txt"), &table)?;

    let best = outcome.best_entry().clone();
    let mut env = manifest.environment;
    env.loss.kind = best.choice.loss;
    let best_cfg = ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        seed: manifest.seed,
        output_dir: None,
        dataset: resolved.dataset.clone(),
        environment: env,
        model: best.choice.model.clone(),
        train: crate::trainer::TrainConfig {
            learning_rate: best.choice.learning_rate,
            ..manifest.train.clone()
        },
        protocols: manifest.protocols.clone(),
    };
    write_file(&out.join("best.toml"), to_toml(&best_cfg)?)?;
    if let Some(Some(result)) = outcome.outputs.get(outcome.best) {
        write_file(&out.join("best.ckpt"), result.model.to_checkpoint()?)?;
    }
    Ok(TuneSummary {
        best,
        leaderboard: outcome.leaderboard.clone(),
        table,
    })
}
