use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{fingerprint, MarkovSpec, SequenceDataset};
use crate::error::{Error, Result};
use crate::eval::RankingProtocol;
use crate::model::ModelConfig;
use crate::objectives::LossKind;
use crate::trainer::{EnvironmentProfile, TrainConfig};
use crate::tuner::{AshaConfig, SearchSpace, Strategy};

/// Version written to and required from every config file.
pub const SCHEMA_VERSION: u32 = 1;

/// Where the interaction sequences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// A bundle written by `prepare`; relative paths resolve against the
    /// config file's directory.
    Bundle { path: PathBuf },
    /// First-order Markov data generated on the fly.
    Synthetic { spec: MarkovSpec, max_len: usize },
}

impl DatasetSource {
    /// Dataset and the content fingerprint of its bundle text.
    pub fn load(&self, base: &Path) -> Result<(SequenceDataset, String)> {
        match self {
            DatasetSource::Bundle { path } => SequenceDataset::load_bundle(base.join(path)),
            DatasetSource::Synthetic { spec, max_len } => {
                let seqs = spec
                    .generate_sequences()
                    .into_iter()
                    .map(|s| s.into_iter().map(|i| i as u32 + 1).collect())
                    .collect();
                let ds = SequenceDataset::from_sequences(seqs, spec.n_items, *max_len)?;
                let fp = fingerprint(ds.to_bundle_string()?.as_bytes());
                Ok((ds, fp))
            }
        }
    }
}

fn default_environment() -> EnvironmentProfile {
    EnvironmentProfile::standard(LossKind::Ce)
}

fn default_protocols() -> Vec<RankingProtocol> {
    vec![
        RankingProtocol::all_ranking(),
        RankingProtocol::uniform(100),
        RankingProtocol::popularity(100),
    ]
}

fn default_parallelism() -> usize {
    1
}

/// A single training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default = "default_environment")]
    pub environment: EnvironmentProfile,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Protocols for the final test evaluation.
    #[serde(default = "default_protocols")]
    pub protocols: Vec<RankingProtocol>,
}

/// A hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default = "default_environment")]
    pub environment: EnvironmentProfile,
    #[serde(default)]
    pub train: TrainConfig,
    pub space: SearchSpace,
    pub strategy: Strategy,
    /// Trial count; grid search defaults to the whole grid.
    #[serde(default)]
    pub trials: Option<usize>,
    pub asha: AshaConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<RankingProtocol>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        validate_common(&self.train, &self.protocols)
    }
}

impl SweepManifest {
    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        validate_common(&self.train, &self.protocols)
    }
}

fn validate_common(train: &TrainConfig, protocols: &[RankingProtocol]) -> Result<()> {
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train.learning_rate.is_nan() || train.learning_rate <= 0.0 {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    train.selection_protocol.validate()?;
    protocols.iter().try_for_each(|p| p.validate())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses TOML after checking `schema_version`.
pub fn parse_versioned<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let parse_err = |e: toml::de::Error| Error::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    };
    let table: toml::Table = toml::from_str(text).map_err(parse_err)?;
    match table.get("schema_version") {
        Some(toml::Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
        Some(v) => {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION.to_string(),
                found: v.to_string(),
            })
        }
        None => {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION.to_string(),
                found: "none".into(),
            })
        }
    }
    toml::from_str(text).map_err(parse_err)
}

pub fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_versioned(&text, path)
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Format(format!("cannot write config: {e}")))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_versioned(path)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SweepManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_versioned(path)?;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Causality;

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 3,
            output_dir: None,
            dataset: DatasetSource::Synthetic {
                spec: MarkovSpec {
                    n_items: 20,
                    n_users: 30,
                    ..MarkovSpec::default()
                },
                max_len: 10,
            },
            environment: EnvironmentProfile::reproduction(10, 5, 50),
            model: ModelConfig::small(Causality::Ae, 10),
            train: TrainConfig::default(),
            protocols: default_protocols(),
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = config();
        let text = to_toml(&c).unwrap();
        let back: ExperimentConfig = parse_versioned(&text, Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sweep_manifest_round_trip() {
        let mut space = SearchSpace::small(Causality::Ae, 10);
        space.local_window = vec![None, Some(2)];
        space.sse = vec![None, Some(0.1)];
        let m = SweepManifest {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            output_dir: Some("out".into()),
            dataset: DatasetSource::Bundle {
                path: "data.bundle".into(),
            },
            environment: default_environment(),
            train: TrainConfig::default(),
            space,
            strategy: Strategy::Random,
            trials: Some(4),
            asha: AshaConfig::default(),
            parallelism: 2,
            protocols: vec![RankingProtocol::all_ranking()],
        };
        let text = to_toml(&m).unwrap();
        assert!(text.contains("\"off\""));
        let back: SweepManifest = parse_versioned(&text, Path::new("m.toml")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn version_and_parse_errors() {
        let text = to_toml(&config())
            .unwrap()
            .replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(
            parse_versioned::<ExperimentConfig>(&text, Path::new("x")),
            Err(Error::SchemaVersion { .. })
        ));
        let bad = "schema_version = 1\nseed = 1\n\nbogus = [\n".to_string();
        assert!(matches!(
            parse_versioned::<ExperimentConfig>(&bad, Path::new("x")),
            Err(Error::Parse { line: 4, .. })
        ));
        let unknown = to_toml(&config())
            .unwrap()
            .replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(matches!(
            parse_versioned::<ExperimentConfig>(&unknown, Path::new("x")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn synthetic_source_is_deterministic() {
        let (a, fa) = config().dataset.load(Path::new(".")).unwrap();
        let (b, fb) = config().dataset.load(Path::new(".")).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
    }
}
