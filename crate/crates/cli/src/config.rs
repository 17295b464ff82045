//! Run configuration file: parsing, validation and default resolution.

use std::fs;
use std::path::{Path, PathBuf};

use letlab_core::alignment::AlignmentSpec;
use letlab_core::data::{gen_markov_corpus, load_corpus, Corpus, MarkovSpec};
use letlab_core::models::ModelConfig;
use letlab_core::seeding;
use letlab_core::trainer::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const OUT_ENV: &str = "LET_LAB_OUT";
pub const DEFAULT_OUTPUT_DIR: &str = "let-lab-out";

fn default_output_dir() -> PathBuf {
    PathBuf::from(DEFAULT_OUTPUT_DIR)
}

fn default_train_fraction() -> f64 {
    0.9
}

fn default_length() -> usize {
    1_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic Markov source; its sampling seed comes from the top-level seed.
    Markov { order: usize, transitions: Vec<Vec<f64>> },
    /// Raw bytes or a LETTOK01 token file.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub source: DataSource,
    /// Tokens to generate for a Markov source.
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

/// The file as written by the user.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    data: DataBlock,
    #[serde(default)]
    model_m: Option<ModelConfig>,
    #[serde(default)]
    model_t: Option<ModelConfig>,
    train: Map<String, Value>,
    #[serde(default)]
    teacher_train: Option<Map<String, Value>>,
    #[serde(default)]
    alignment: AlignmentSpec,
}

/// Fully resolved configuration; echoed into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataBlock,
    pub model_m: ModelConfig,
    pub model_t: ModelConfig,
    pub train: TrainConfig,
    pub teacher_train: TrainConfig,
    pub alignment: AlignmentSpec,
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::usage(msg)
}

fn train_block(
    mut block: Map<String, Value>,
    what: &str,
    mode: Option<Mode>,
    seed: u64,
    alignment: &AlignmentSpec,
) -> Result<TrainConfig, CliError> {
    for key in ["seed", "alignment"] {
        if block.contains_key(key) {
            return Err(usage(format!("{what}.{key} is set from the top level; remove it")));
        }
    }
    if let Some(m) = mode {
        block.insert("mode".into(), serde_json::to_value(m).expect("mode serializes"));
    }
    block.entry("mode").or_insert_with(|| Value::String("baseline".into()));
    block.insert("seed".into(), Value::from(seed));
    let mut cfg: TrainConfig =
        serde_json::from_value(Value::Object(block)).map_err(|e| usage(format!("{what}: {e}")))?;
    if cfg.mode == Mode::Let {
        cfg.alignment = Some(alignment.clone());
    }
    cfg.validate().map_err(|e| usage(format!("{what}: {e}")))?;
    Ok(cfg)
}

impl RunConfigFile {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn parse(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| usage(e.to_string()))?;
        let seed = overrides.seed.unwrap_or(raw.seed);
        raw.alignment.validate().map_err(|e| usage(format!("alignment: {e}")))?;
        if !(raw.data.train_fraction > 0.0 && raw.data.train_fraction < 1.0) {
            return Err(usage(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                raw.data.train_fraction
            )));
        }
        let vocab = match &raw.data.source {
            DataSource::Markov { order, transitions } => {
                MarkovSpec::new(*order, transitions.clone(), 0)
                    .map_err(|e| usage(format!("data.source.markov: {e}")))?
                    .vocab_size()
            }
            DataSource::File { .. } => 256,
        };
        let model_m = raw.model_m.unwrap_or_else(|| ModelConfig::desk_target(vocab));
        let model_t = raw.model_t.unwrap_or_else(|| ModelConfig::desk_small(vocab));
        for (name, m) in [("model_m", &model_m), ("model_t", &model_t)] {
            m.validate().map_err(|e| usage(format!("{name}: {e}")))?;
            if m.vocab_size < vocab {
                return Err(usage(format!("{name}.vocab_size {} is below the corpus vocabulary {vocab}", m.vocab_size)));
            }
        }
        let train = train_block(raw.train.clone(), "train", overrides.mode, seed, &raw.alignment)?;
        let teacher_block = raw.teacher_train.unwrap_or_else(|| {
            let mut b = raw.train.clone();
            b.remove("n_kd");
            b
        });
        let teacher_train = train_block(
            teacher_block,
            "teacher_train",
            Some(Mode::Baseline),
            seeding::substream(seed, "teacher"),
            &raw.alignment,
        )?;
        let output_dir = match std::env::var_os(OUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => raw.output_dir,
        };
        Ok(Self {
            seed,
            output_dir,
            data: raw.data,
            model_m,
            model_t,
            train,
            teacher_train,
            alignment: raw.alignment,
        })
    }

    /// Same configuration with the target-model run switched to `mode`.
    pub fn with_mode(&self, mode: Mode) -> Result<Self, CliError> {
        let mut out = self.clone();
        let mut block = match serde_json::to_value(&self.train).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        block.remove("seed");
        block.remove("alignment");
        out.train = train_block(block, "train", Some(mode), self.seed, &self.alignment)?;
        Ok(out)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.output_dir.join("teacher")
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.teacher_dir().join(letlab_core::trainer::FINAL_CHECKPOINT)
    }

    pub fn markov_spec(&self) -> Option<MarkovSpec> {
        match &self.data.source {
            DataSource::Markov { order, transitions } => Some(
                MarkovSpec::new(*order, transitions.clone(), seeding::substream(self.seed, "data"))
                    .expect("validated when parsed"),
            ),
            DataSource::File { .. } => None,
        }
    }

    /// Train and test corpora, rebuilt deterministically from the data block.
    pub fn corpora(&self) -> Result<(Corpus, Corpus), CliError> {
        let full = match (&self.data.source, self.markov_spec()) {
            (_, Some(spec)) => gen_markov_corpus(&spec, self.data.length)?,
            (DataSource::File { path }, None) => load_corpus(path).map_err(CliError::prerequisite)?,
            _ => unreachable!("markov sources always yield a spec"),
        };
        for (name, m) in [("model_m", &self.model_m), ("model_t", &self.model_t)] {
            if m.vocab_size < full.vocab_size() {
                return Err(usage(format!(
                    "{name}.vocab_size {} is below the corpus vocabulary {}",
                    m.vocab_size,
                    full.vocab_size()
                )));
            }
        }
        Ok(full.split(self.data.train_fraction)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "seed": 3,
        "data": {"source": {"markov": {"order": 1, "transitions": [[0.9, 0.1], [0.1, 0.9]]}}, "length": 5000},
        "train": {"total_steps": 10, "batch_size": 2, "seq_len": 8}
    }"#;

    #[test]
    fn defaults_are_materialized() {
        let c = RunConfigFile::parse(BASE, &Overrides::default()).unwrap();
        assert_eq!(c.train.mode, Mode::Baseline);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.model_m, ModelConfig::desk_target(2));
        assert_eq!(c.teacher_train.total_steps, 10);
        assert_ne!(c.teacher_train.seed, 3);
        assert_eq!(c.data.train_fraction, 0.9);
        let echoed: RunConfigFile = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(echoed, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = BASE.replace("\"seed\": 3", "\"sed\": 3");
        assert!(RunConfigFile::parse(&typo, &Overrides::default()).is_err());
        let typo = BASE.replace("\"batch_size\"", "\"batchsize\"");
        let err = RunConfigFile::parse(&typo, &Overrides::default()).unwrap_err();
        assert!(err.message.contains("batchsize"), "{}", err.message);
    }

    #[test]
    fn overrides_apply() {
        let o = Overrides {
            mode: Some(Mode::Let),
            seed: Some(9),
        };
        let c = RunConfigFile::parse(BASE, &o).unwrap();
        assert_eq!(c.train.mode, Mode::Let);
        assert_eq!(c.train.seed, 9);
        assert!(c.train.alignment.is_some());
        let b = c.with_mode(Mode::Baseline).unwrap();
        assert!(b.train.alignment.is_none());
        assert_eq!(b.train.seed, 9);
    }

    #[test]
    fn nested_seed_is_rejected() {
        let bad = BASE.replace("\"total_steps\": 10", "\"total_steps\": 10, \"seed\": 1");
        assert!(RunConfigFile::parse(&bad, &Overrides::default()).is_err());
    }

    #[test]
    fn corpora_are_deterministic() {
        let c = RunConfigFile::parse(BASE, &Overrides::default()).unwrap();
        let (a, b) = c.corpora().unwrap();
        assert_eq!(a.len(), 4500);
        assert_eq!(b.len(), 500);
        assert_eq!(c.corpora().unwrap().0, a);
    }
}
