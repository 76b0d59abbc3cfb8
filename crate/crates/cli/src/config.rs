use std::fs;
use std::path::Path;

use a2d_core::data::{load_parallel_tsv, synth_splits, ParallelCorpus, Split, TaskKind, Vocab};
use a2d_core::{DistillConfig, Error, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Parameters of synthetic corpora and of validation hold-out for TSV input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Fraction of a TSV corpus held out for validation when no `--valid`
    /// file is given.
    pub valid_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_pairs: 5000,
            valid_pairs: 500,
            test_pairs: 500,
            min_len: 3,
            max_len: 8,
            seed: 7,
            valid_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [model] section".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Where corpora come from: a TSV path or `synth:<kind>`.
#[derive(Clone, Debug)]
pub enum DataSource {
    Tsv(std::path::PathBuf),
    Synth(TaskKind),
}

impl DataSource {
    pub fn parse(arg: &str) -> Result<DataSource> {
        match arg.strip_prefix("synth:") {
            Some(kind) => Ok(DataSource::Synth(kind.parse()?)),
            None => Ok(DataSource::Tsv(arg.into())),
        }
    }
}

pub struct Corpora {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

pub fn load_corpora(source: &DataSource, valid: Option<&Path>, data: &DataConfig, vocab_size: usize) -> Result<Corpora> {
    match source {
        DataSource::Synth(kind) => {
            let [train, valid, test] = synth_splits(
                *kind,
                [data.train_pairs, data.valid_pairs, data.test_pairs],
                data.min_len,
                data.max_len,
                vocab_size,
                data.seed,
            )?;
            Ok(Corpora { train, valid, test })
        }
        DataSource::Tsv(path) => {
            let mut train = load_parallel_tsv(path, Split::Train)?;
            let valid = match valid {
                Some(p) => load_parallel_tsv(p, Split::Valid)?,
                None => {
                    if !(0.0..1.0).contains(&data.valid_fraction) {
                        return Err(Error::Config("data.valid_fraction must be in [0, 1)".into()));
                    }
                    let n = ((train.len() as f64) * data.valid_fraction).ceil() as usize;
                    train.split_off(n.min(train.len().saturating_sub(1)), Split::Valid)
                }
            };
            let test = ParallelCorpus {
                pairs: Vec::new(),
                split: Split::Test,
            };
            Ok(Corpora { train, valid, test })
        }
    }
}

/// Vocabulary for a fresh teacher: spelled-out ids for synthetic tasks,
/// otherwise built from the training corpus.
pub fn build_vocab(source: &DataSource, train: &ParallelCorpus, vocab_size: usize) -> Vocab {
    match source {
        DataSource::Synth(_) => Vocab::synthetic(vocab_size),
        DataSource::Tsv(_) => Vocab::from_corpus(train),
    }
}
