use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LanguageConfig, MaskStrategy, MaskingRates, OffsetCopyTask, PipelineConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerConfig, OptimizerKind, PrecisionPolicy};
use crate::posenc::SchemeKind;

/// Corpus-side inputs and the example-creation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: Vec<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub min_count: u64,
    pub max_vocab: Option<usize>,
    /// Prepared training examples (JSON lines).
    pub examples: Option<PathBuf>,
    pub eval_examples: Option<PathBuf>,
    pub seq_len: usize,
    pub rates: MaskingRates,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: Vec::new(),
            lexicon: None,
            vocab: None,
            min_count: 1,
            max_vocab: None,
            examples: None,
            eval_examples: None,
            seq_len: 128,
            rates: MaskingRates::default(),
        }
    }
}

/// Where training batches come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainingTask {
    /// The prepared example file in `data.examples`.
    Examples,
    /// Fresh offset-copy sequences of `data.seq_len` tokens every step.
    OffsetCopy(OffsetCopyTask),
    /// Examples built in memory from a generated language.
    SyntheticLanguage {
        #[serde(default)]
        language: LanguageConfig,
        documents: usize,
        sentences_per_document: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: EncoderConfig,
    pub data: DataConfig,
    pub task: TrainingTask,
    pub strategy: MaskStrategy,
    pub schedule: LrSchedule,
    pub precision: PrecisionPolicy,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale MLM run on a generated language.
    pub fn desk() -> Self {
        Self {
            model: EncoderConfig::desk(256, SchemeKind::Frpe),
            data: DataConfig {
                seq_len: 32,
                ..DataConfig::default()
            },
            task: TrainingTask::SyntheticLanguage {
                language: LanguageConfig::default(),
                documents: 100,
                sentences_per_document: 20,
            },
            strategy: MaskStrategy::Char,
            schedule: LrSchedule::linear(1e-2, 200, 2000),
            precision: PrecisionPolicy::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            total_steps: 2000,
            checkpoint_every: 0,
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Full-scale base recipe: LAMB, peak 1.8e-4, 1800 warmup steps with
    /// linear decay, global batch 14,400. Recorded for reference only.
    pub fn base() -> Self {
        Self {
            model: EncoderConfig::base(),
            data: DataConfig::default(),
            task: TrainingTask::Examples,
            strategy: MaskStrategy::Wwm,
            schedule: LrSchedule::linear(1.8e-4, 1800, 100_000),
            precision: PrecisionPolicy::mixed(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Lamb,
                ..OptimizerConfig::default()
            },
            batch_size: 14_400,
            total_steps: 100_000,
            checkpoint_every: 1000,
            seed: 0,
            out_dir: PathBuf::from("runs/base"),
        }
    }

    /// Full-scale large recipe: peak 1e-4, 1800 warmup steps with
    /// polynomial decay, global batch 5,120. Recorded for reference only.
    pub fn large() -> Self {
        Self {
            model: EncoderConfig::large(),
            schedule: LrSchedule::poly(1e-4, 1800, 100_000, 1.0),
            batch_size: 5120,
            out_dir: PathBuf::from("runs/large"),
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, base, large)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seq_len: self.data.seq_len,
            strategy: self.strategy,
            rates: self.data.rates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.precision.validate()?;
        self.optimizer.validate()?;
        self.data.rates.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.data.seq_len < 5 {
            return Err(Error::Config("sequence length must be at least 5".into()));
        }
        if self.model.uses_absolute() && self.data.seq_len > self.model.max_position {
            return Err(Error::Config(format!(
                "sequence length {} exceeds the absolute position table ({})",
                self.data.seq_len, self.model.max_position
            )));
        }
        match &self.task {
            TrainingTask::Examples if self.data.examples.is_none() => {
                return Err(Error::Config("task \"examples\" needs data.examples".into()));
            }
            TrainingTask::OffsetCopy(t) => {
                t.validate()?;
                if t.vocab_size() > self.model.vocab_size {
                    return Err(Error::Config(format!(
                        "offset-copy task needs vocabulary {} but the model has {}",
                        t.vocab_size(),
                        self.model.vocab_size
                    )));
                }
            }
            TrainingTask::SyntheticLanguage {
                language, documents, ..
            } => {
                if *documents < 2 {
                    return Err(Error::Config("synthetic language needs at least 2 documents".into()));
                }
                let needed = language.num_symbols + crate::data::vocab::NUM_SPECIAL as usize;
                if needed > self.model.vocab_size {
                    return Err(Error::Config(format!(
                        "synthetic language needs vocabulary {needed} but the model has {}",
                        self.model.vocab_size
                    )));
                }
            }
            TrainingTask::Examples => {}
        }
        Ok(())
    }
}
