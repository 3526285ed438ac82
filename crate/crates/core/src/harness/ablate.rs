//! Positional-encoding × masking × length grid on desk-scale tasks.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use super::config::{DataConfig, RunConfig, TrainingTask};
use super::trainer::{source_for, synthetic_examples, Trainer};
use crate::data::{derive_seed, LanguageConfig, MaskStrategy, OffsetCopyTask, PretrainExample};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerConfig, PrecisionPolicy};
use crate::posenc::SchemeKind;

const EVAL_STREAM: u64 = 21;

/// Optional MLM probe on a generated language, trained per masking
/// strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmProbe {
    pub language: LanguageConfig,
    pub documents: usize,
    pub sentences_per_document: usize,
    pub steps: u64,
}

impl Default for MlmProbe {
    fn default() -> Self {
        Self {
            language: LanguageConfig {
                num_symbols: 40,
                num_words: 60,
                min_sentence_len: 10,
                max_sentence_len: 40,
                ..LanguageConfig::default()
            },
            documents: 20,
            sentences_per_document: 12,
            steps: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub schemes: Vec<SchemeKind>,
    pub strategies: Vec<MaskStrategy>,
    pub sl_train: usize,
    pub sl_eval: usize,
    /// Architecture template; the scheme and position table are set per
    /// cell.
    pub model: EncoderConfig,
    /// Absolute table size for PAPE cells; the training length when unset.
    pub pape_max_position: Option<usize>,
    pub task: OffsetCopyTask,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub eval_examples: usize,
    pub mlm: Option<MlmProbe>,
    pub seed: u64,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            schemes: vec![SchemeKind::Pape, SchemeKind::Prpe, SchemeKind::Frpe],
            strategies: vec![MaskStrategy::Char, MaskStrategy::Wwm],
            sl_train: 32,
            sl_eval: 64,
            model: EncoderConfig {
                hidden_size: 32,
                num_layers: 1,
                num_heads: 2,
                intermediate_size: 64,
                ..EncoderConfig::desk(64, SchemeKind::Frpe)
            },
            pape_max_position: None,
            task: OffsetCopyTask::default(),
            steps: 1500,
            batch_size: 8,
            lr_max: 1e-2,
            warmup_steps: 100,
            eval_examples: 200,
            mlm: None,
            seed: 0,
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() || self.strategies.is_empty() {
            return Err(Error::Config("ablation grid needs at least one scheme and one strategy".into()));
        }
        if self.sl_eval < self.sl_train {
            return Err(Error::Config("evaluation length must be at least the training length".into()));
        }
        if self.eval_examples == 0 {
            return Err(Error::Config("eval_examples must be positive".into()));
        }
        self.task.validate()
    }

    fn cell_model(&self, scheme: SchemeKind) -> EncoderConfig {
        let max_position = match scheme {
            SchemeKind::Pape => self.pape_max_position.unwrap_or(self.sl_train),
            _ => self.sl_train,
        };
        EncoderConfig {
            scheme,
            max_position,
            ..self.model.clone()
        }
    }

    /// Run configuration for the offset-copy cell of `scheme`.
    pub fn offset_run(&self, scheme: SchemeKind) -> RunConfig {
        let model = EncoderConfig {
            vocab_size: self.model.vocab_size.max(self.task.vocab_size()),
            ..self.cell_model(scheme)
        };
        self.run(model, TrainingTask::OffsetCopy(self.task.clone()), MaskStrategy::Char, self.steps)
    }

    fn run(&self, model: EncoderConfig, task: TrainingTask, strategy: MaskStrategy, steps: u64) -> RunConfig {
        RunConfig {
            model,
            data: DataConfig {
                seq_len: self.sl_train,
                ..DataConfig::default()
            },
            task,
            strategy,
            schedule: LrSchedule::linear(self.lr_max, self.warmup_steps.min(steps.saturating_sub(1)).max(1), steps.max(2)),
            precision: PrecisionPolicy::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: self.batch_size,
            total_steps: steps,
            checkpoint_every: 0,
            seed: self.seed,
            out_dir: Default::default(),
        }
    }
}

/// Accuracy, or the documented absolute-position failure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellScore {
    Accuracy(f64),
    OutOfRange,
}

impl CellScore {
    pub fn accuracy(self) -> Option<f64> {
        match self {
            CellScore::Accuracy(a) => Some(a),
            CellScore::OutOfRange => None,
        }
    }

    fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(a) => Ok(CellScore::Accuracy(a)),
            Err(Error::OutOfRange { .. }) => Ok(CellScore::OutOfRange),
            Err(e) => Err(e),
        }
    }
}

impl fmt::Display for CellScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellScore::Accuracy(a) => write!(f, "{a:.4}"),
            CellScore::OutOfRange => f.write_str("fail/out-of-range"),
        }
    }
}

impl Serialize for CellScore {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            CellScore::Accuracy(a) => s.serialize_f64(*a),
            CellScore::OutOfRange => s.serialize_str("fail/out-of-range"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub scheme: SchemeKind,
    pub strategy: MaskStrategy,
    pub sl_train: usize,
    pub sl_eval: usize,
    pub offset_train: CellScore,
    pub offset_eval: CellScore,
    pub mlm_train: Option<CellScore>,
    pub mlm_eval: Option<CellScore>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub grid: AblationGrid,
    pub seed: u64,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub const COLUMNS: [&'static str; 9] = [
        "variant",
        "scheme",
        "masking",
        "sl_train",
        "sl_eval",
        "offset_acc_train",
        "offset_acc_eval",
        "mlm_acc_train",
        "mlm_acc_eval",
    ];

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# grid {}\n", serde_json::to_string(&self.grid).unwrap_or_default());
        out.push_str(&Self::COLUMNS.join("\t"));
        out.push('\n');
        let opt = |s: Option<CellScore>| s.map_or_else(|| "-".to_string(), |s| s.to_string());
        for c in &self.cells {
            let row = [
                c.variant.clone(),
                c.scheme.to_string(),
                c.strategy.to_string(),
                c.sl_train.to_string(),
                c.sl_eval.to_string(),
                c.offset_train.to_string(),
                c.offset_eval.to_string(),
                opt(c.mlm_train),
                opt(c.mlm_eval),
            ];
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn cell(&self, scheme: SchemeKind, strategy: MaskStrategy) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.scheme == scheme && c.strategy == strategy)
    }
}

/// Masked-position accuracy of `trainer`'s model on `examples`.
fn accuracy(trainer: &Trainer, examples: &[PretrainExample]) -> Result<f64> {
    Ok(trainer.encoder.evaluate(&trainer.params, examples)?.mlm_accuracy())
}

/// Trains the offset-copy task for one scheme; returns accuracy at the
/// training and evaluation lengths.
pub fn offset_copy_scores(grid: &AblationGrid, scheme: SchemeKind) -> Result<(CellScore, CellScore)> {
    let run = grid.offset_run(scheme);
    let mut trainer = Trainer::new(run.clone())?;
    let source = source_for(&run)?;
    trainer.train(source.as_ref(), run.total_steps, None, None)?;
    let score_at = |sl: usize, stream: u64| -> Result<CellScore> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(grid.seed, EVAL_STREAM, stream));
        let examples = (0..grid.eval_examples)
            .map(|_| grid.task.generate(sl, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        CellScore::from_result(accuracy(&trainer, &examples))
    };
    Ok((score_at(grid.sl_train, 0)?, score_at(grid.sl_eval, 1)?))
}

fn mlm_scores(
    grid: &AblationGrid,
    probe: &MlmProbe,
    scheme: SchemeKind,
    strategy: MaskStrategy,
) -> Result<(CellScore, CellScore)> {
    let needed = probe.language.num_symbols + crate::data::vocab::NUM_SPECIAL as usize;
    let model = EncoderConfig {
        vocab_size: grid.model.vocab_size.max(needed),
        ..grid.cell_model(scheme)
    };
    let task = TrainingTask::SyntheticLanguage {
        language: probe.language.clone(),
        documents: probe.documents,
        sentences_per_document: probe.sentences_per_document,
    };
    let run = grid.run(model, task, strategy, probe.steps);
    let mut trainer = Trainer::new(run.clone())?;
    let source = source_for(&run)?;
    trainer.train(source.as_ref(), run.total_steps, None, None)?;
    let score_at = |sl: usize, stream: u64| -> Result<CellScore> {
        let eval_run = RunConfig {
            data: DataConfig {
                seq_len: sl,
                ..run.data.clone()
            },
            ..run.clone()
        };
        let corpus_seed = derive_seed(grid.seed, EVAL_STREAM, stream);
        let (_, examples) =
            synthetic_examples(&eval_run, &probe.language, probe.documents, probe.sentences_per_document, corpus_seed)?;
        let examples: Vec<_> = examples.into_iter().take(grid.eval_examples).collect();
        CellScore::from_result(accuracy(&trainer, &examples))
    };
    Ok((score_at(grid.sl_train, 2)?, score_at(grid.sl_eval, 3)?))
}

fn variant_name(scheme: SchemeKind, strategy: MaskStrategy) -> String {
    format!("{}+{}", scheme.to_string().to_uppercase(), strategy.to_string().to_uppercase())
}

/// Runs every cell of `grid`; writes `ablation.tsv` and `ablation.json`
/// under `out` when given. Offset-copy scores do not depend on the masking
/// strategy and are computed once per scheme.
pub fn cmd_ablate(grid: &AblationGrid, out: Option<&Path>) -> Result<AblationTable> {
    grid.validate()?;
    let mut cells = Vec::new();
    for &scheme in &grid.schemes {
        let (offset_train, offset_eval) = offset_copy_scores(grid, scheme)?;
        for &strategy in &grid.strategies {
            let (mlm_train, mlm_eval) = match &grid.mlm {
                Some(probe) => {
                    let (a, b) = mlm_scores(grid, probe, scheme, strategy)?;
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            cells.push(AblationCell {
                variant: variant_name(scheme, strategy),
                scheme,
                strategy,
                sl_train: grid.sl_train,
                sl_eval: grid.sl_eval,
                offset_train,
                offset_eval,
                mlm_train,
                mlm_eval,
            });
        }
    }
    let table = AblationTable {
        grid: grid.clone(),
        seed: grid.seed,
        cells,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = dir.join("ablation.tsv");
        fs::write(&tsv, table.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
        let json = dir.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(&table)? + "\n").map_err(|e| Error::io(&json, e))?;
    }
    Ok(table)
}
