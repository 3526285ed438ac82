use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::{RunConfig, TrainingTask};
use super::metrics::{MetricsHeader, MetricsLog, MetricsRecord};
use crate::data::{
    create_examples, derive_seed, read_examples, Lexicon, OffsetCopyTask, PretrainExample, SyntheticLanguage,
};
use crate::encoder::{Encoder, LossReport};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::optim::{mixed_precision_step, Optimizer};

const BATCH_STREAM: u64 = 11;
const DROPOUT_STREAM: u64 = 12;
const LANGUAGE_STREAM: u64 = 13;

/// Supplies the batch for a given step. Batches depend only on the step
/// index, so a resumed run sees the same data as an uninterrupted one.
pub trait BatchSource {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<PretrainExample>>;
}

/// Uniform sampling with replacement from a fixed example set.
pub struct ExamplePool {
    pub examples: Vec<PretrainExample>,
    pub seed: u64,
}

impl BatchSource for ExamplePool {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<PretrainExample>> {
        if self.examples.is_empty() {
            return Err(Error::Input("training example set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, BATCH_STREAM, step));
        Ok((0..size)
            .map(|_| self.examples[rng.gen_range(0..self.examples.len())].clone())
            .collect())
    }
}

/// Fresh offset-copy sequences per step.
pub struct OffsetCopySource {
    pub task: OffsetCopyTask,
    pub seq_len: usize,
    pub seed: u64,
}

impl BatchSource for OffsetCopySource {
    fn batch(&self, step: u64, size: usize) -> Result<Vec<PretrainExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, BATCH_STREAM, step));
        (0..size).map(|_| self.task.generate(self.seq_len, &mut rng)).collect()
    }
}

/// Pretraining examples from a generated language. The language itself is
/// fixed by `run.seed`; documents, pairing and masking by `corpus_seed`, so
/// held-out sets share the language but not the text.
pub fn synthetic_examples(
    run: &RunConfig,
    language: &crate::data::LanguageConfig,
    documents: usize,
    sentences_per_document: usize,
    corpus_seed: u64,
) -> Result<(SyntheticLanguage, Vec<PretrainExample>)> {
    let lang = SyntheticLanguage::generate(language.clone(), derive_seed(run.seed, LANGUAGE_STREAM, 0))?;
    let docs = lang.corpus(documents, sentences_per_document, derive_seed(corpus_seed, LANGUAGE_STREAM, 1));
    let lexicon: Lexicon = lang.lexicon();
    let (examples, _) = create_examples(&docs, &lang.vocabulary(), &lexicon, &run.pipeline(), corpus_seed)?;
    Ok((lang, examples))
}

/// The batch source described by `run.task`.
pub fn source_for(run: &RunConfig) -> Result<Box<dyn BatchSource>> {
    Ok(match &run.task {
        TrainingTask::Examples => {
            let path = run
                .data
                .examples
                .as_ref()
                .ok_or_else(|| Error::Config("task \"examples\" needs data.examples".into()))?;
            Box::new(ExamplePool {
                examples: read_examples(path)?,
                seed: run.seed,
            })
        }
        TrainingTask::OffsetCopy(task) => Box::new(OffsetCopySource {
            task: task.clone(),
            seq_len: run.data.seq_len,
            seed: run.seed,
        }),
        TrainingTask::SyntheticLanguage {
            language,
            documents,
            sentences_per_document,
        } => Box::new(ExamplePool {
            examples: synthetic_examples(run, language, *documents, *sentences_per_document, run.seed)?.1,
            seed: run.seed,
        }),
    })
}

/// Model, master weights and optimizer state for one run.
pub struct Trainer {
    pub run: RunConfig,
    pub encoder: Encoder,
    pub params: ParamStore,
    pub optimizer: Optimizer,
    /// Completed steps.
    pub step: u64,
    pub last_metrics: Option<MetricsRecord>,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let (encoder, params) = Encoder::init(run.model.clone(), run.seed)?;
        let optimizer = Optimizer::new(run.optimizer.clone(), &params);
        Ok(Self {
            run,
            encoder,
            params,
            optimizer,
            step: 0,
            last_metrics: None,
        })
    }

    /// Continues a run from its checkpoint, using the full-precision
    /// master weights and moments.
    pub fn resume(dir: &Path) -> Result<Self> {
        let Checkpoint {
            manifest,
            master,
            optimizer,
            ..
        } = load_checkpoint(dir)?;
        let run = manifest.config;
        run.validate()?;
        let (encoder, _) = Encoder::init(run.model.clone(), run.seed)?;
        encoder.check_params(&master)?;
        Ok(Self {
            optimizer: Optimizer {
                config: run.optimizer.clone(),
                state: optimizer,
            },
            run,
            encoder,
            params: master,
            step: manifest.step,
            last_metrics: manifest.metrics,
        })
    }

    /// Fresh optimizer and step counter, weights taken from another run's
    /// checkpoint. Layouts must agree.
    pub fn init_from(run: RunConfig, dir: &Path) -> Result<Self> {
        let mut t = Self::new(run)?;
        let ck = load_checkpoint(dir)?;
        t.encoder.check_params(&ck.master)?;
        t.params = ck.master;
        Ok(t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(
            dir,
            &self.run,
            self.step,
            self.last_metrics.as_ref(),
            &self.params,
            &self.optimizer.state,
        )
    }

    pub fn lr(&self) -> f64 {
        self.run.schedule.lr_at_step(self.step)
    }

    /// One optimizer step on the batch for the current step index.
    pub fn train_step(&mut self, source: &dyn BatchSource, started: Instant) -> Result<MetricsRecord> {
        let batch = source.batch(self.step, self.run.batch_size)?;
        let lr = self.lr();
        let dropout_seed = derive_seed(self.run.seed, DROPOUT_STREAM, self.step);
        let encoder = &self.encoder;
        let mut report = LossReport::default();
        let outcome = mixed_precision_step(
            &self.run.precision,
            &mut self.params,
            &mut self.optimizer,
            lr,
            |p, arith, scale| {
                let (r, g) = encoder.batch_gradients(p, &batch, arith, scale, dropout_seed)?;
                let loss = r.total;
                report = r;
                Ok((loss, g))
            },
        )?;
        self.step += 1;
        let record = MetricsRecord {
            step: self.step,
            loss: outcome.loss,
            mlm_loss: report.mlm,
            nsp_loss: report.nsp,
            mlm_accuracy: report.mlm_accuracy(),
            lr,
            skipped: outcome.skipped,
            wall_time: started.elapsed().as_secs_f64(),
        };
        self.last_metrics = Some(record.clone());
        Ok(record)
    }

    /// Trains until `until_step`, logging every step and checkpointing every
    /// `checkpoint_every` steps into `out/step-N`.
    pub fn train(
        &mut self,
        source: &dyn BatchSource,
        until_step: u64,
        log: Option<&mut MetricsLog>,
        out: Option<&Path>,
    ) -> Result<Vec<MetricsRecord>> {
        let started = Instant::now();
        let mut records = Vec::new();
        let mut log = log;
        while self.step < until_step {
            let record = self.train_step(source, started)?;
            if let Some(l) = log.as_deref_mut() {
                l.append(&record)?;
            }
            records.push(record);
            let every = self.run.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.step.is_multiple_of(every) && self.step < until_step {
                    self.save(&dir.join(format!("step-{}", self.step)))?;
                }
            }
        }
        Ok(records)
    }

    pub fn metrics_header(&self) -> MetricsHeader {
        MetricsHeader {
            config: self.run.clone(),
            seed: self.run.seed,
            start_step: self.step,
        }
    }
}
