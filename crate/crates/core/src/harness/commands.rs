use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::checkpoint::load_checkpoint;
use super::config::{DataConfig, RunConfig, TrainingTask};
use super::metrics::{MetricsLog, MetricsRecord};
use super::trainer::{source_for, synthetic_examples, Trainer};
use crate::data::{
    build_vocab, create_examples, derive_seed, read_corpus, read_examples, write_examples, ExampleStats, Lexicon,
    MaskStrategy, PretrainExample, Vocabulary,
};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{check_gradients, GradCheckOptions, GradCheckReport, ParamStore, Tape};
use crate::posenc::SchemeKind;

const EVAL_STREAM: u64 = 31;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct VocabMeta {
    pub config: RunConfig,
    pub seed: u64,
    pub size: usize,
}

/// Builds the vocabulary from `run.data.corpus` and writes it to `out`
/// with a `.meta.json` sidecar.
pub fn cmd_build_vocab(run: &RunConfig, out: &Path) -> Result<Vocabulary> {
    if run.data.corpus.is_empty() {
        return Err(Error::Config("data.corpus lists no files".into()));
    }
    let vocab = build_vocab(&run.data.corpus, run.data.min_count, run.data.max_vocab)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    vocab.save(out)?;
    write_json(
        &sidecar(out, ".meta.json"),
        &VocabMeta {
            config: run.clone(),
            seed: run.seed,
            size: vocab.len(),
        },
    )?;
    Ok(vocab)
}

#[derive(Clone, Debug, Serialize)]
pub struct PrepareReport {
    pub config: RunConfig,
    pub seed: u64,
    pub strategy: MaskStrategy,
    pub vocab_size: usize,
    pub lexicon_words: usize,
    pub examples_sha256: String,
    pub stats: ExampleStats,
    pub mask_rate: f64,
    pub random_replace_rate: f64,
    pub keep_rate: f64,
    pub nsp_positive_fraction: f64,
}

/// Corpus to example file, plus a `.stats.json` sidecar. Uses the
/// vocabulary at `data.vocab` when given, otherwise builds one and saves it
/// next to the output as `vocab.txt`.
pub fn cmd_prepare_data(run: &RunConfig, out: &Path) -> Result<PrepareReport> {
    run.data.rates.validate()?;
    if run.data.corpus.is_empty() {
        return Err(Error::Config("data.corpus lists no files".into()));
    }
    let docs = read_corpus(&run.data.corpus)?;
    let vocab = match &run.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let path = out.with_file_name("vocab.txt");
            cmd_build_vocab(run, &path)?
        }
    };
    let lexicon = match &run.data.lexicon {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::empty(),
    };
    let (examples, stats) = create_examples(&docs, &vocab, &lexicon, &run.pipeline(), run.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_examples(out, &examples)?;
    let report = PrepareReport {
        config: run.clone(),
        seed: run.seed,
        strategy: run.strategy,
        vocab_size: vocab.len(),
        lexicon_words: lexicon.len(),
        examples_sha256: sha256_file(out)?,
        mask_rate: stats.mask_rate(),
        random_replace_rate: stats.random_replace_rate(),
        keep_rate: stats.keep_rate(),
        nsp_positive_fraction: stats.nsp_positive_fraction(),
        stats,
    };
    write_json(&sidecar(out, ".stats.json"), &report)?;
    Ok(report)
}

/// How a pretraining run starts.
#[derive(Clone, Debug, Default)]
pub enum Start {
    #[default]
    Fresh,
    /// Continue the checkpointed run, including its optimizer state.
    Resume(PathBuf),
    /// Fresh optimizer, weights from another checkpoint.
    InitFrom(PathBuf),
}

/// Trains per `run`, writing `config.json`, `metrics.jsonl`, periodic
/// `step-N` checkpoints and a `final` checkpoint under `run.out_dir`.
/// A non-finite loss saves a `diagnostic` checkpoint before failing.
pub fn cmd_pretrain(run: &RunConfig, start: &Start) -> Result<Option<MetricsRecord>> {
    let mut trainer = match start {
        Start::Fresh => Trainer::new(run.clone())?,
        Start::InitFrom(dir) => Trainer::init_from(run.clone(), dir)?,
        Start::Resume(dir) => {
            let mut t = Trainer::resume(dir)?;
            t.run.total_steps = run.total_steps;
            t.run.out_dir = run.out_dir.clone();
            t
        }
    };
    let out = trainer.run.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_json(&out.join("config.json"), &trainer.run)?;
    let mut log = MetricsLog::create(&out.join("metrics.jsonl"), trainer.metrics_header())?;
    let source = source_for(&trainer.run)?;
    let until = trainer.run.total_steps;
    match trainer.train(source.as_ref(), until, Some(&mut log), Some(&out)) {
        Ok(_) => {}
        Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient { .. })) => {
            trainer.save(&out.join("diagnostic"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    }
    trainer.save(&out.join("final"))?;
    Ok(trainer.last_metrics)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub seed: u64,
    pub checkpoint_step: u64,
    pub examples: usize,
    pub max_length: usize,
    pub loss: f64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub mlm_accuracy: f64,
    pub mlm_count: usize,
    pub nsp_accuracy: f64,
}

/// Loads the checkpoint's stored weights and scores `examples`.
pub fn evaluate_checkpoint(dir: &Path, examples: &[PretrainExample]) -> Result<EvalReport> {
    let ck = load_checkpoint(dir)?;
    let (encoder, _) = Encoder::init(ck.manifest.config.model.clone(), 0)?;
    encoder.check_params(&ck.params)?;
    let r = encoder.evaluate(&ck.params, examples)?;
    Ok(EvalReport {
        seed: ck.manifest.seed,
        checkpoint_step: ck.manifest.step,
        examples: r.examples,
        max_length: examples.iter().map(|e| e.len()).max().unwrap_or(0),
        loss: r.total,
        mlm_loss: r.mlm,
        nsp_loss: r.nsp,
        mlm_accuracy: r.mlm_accuracy(),
        mlm_count: r.mlm_count,
        nsp_accuracy: r.nsp_accuracy(),
        config: ck.manifest.config,
    })
}

pub fn cmd_eval(checkpoint: &Path, examples: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let data = read_examples(examples)?;
    let report = evaluate_checkpoint(checkpoint, &data)?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(report)
}

/// Held-out examples of length `seq_len` for the generated tasks, drawn
/// from streams disjoint from training.
pub fn task_examples(run: &RunConfig, seq_len: usize, count: usize) -> Result<Vec<PretrainExample>> {
    let eval_seed = derive_seed(run.seed, EVAL_STREAM, seq_len as u64);
    match &run.task {
        TrainingTask::OffsetCopy(task) => {
            let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
            (0..count).map(|_| task.generate(seq_len, &mut rng)).collect()
        }
        TrainingTask::SyntheticLanguage {
            language,
            documents,
            sentences_per_document,
        } => {
            let eval_run = RunConfig {
                data: DataConfig {
                    seq_len,
                    ..run.data.clone()
                },
                ..run.clone()
            };
            let (_, mut examples) =
                synthetic_examples(&eval_run, language, *documents, *sentences_per_document, eval_seed)?;
            examples.truncate(count);
            Ok(examples)
        }
        TrainingTask::Examples => Err(Error::Config(
            "runs trained on an example file need an explicit evaluation file".into(),
        )),
    }
}

/// Relative-error threshold for a passing gradient check.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

/// Deterministic framed example of length `n` with a few prediction
/// targets, for gradient checks.
pub fn probe_example(n: usize, vocab_size: usize, seed: u64) -> PretrainExample {
    use crate::data::vocab::{CLS_ID, MASK_ID, NUM_SPECIAL, SEP_ID};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = n / 2;
    let mut tokens: Vec<u32> = (0..n)
        .map(|_| rng.gen_range(NUM_SPECIAL..vocab_size as u32))
        .collect();
    tokens[0] = CLS_ID;
    tokens[split] = SEP_ID;
    tokens[n - 1] = SEP_ID;
    let segments = (0..n).map(|i| u8::from(i > split)).collect();
    let predict_positions: Vec<usize> = [1, split - 1, split + 2]
        .into_iter()
        .filter(|&p| p > 0 && p < n - 1 && p != split)
        .collect();
    let predict_labels = predict_positions.iter().map(|&p| tokens[p]).collect();
    tokens[predict_positions[0]] = MASK_ID;
    PretrainExample {
        tokens,
        segments,
        predict_positions,
        predict_labels,
        nsp_label: rng.gen_range(0..2),
    }
}

/// Full-model check of tape gradients against central differences on one
/// probe example.
pub fn gradcheck_model(config: &EncoderConfig, n: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cfg = config.clone();
    cfg.hidden_dropout = 0.0;
    cfg.attention_dropout = 0.0;
    let (encoder, mut params) = Encoder::init(cfg.clone(), opts.seed)?;
    let example = probe_example(n, cfg.vocab_size, opts.seed);
    let loss = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let (l, _) = encoder.loss_on_tape(&mut tape, p, &example, None)?;
        Ok(tape.scalar(l))
    };
    let grads = |p: &ParamStore| {
        let mut tape = Tape::new();
        let (l, _) = encoder.loss_on_tape(&mut tape, p, &example, None)?;
        Ok(tape.backward(l, 1.0))
    };
    check_gradients(&mut params, loss, grads, opts)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckCase {
    pub scheme: SchemeKind,
    pub passed: bool,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub config: RunConfig,
    pub seed: u64,
    pub threshold: f64,
    pub sequence_length: usize,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

/// Gradient checks of the model in `run` under each scheme. Returns the
/// summary and an invariant error naming the worst blocks on failure.
pub fn cmd_gradcheck(
    run: &RunConfig,
    schemes: &[SchemeKind],
    n: usize,
    out: Option<&Path>,
) -> Result<GradcheckSummary> {
    let opts = GradCheckOptions {
        seed: run.seed,
        ..GradCheckOptions::default()
    };
    let mut cases = Vec::new();
    for &scheme in schemes {
        let cfg = EncoderConfig {
            scheme,
            ..run.model.clone()
        };
        let report = gradcheck_model(&cfg, n, &opts)?;
        cases.push(GradcheckCase {
            scheme,
            passed: report.passed(GRADCHECK_THRESHOLD),
            report,
        });
    }
    let summary = GradcheckSummary {
        config: run.clone(),
        seed: run.seed,
        threshold: GRADCHECK_THRESHOLD,
        sequence_length: n,
        cases,
    };
    if let Some(p) = out {
        write_json(p, &summary)?;
    }
    if !summary.passed() {
        let worst: Vec<String> = summary
            .cases
            .iter()
            .filter(|c| !c.passed)
            .flat_map(|c| {
                c.report
                    .worst(3)
                    .into_iter()
                    .map(move |p| format!("{}:{} ({:.3e})", c.scheme, p.name, p.max_rel_error))
            })
            .collect();
        return Err(Error::Invariant(format!("gradient check failed: {}", worst.join(", "))));
    }
    Ok(summary)
}
