use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use relformer::data::{read_examples, MaskStrategy};
use relformer::harness::{
    cmd_ablate, cmd_build_vocab, cmd_eval, cmd_gradcheck, cmd_prepare_data, cmd_pretrain, evaluate_checkpoint,
    load_manifest, task_examples, AblationGrid, RunConfig, Start,
};
use relformer::posenc::SchemeKind;
use relformer::{Error, Result};

#[derive(Parser)]
#[command(name = "relformer", version, about = "Desk-scale encoder pretraining with relative positional encodings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named configuration preset (desk, base, large) used without --config.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scheme: Option<SchemeKind>,
    #[arg(long)]
    strategy: Option<MaskStrategy>,
    /// Training sequence length.
    #[arg(long = "sl-train")]
    sl_train: Option<usize>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            run.seed = s;
        }
        if let Some(s) = self.scheme {
            run.model.scheme = s;
        }
        if let Some(s) = self.strategy {
            run.strategy = s;
        }
        if let Some(n) = self.sl_train {
            run.data.seq_len = n;
        }
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Corpus files to a JSON-lines example file plus a stats sidecar.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// Corpus files (overrides data.corpus).
        #[arg(long)]
        corpus: Vec<PathBuf>,
        /// Lexicon file for whole-word masking (overrides data.lexicon).
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Character vocabulary from corpus files.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per the configuration; writes metrics and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Total steps (overrides total_steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue a checkpointed run with its optimizer state.
        #[arg(long, conflicts_with = "init_from")]
        resume: Option<PathBuf>,
        /// Start from another checkpoint's weights with a fresh optimizer.
        #[arg(long = "init-from")]
        init_from: Option<PathBuf>,
    },
    /// Score a checkpoint on an example file or on held-out task data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Example file; without it, held-out examples of the checkpoint's
        /// generated task are used.
        #[arg(long)]
        examples: Option<PathBuf>,
        /// Length of generated evaluation examples.
        #[arg(long = "sl-eval")]
        sl_eval: Option<usize>,
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encoding scheme × masking × length grid; writes TSV and JSON.
    Ablate {
        /// JSON grid configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to one scheme.
        #[arg(long)]
        scheme: Option<SchemeKind>,
        /// Restrict to one masking strategy.
        #[arg(long)]
        strategy: Option<MaskStrategy>,
        #[arg(long = "sl-train")]
        sl_train: Option<usize>,
        #[arg(long = "sl-eval")]
        sl_eval: Option<usize>,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Gradient check of the full model against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Sequence length of the probe example.
        #[arg(long, default_value_t = 12)]
        length: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to stdout; a closed pipe on the reading side is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_report(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData {
            common,
            corpus,
            lexicon,
            out,
        } => {
            let mut run = common.run_config()?;
            if !corpus.is_empty() {
                run.data.corpus = corpus;
            }
            if lexicon.is_some() {
                run.data.lexicon = lexicon;
            }
            let report = cmd_prepare_data(&run, &out)?;
            print_json(&serde_json::json!({
                "examples": report.stats.examples,
                "mask_rate": report.mask_rate,
                "random_replace_rate": report.random_replace_rate,
                "keep_rate": report.keep_rate,
                "nsp_positive_fraction": report.nsp_positive_fraction,
                "sha256": report.examples_sha256,
            }))
        }
        Command::BuildVocab { common, corpus, out } => {
            let mut run = common.run_config()?;
            if !corpus.is_empty() {
                run.data.corpus = corpus;
            }
            let vocab = cmd_build_vocab(&run, &out)?;
            print_json(&serde_json::json!({ "size": vocab.len(), "path": out }))
        }
        Command::Pretrain {
            common,
            out,
            steps,
            resume,
            init_from,
        } => {
            let mut run = match &resume {
                Some(dir) if common.config.is_none() => load_manifest(dir)?.config,
                _ => common.run_config()?,
            };
            if let Some(d) = out {
                run.out_dir = d;
            }
            if let Some(s) = steps {
                run.total_steps = s;
            }
            let start = match (resume, init_from) {
                (Some(d), _) => Start::Resume(d),
                (None, Some(d)) => Start::InitFrom(d),
                (None, None) => Start::Fresh,
            };
            let last = cmd_pretrain(&run, &start)?;
            print_json(&serde_json::json!({ "out_dir": run.out_dir, "last": last }))
        }
        Command::Eval {
            checkpoint,
            examples,
            sl_eval,
            count,
            out,
        } => {
            let report = match examples {
                Some(path) if sl_eval.is_none() => cmd_eval(&checkpoint, &path, out.as_deref())?,
                Some(_) => return Err(Error::Config("--sl-eval applies to generated examples only".into())),
                None => {
                    let run = load_manifest(&checkpoint)?.config;
                    let n = sl_eval.unwrap_or(run.data.seq_len);
                    let data = match &run.data.eval_examples {
                        Some(p) if sl_eval.is_none() => read_examples(p)?,
                        _ => task_examples(&run, n, count)?,
                    };
                    let report = evaluate_checkpoint(&checkpoint, &data)?;
                    if let Some(p) = &out {
                        write_report(p, &report)?;
                    }
                    report
                }
            };
            print_json(&serde_json::json!({
                "examples": report.examples,
                "max_length": report.max_length,
                "loss": report.loss,
                "mlm_loss": report.mlm_loss,
                "mlm_accuracy": report.mlm_accuracy,
                "nsp_accuracy": report.nsp_accuracy,
            }))
        }
        Command::Ablate {
            config,
            seed,
            scheme,
            strategy,
            sl_train,
            sl_eval,
            out,
        } => {
            let mut grid = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    serde_json::from_str::<AblationGrid>(&text).map_err(|e| Error::Parse {
                        path: p,
                        line: e.line(),
                        message: e.to_string(),
                    })?
                }
                None => AblationGrid::default(),
            };
            if let Some(s) = seed {
                grid.seed = s;
            }
            if let Some(s) = scheme {
                grid.schemes = vec![s];
            }
            if let Some(s) = strategy {
                grid.strategies = vec![s];
            }
            if let Some(n) = sl_train {
                grid.sl_train = n;
            }
            if let Some(n) = sl_eval {
                grid.sl_eval = n;
            }
            let table = cmd_ablate(&grid, Some(&out))?;
            emit(&table.to_tsv())?;
            Ok(())
        }
        Command::Gradcheck { common, length, out } => {
            let run = common.run_config()?;
            let schemes = match common.scheme {
                Some(s) => vec![s],
                None => SchemeKind::ALL.to_vec(),
            };
            let summary = cmd_gradcheck(&run, &schemes, length, out.as_deref())?;
            let lines: String = summary
                .cases
                .iter()
                .map(|case| {
                    format!(
                        "{}\t{}\tmax_rel_error={:.3e}\n",
                        case.scheme,
                        if case.passed { "pass" } else { "FAIL" },
                        case.report.max_rel_error
                    )
                })
                .collect();
            emit(&lines)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
