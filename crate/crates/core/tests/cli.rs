use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relformer::data::{corpus_text, LanguageConfig, SyntheticLanguage};
use relformer::encoder::EncoderConfig;
use relformer::harness::{read_metrics, RunConfig, TrainingTask};
use relformer::optim::LrSchedule;
use relformer::posenc::SchemeKind;

fn relformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, run: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(run).unwrap()).unwrap();
    path
}

fn tiny_model(vocab_size: usize, scheme: SchemeKind) -> EncoderConfig {
    EncoderConfig {
        hidden_size: 16,
        num_layers: 1,
        num_heads: 2,
        intermediate_size: 32,
        max_position: 32,
        ..EncoderConfig::desk(vocab_size, scheme)
    }
}

fn offset_run(scheme: SchemeKind, out: &Path) -> RunConfig {
    RunConfig {
        model: tiny_model(32, scheme),
        task: TrainingTask::OffsetCopy(Default::default()),
        data: relformer::harness::DataConfig {
            seq_len: 16,
            ..Default::default()
        },
        schedule: LrSchedule::linear(1e-2, 2, 20),
        batch_size: 2,
        total_steps: 6,
        checkpoint_every: 3,
        out_dir: out.to_path_buf(),
        ..RunConfig::desk()
    }
}

/// A small corpus and lexicon from a generated language.
fn write_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let lang = SyntheticLanguage::generate(
        LanguageConfig {
            num_symbols: 30,
            num_words: 40,
            ..LanguageConfig::default()
        },
        1,
    )
    .unwrap();
    let corpus = dir.join("corpus.txt");
    fs::write(&corpus, corpus_text(&lang.corpus(6, 8, 2))).unwrap();
    let lexicon = dir.join("lexicon.txt");
    let words: Vec<String> = lang.words().iter().map(|w| w.iter().collect()).collect();
    fs::write(&lexicon, words.join("\n") + "\n").unwrap();
    (corpus, lexicon)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&relformer(&["--help"])), 0);
    assert_eq!(code(&relformer(&["pretrain", "--help"])), 0);
    assert_eq!(code(&relformer(&["--version"])), 0);
    assert_eq!(code(&relformer(&["no-such-command"])), 1);
    assert_eq!(code(&relformer(&["pretrain", "--scheme", "rope"])), 1);
    assert_eq!(code(&relformer(&["pretrain", "--preset", "huge"])), 1);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut value = serde_json::to_value(RunConfig::desk()).unwrap();
    value["learning_rate"] = 1.0.into();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, value.to_string()).unwrap();
    let out = relformer(&["pretrain", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let missing = tmp.path().join("nope.txt");
    let out = relformer(&["build-vocab", "--corpus", missing.to_str().unwrap(), "--out", "v.txt"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.txt"));
}

#[test]
fn prepare_data_is_deterministic_and_records_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, lexicon) = write_corpus(tmp.path());
    let mut outputs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let out = tmp.path().join(name);
        let res = relformer(&[
            "prepare-data",
            "--corpus",
            corpus.to_str().unwrap(),
            "--lexicon",
            lexicon.to_str().unwrap(),
            "--strategy",
            "wwm",
            "--sl-train",
            "48",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(!outputs[0].is_empty());
    let stats: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("a.jsonl.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["seed"], 5);
    assert_eq!(stats["config"]["strategy"], "wwm");
    assert_eq!(stats["config"]["data"]["seq_len"], 48);
    assert!(tmp.path().join("vocab.txt").exists() || stats["config"]["data"]["vocab"].is_string());
}

#[test]
fn pretrain_eval_and_resume_through_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "run.json", &offset_run(SchemeKind::Frpe, &out));
    let res = relformer(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    for f in ["config.json", "metrics.jsonl", "step-3/manifest.json", "final/params.bin", "final/optstate.bin"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let (header, records) = read_metrics(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(header.config.total_steps, 6);
    assert_eq!(records.len(), 6);

    // eval at twice the training length under FRPE
    let report = tmp.path().join("eval.json");
    let res = relformer(&[
        "eval",
        "--checkpoint",
        out.join("final").to_str().unwrap(),
        "--sl-eval",
        "32",
        "--count",
        "5",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["max_length"], 32);
    assert_eq!(r["config"]["model"]["scheme"], "frpe");

    // empty example file
    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let res = relformer(&["eval", "--checkpoint", out.join("final").to_str().unwrap(), "--examples", empty.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let r: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(r["examples"], 0);

    // resume continues the log from the checkpoint step
    let resumed = tmp.path().join("resumed");
    let res = relformer(&[
        "pretrain",
        "--resume",
        out.join("step-3").to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let (header, tail) = read_metrics(&resumed.join("metrics.jsonl")).unwrap();
    assert_eq!(header.start_step, 3);
    let strip = |r: &[relformer::harness::MetricsRecord]| r.iter().map(|x| x.without_time()).collect::<Vec<_>>();
    assert_eq!(strip(&tail), strip(&records[3..]));
}

#[test]
fn zero_steps_checkpoints_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "run.json", &offset_run(SchemeKind::Prpe, &out));
    let res = relformer(&["pretrain", "--config", cfg.to_str().unwrap(), "--steps", "0"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("final/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["step"], 0);
    assert_eq!(manifest["optimizer_step"], 0);
}

#[test]
fn pape_eval_beyond_the_table_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut run = offset_run(SchemeKind::Pape, &out);
    run.model.max_position = 16;
    run.total_steps = 2;
    let cfg = write_config(tmp.path(), "run.json", &run);
    assert_eq!(code(&relformer(&["pretrain", "--config", cfg.to_str().unwrap()])), 0);
    let res = relformer(&["eval", "--checkpoint", out.join("final").to_str().unwrap(), "--sl-eval", "32"]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("out of range"), "{}", stderr(&res));
}

#[test]
fn non_finite_loss_exits_with_two_and_leaves_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut run = offset_run(SchemeKind::Frpe, &out);
    run.schedule = LrSchedule::linear(1e300, 1, 20);
    run.total_steps = 10;
    let cfg = write_config(tmp.path(), "run.json", &run);
    let res = relformer(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
    assert!(out.join("diagnostic/manifest.json").exists());
}

#[test]
fn gradcheck_and_ablate_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let run = RunConfig {
        model: tiny_model(24, SchemeKind::Frpe),
        ..RunConfig::desk()
    };
    let cfg = write_config(tmp.path(), "run.json", &run);
    let report = tmp.path().join("grad.json");
    let res = relformer(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--scheme",
        "prpe",
        "--length",
        "6",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["cases"][0]["scheme"], "prpe");
    let names: Vec<String> = r["cases"][0]["report"]["params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap().to_string())
        .collect();
    assert!(names.iter().any(|n| n.contains("rel.key")));

    let grid = serde_json::json!({
        "schemes": ["pape"],
        "strategies": ["char"],
        "sl_train": 8,
        "sl_eval": 16,
        "steps": 3,
        "eval_examples": 4,
        "model": tiny_model(24, SchemeKind::Pape),
    });
    let grid_path = tmp.path().join("grid.json");
    fs::write(&grid_path, grid.to_string()).unwrap();
    let out = tmp.path().join("ablation");
    let res = relformer(&["ablate", "--config", grid_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let tsv = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].contains("fail/out-of-range"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 0);
}
