//! Orchestration: run configuration, training loop, checkpoints, metrics,
//! and the commands behind the CLI.

mod ablate;
mod checkpoint;
mod commands;
mod config;
mod metrics;
mod trainer;

pub use ablate::{cmd_ablate, offset_copy_scores, AblationCell, AblationGrid, AblationTable, CellScore, MlmProbe};
pub use checkpoint::{load_checkpoint, load_manifest, save_checkpoint, Checkpoint, Manifest, TensorEntry, FORMAT_VERSION};
pub use commands::{
    cmd_build_vocab, cmd_eval, cmd_gradcheck, cmd_prepare_data, cmd_pretrain, evaluate_checkpoint, gradcheck_model,
    probe_example, sha256_file, sidecar, task_examples, EvalReport, GradcheckCase, GradcheckSummary, PrepareReport, Start,
    GRADCHECK_THRESHOLD,
};
pub use config::{DataConfig, RunConfig, TrainingTask};
pub use metrics::{read_metrics, MetricsHeader, MetricsLog, MetricsRecord};
pub use trainer::{source_for, synthetic_examples, BatchSource, ExamplePool, OffsetCopySource, Trainer};
