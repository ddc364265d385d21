//! Training orchestration, evaluation, checkpoints, artifact dumps and the
//! full-pipeline gradient check.

mod checkpoint;
mod config;
mod dump;
mod experiment;
mod gradcheck;
mod trainer;

pub use checkpoint::{checkpoint_dir, load_checkpoint, load_manifest, save_checkpoint, Manifest, MANIFEST};
pub use config::{TrainConfig, SEED_ENV};
pub use dump::{
    attention_and_embeddings, dump_attention, dump_embeddings, dump_metrics, dump_predictions, node_names,
    AttentionEntry, DumpKind, ATTENTION_DIR, ATTENTION_MANIFEST, EMBEDDINGS_FILE, METRICS_FILE, PREDICTIONS_FILE,
};
pub use experiment::{
    ablation_study, baseline_name, split_from_config, train_and_evaluate, AblationRow, AblationTable,
};
pub use gradcheck::{pipeline_gradcheck, GradcheckConfig, GradcheckOutcome};
pub use trainer::{
    evaluate, predict, recalibrate_batch_norm, run_epoch, run_training, train_step, EpochMetrics, EvalReport, Prediction, SplitData,
    StepLosses, TrainState,
};
