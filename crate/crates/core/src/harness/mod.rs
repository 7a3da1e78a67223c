//! Experiment configuration, dataset files, training with dev-set
//! selection, evaluation reports and cross-experiment comparison.

mod compare;
mod config;
mod data;
mod experiment;

pub use compare::{cmd_compare, compare_reports, CompareRow, Comparison, Delta};
pub use config::{
    Cell, Decoding, ExperimentConfig, Overrides, RelationSource, SelectionConfig, DEFAULT_OUTPUT_ROOT,
};
pub use data::{data_hash, gen_data, load_dataset, split_file, DataManifest, Dataset, SplitCounts, MANIFEST_FILE};
pub use experiment::{
    checkpoint_paths, cmd_eval, cmd_infer, cmd_train, eval_records, evaluate_models, infer, load_models, load_report,
    save_seed_run, train_seed, ExperimentReport, InferenceRecord, LogLine, MeanStd, Models, ScoreSummary, SeedRun,
    Selection, TrainSummary, CLASSIFIER_FILE, GENERATOR_FILE, MODEL_FILE, REPORT_FILE, REPORT_TEXT_FILE,
    SELECTION_FILE, TRAIN_LOG_FILE, TRAIN_SUMMARY_FILE,
};

/// Generates the dataset of `cfg` into its data directory.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> crate::Result<DataManifest> {
    cfg.validate()?;
    gen_data(&cfg.data, &cfg.data_dir(), force)
}
