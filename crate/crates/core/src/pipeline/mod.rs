//! Dataset ingestion, training and evaluation runs, analysis reports,
//! synthetic data and checkpoints.

mod analysis;
mod checkpoint;
mod dataset;
mod run;
mod synth;

pub use analysis::{analysis_records, analyze, AnalysisRecord, AnalysisReport, Histogram, HISTOGRAM_BINS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointConfig, CHECKPOINT_VERSION};
pub use dataset::{split_indices, vqa_accuracy, AnswerCount, Dataset, EnsembleRef, QAInstance, Split};
pub use run::{
    answer_vocabulary, evaluate, evaluate_prepared, instance_signals, prepare_all, prepare_instance, train,
    EvalSettings, EvaluationResult, InstanceResult, PreparedInstance, Resources, Signals, Skipped, TrainOutcome,
    TrainSettings, DEFAULT_STOPWORDS,
};
pub use synth::{generate_synthetic, planted_correlation, Latent, SynthConfig, SyntheticData, ANSWER_RELATION};
