//! Toy dataset, downstream classifier, evaluation, configuration, and
//! experiment orchestration.

pub mod classifier;
pub mod clip;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod toydata;

pub use classifier::{
    train_classifier, AugmentConfig, ClassifierConfig, SequenceClassifier, TrainingParadigm,
};
pub use clip::{SequenceClip, Source};
pub use config::{Config, MotionExtractConfig, SynthesisConfig};
pub use eval::{auroc_binary, evaluate, evaluate_scores, ClassMetrics, EvalReport};
pub use experiment::{run_experiment, ExperimentPaths, ExperimentSummary};
pub use toydata::{make_toy_dataset, ToyDataset, ToyDatasetSpec, VOCAB};
