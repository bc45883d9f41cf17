//! Experiment driver: synthetic data, toy-model feature extraction, predictor
//! training, strategy comparison and table rendering.

mod config;
mod experiment;
mod pipeline;
mod report;
mod synth;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::confidence::ConfidenceError;
use crate::ensemble::EnsembleError;
use crate::features::FeatureError;
use crate::toy_lm::ToyLmError;

pub use config::{load_experiment_config, DatasetSource, ExperimentConfig, ReportFormat};
pub use experiment::{
    evaluate_dataset, evaluate_with_predictors, run_experiment, score_test_set, train_predictors,
    TrainedPredictor,
};
pub use pipeline::{toy_pipeline, write_lens_dump, LensDumpLine, TokenTask};
pub use report::{
    render_table, tenths_from_counts, DatasetDetails, EnsembleReport, ExampleDecisions, Marker,
    ModelScore, PredictorSummary, ReportCell, ReportColumn, ReportMetadata,
};
pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    ToyLm(#[from] ToyLmError),
    #[error("training predictor for {model_id} on {dataset_id}")]
    Training {
        model_id: String,
        dataset_id: String,
        #[source]
        source: ConfidenceError,
    },
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config {}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("dataset {dataset_id} is incomplete: {count} examples lack a record from some model (first: {first})")]
    Incomplete {
        dataset_id: String,
        count: usize,
        first: String,
    },
    #[error("expected one dataset per feature set, found {0:?}")]
    MixedDatasets(Vec<String>),
    #[error("no predictor for model {0}")]
    MissingPredictor(String),
    #[error("example {0} appears in more than one partition")]
    PartitionLeak(String),
}
