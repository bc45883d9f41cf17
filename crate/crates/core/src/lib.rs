//! Confidence-based ensembling of language models from layer-wise features.
//!
//! Each model in an ensemble exposes, for every input, the distribution over
//! answer choices read out at every layer through the logit lens. A small
//! linear predictor per model learns from those features whether the model's
//! answer is right, and the ensemble answers with the most confident model.
//!
//! - [`features`]: the record format, JSON-lines files and seeded splits.
//! - [`toy_lm`]: a deterministic toy transformer and the lens readout.
//! - [`confidence`]: the linear predictor, its loss and Adam training.
//! - [`ensemble`]: max-confidence, majority-vote and probability-max rules.
//! - [`harness`]: synthetic data, experiments and report tables.

pub mod confidence;
pub mod ensemble;
pub mod features;
pub mod harness;
pub mod rng;
pub mod toy_lm;

pub use confidence::{ConfidencePredictor, TrainConfig};
pub use ensemble::{EnsembleDecision, ModelVote, Strategy};
pub use features::{FeatureRecord, FeatureSet, SplitSpec};
pub use toy_lm::{ChoiceSpec, ToyLm, ToyLmConfig};
