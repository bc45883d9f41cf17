//! Per-model linear confidence predictors.
//!
//! A predictor maps a model's flattened layer-wise choice probabilities `f`
//! to `c = σ(w · f)`, the estimated probability that the model's own answer is
//! correct. It is fit with summed binary cross-entropy against the indicator
//! `prediction == gold`, using mini-batch Adam from zero weights, and the
//! weights of the epoch with the lowest validation loss are kept.
//!
//! There is no bias term unless [`TrainConfig::use_bias`] is set. Each layer's
//! block of `f` sums to one, so adding `b` to every weight of one block already
//! acts as a bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureRecord;
use crate::rng;

/// BCE clamps confidences into `[BCE_CLAMP, 1 − BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("feature vector has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("confidence {0} is not a probability")]
    InvalidConfidence(f64),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot read or write predictor file")]
    Io(#[from] std::io::Error),
    #[error("malformed predictor file")]
    Json(#[from] serde_json::Error),
}

/// A feature vector with its correctness label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: bool,
}

impl Sample {
    pub fn from_record(r: &FeatureRecord) -> Self {
        Self {
            features: r.feature_vector(),
            label: correctness_label(r) == 1,
        }
    }
}

/// 1 iff the model's prediction matches the gold label.
pub fn correctness_label(r: &FeatureRecord) -> u8 {
    u8::from(r.prediction == r.gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePredictor {
    pub model_id: String,
    pub dataset_id: String,
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "K")]
    pub num_choices: usize,
    pub uses_bias: bool,
    /// `L·K` weights in feature order, then the bias when `uses_bias`.
    pub weights: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl ConfidencePredictor {
    /// An untrained predictor with all-zero weights (`best_epoch` 0).
    pub fn zeros(
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
        num_layers: usize,
        num_choices: usize,
        uses_bias: bool,
    ) -> Self {
        let dim = num_layers * num_choices + usize::from(uses_bias);
        Self {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            num_layers,
            num_choices,
            uses_bias,
            weights: vec![0.0; dim],
            best_epoch: 0,
            best_val_loss: 0.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.num_layers * self.num_choices
    }

    /// Checks the weight count and that every weight is finite.
    pub fn check(&self) -> Result<(), ConfidenceError> {
        let expected = self.feature_dim() + usize::from(self.uses_bias);
        if self.weights.len() != expected {
            return Err(ConfidenceError::DimensionMismatch {
                expected,
                found: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ConfidenceError::InvalidConfig("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfidenceError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfidenceError> {
        let p: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        p.check()?;
        Ok(p)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn linear_logit(weights: &[f64], features: &[f64]) -> Result<f64, ConfidenceError> {
    let (w, bias) = match weights.len().checked_sub(features.len()) {
        Some(0) => (weights, 0.0),
        Some(1) => (&weights[..features.len()], weights[features.len()]),
        _ => {
            return Err(ConfidenceError::DimensionMismatch {
                expected: weights.len(),
                found: features.len(),
            })
        }
    };
    Ok(w.iter().zip(features).map(|(a, b)| a * b).sum::<f64>() + bias)
}

/// `σ(w · f [+ b])`, kept strictly inside `(0, 1)` even when the logit saturates.
pub fn predict_confidence(
    p: &ConfidencePredictor,
    features: &[f64],
) -> Result<f64, ConfidenceError> {
    if features.len() != p.feature_dim() {
        return Err(ConfidenceError::DimensionMismatch {
            expected: p.feature_dim(),
            found: features.len(),
        });
    }
    let z = linear_logit(&p.weights, features)?;
    Ok(sigmoid(z).clamp(f64::MIN_POSITIVE, BELOW_ONE))
}

/// `−[y ln c + (1 − y) ln(1 − c)]` with `c` clamped away from 0 and 1.
pub fn bce_loss(confidence: f64, label: bool) -> Result<f64, ConfidenceError> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(ConfidenceError::InvalidConfidence(confidence));
    }
    let c = confidence.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    Ok(if label { -c.ln() } else { -(1.0 - c).ln() })
}

/// Summed BCE of raw `weights` over `batch`.
pub fn batch_loss(weights: &[f64], batch: &[Sample]) -> Result<f64, ConfidenceError> {
    batch.iter().try_fold(0.0, |acc, s| {
        let c = sigmoid(linear_logit(weights, &s.features)?);
        Ok(acc + bce_loss(c, s.label)?)
    })
}

fn gradient(weights: &[f64], batch: &[Sample]) -> Result<Vec<f64>, ConfidenceError> {
    if batch.is_empty() {
        return Err(ConfidenceError::EmptyBatch);
    }
    let mut grad = vec![0.0; weights.len()];
    for s in batch {
        let residual = sigmoid(linear_logit(weights, &s.features)?) - f64::from(u8::from(s.label));
        for (g, x) in grad.iter_mut().zip(&s.features) {
            *g += residual * x;
        }
        if weights.len() > s.features.len() {
            grad[s.features.len()] += residual;
        }
    }
    Ok(grad)
}

/// Gradient of the summed BCE: `Σ (c − y) f`, plus `Σ (c − y)` in the bias slot.
pub fn grad_bce(p: &ConfidencePredictor, batch: &[Sample]) -> Result<Vec<f64>, ConfidenceError> {
    if let Some(s) = batch.iter().find(|s| s.features.len() != p.feature_dim()) {
        return Err(ConfidenceError::DimensionMismatch {
            expected: p.feature_dim(),
            found: s.features.len(),
        });
    }
    gradient(&p.weights, batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub shuffle_seed: u64,
    pub use_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            shuffle_seed: 0,
            use_bias: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfidenceError> {
        let bad = |msg: String| Err(ConfidenceError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} is not in [0, 1)"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Adam moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Pure: returns the new weights and state.
pub fn adam_step(
    weights: &[f64],
    state: &AdamState,
    grad: &[f64],
    cfg: &TrainConfig,
) -> (Vec<f64>, AdamState) {
    assert_eq!(weights.len(), grad.len(), "gradient dimension");
    assert_eq!(
        weights.len(),
        state.first_moment.len(),
        "optimizer state dimension"
    );
    let step = state.step + 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let correction1 = 1.0 - b1.powf(step as f64);
    let correction2 = 1.0 - b2.powf(step as f64);
    let mut next = AdamState {
        first_moment: Vec::with_capacity(weights.len()),
        second_moment: Vec::with_capacity(weights.len()),
        step,
    };
    let mut updated = Vec::with_capacity(weights.len());
    for i in 0..weights.len() {
        let m = b1 * state.first_moment[i] + (1.0 - b1) * grad[i];
        let v = b2 * state.second_moment[i] + (1.0 - b2) * grad[i] * grad[i];
        let m_hat = m / correction1;
        let v_hat = v / correction2;
        updated.push(weights[i] - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon));
        next.first_moment.push(m);
        next.second_moment.push(v);
    }
    (updated, next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean BCE over the whole training set after the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Which predictor is being trained and its feature shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorId {
    pub model_id: String,
    pub dataset_id: String,
    pub num_layers: usize,
    pub num_choices: usize,
}

/// Mean BCE of `weights` over `samples`.
pub fn mean_loss(weights: &[f64], samples: &[Sample]) -> Result<f64, ConfidenceError> {
    Ok(batch_loss(weights, samples)? / samples.len() as f64)
}

/// Fraction of samples whose thresholded confidence (`c ≥ 0.5`) matches the label.
pub fn accuracy_at_half(
    p: &ConfidencePredictor,
    samples: &[Sample],
) -> Result<f64, ConfidenceError> {
    let mut hits = 0usize;
    for s in samples {
        if (predict_confidence(p, &s.features)? >= 0.5) == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Fits a predictor with mini-batch Adam and keeps the best-validation epoch.
///
/// Each epoch reshuffles the training indices (one seeded stream for the whole
/// run), steps on the summed gradient of each batch of `batch_size` (the last
/// batch may be short), then evaluates the mean validation loss. Ties in
/// validation loss keep the earliest epoch.
pub fn train_predictor(
    id: &PredictorId,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ConfidencePredictor, TrainLog), ConfidenceError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ConfidenceError::EmptyTrainingSet);
    }
    if val.is_empty() {
        return Err(ConfidenceError::EmptyValidationSet);
    }
    let mut predictor = ConfidencePredictor::zeros(
        id.model_id.clone(),
        id.dataset_id.clone(),
        id.num_layers,
        id.num_choices,
        cfg.use_bias,
    );
    let dim = predictor.feature_dim();
    if let Some(s) = train.iter().chain(val).find(|s| s.features.len() != dim) {
        return Err(ConfidenceError::DimensionMismatch {
            expected: dim,
            found: s.features.len(),
        });
    }

    let mut rng = rng::seeded(cfg.shuffle_seed);
    let mut weights = predictor.weights.clone();
    let mut state = AdamState::new(weights.len());
    let mut order: Vec<usize> = Vec::with_capacity(train.len());
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        order.clear();
        order.extend(0..train.len());
        rng::shuffle(&mut rng, &mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            // Dimensions were checked up front; any error here is a NaN confidence.
            let loss = batch_loss(&weights, &batch).unwrap_or(f64::NAN);
            let grad = gradient(&weights, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ConfidenceError::NonFiniteLoss { epoch, batch: b });
            }
            (weights, state) = adam_step(&weights, &state, &grad, cfg);
        }

        let train_loss = mean_loss(&weights, train).unwrap_or(f64::NAN);
        let val_loss = mean_loss(&weights, val).unwrap_or(f64::NAN);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(ConfidenceError::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        predictor.weights.clone_from(&weights);
        let val_accuracy = accuracy_at_half(&predictor, val)?;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            best = Some((epoch, val_loss, weights.clone()));
        }
    }

    let (best_epoch, best_val_loss, best_weights) = best.expect("at least one epoch");
    predictor.weights = best_weights;
    predictor.best_epoch = best_epoch;
    predictor.best_val_loss = best_val_loss;
    Ok((
        predictor,
        TrainLog {
            epochs,
            best_epoch,
            best_val_loss,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn predictor(weights: Vec<f64>) -> ConfidencePredictor {
        let dim = weights.len();
        let mut p = ConfidencePredictor::zeros("m", "d", dim / 2, 2, false);
        p.weights = weights;
        p
    }

    #[test]
    fn zero_weights_give_one_half() {
        let p = predictor(vec![0.0; 4]);
        assert_eq!(predict_confidence(&p, &[0.1, 0.9, 0.4, 0.6]).unwrap(), 0.5);
    }

    #[test]
    fn single_aligned_weight() {
        let p = predictor(vec![10.0, 0.0, 0.0, 0.0]);
        let c = predict_confidence(&p, &[1.0, 0.0, 0.3, 0.7]).unwrap();
        // 1 / (1 + e^-10)
        assert_abs_diff_eq!(c, 0.999_954_602_131_297_6, epsilon = 1e-15);
    }

    #[test]
    fn negated_weights_are_complementary() {
        let w = vec![0.3, -1.2, 2.5, 0.1];
        let f = [0.2, 0.8, 0.6, 0.4];
        let c = predict_confidence(&predictor(w.clone()), &f).unwrap();
        let neg = predict_confidence(&predictor(w.iter().map(|x| -x).collect()), &f).unwrap();
        assert_abs_diff_eq!(c + neg, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn saturated_logits_stay_inside_unit_interval() {
        let f = [1.0, 0.0];
        let hi = predict_confidence(&predictor(vec![1e4, 0.0]), &f).unwrap();
        let lo = predict_confidence(&predictor(vec![-1e4, 0.0]), &f).unwrap();
        assert!(hi < 1.0 && hi > 0.5);
        assert!(lo > 0.0 && lo < 0.5);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = predictor(vec![0.0; 4]);
        assert!(matches!(
            predict_confidence(&p, &[0.5, 0.5]),
            Err(ConfidenceError::DimensionMismatch {
                expected: 4,
                found: 2
            })
        ));
    }

    #[test]
    fn bce_values() {
        assert_abs_diff_eq!(
            bce_loss(0.5, true).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            bce_loss(0.5, false).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        // -ln 0.9
        assert_abs_diff_eq!(
            bce_loss(0.9, true).unwrap(),
            0.105_360_515_657_826_3,
            epsilon = 1e-15
        );
        assert!(bce_loss(1.0, true).unwrap() < 1e-11);
        assert!(bce_loss(0.0, false).unwrap() < 1e-11);
        assert!(bce_loss(0.0, true).unwrap().is_finite());
        assert!(matches!(
            bce_loss(1.5, true),
            Err(ConfidenceError::InvalidConfidence(_))
        ));
        assert!(bce_loss(f64::NAN, true).is_err());
    }

    #[test]
    fn gradient_at_zero_weights() {
        let p = predictor(vec![0.0; 4]);
        let f = vec![0.25, 0.75, 0.5, 0.5];
        let g = grad_bce(
            &p,
            &[Sample {
                features: f.clone(),
                label: true,
            }],
        )
        .unwrap();
        let expected: Vec<f64> = f.iter().map(|x| -0.5 * x).collect();
        assert_eq!(g, expected);
        // c = 0.5 can never equal a 0/1 label, but the bias slot sees the residual too
        let mut pb = ConfidencePredictor::zeros("m", "d", 2, 2, true);
        pb.weights = vec![0.0; 5];
        let g = grad_bce(
            &pb,
            &[Sample {
                features: f,
                label: false,
            }],
        )
        .unwrap();
        assert_eq!(g[4], 0.5);
        assert!(matches!(
            grad_bce(&p, &[]),
            Err(ConfidenceError::EmptyBatch)
        ));
    }

    #[test]
    fn first_adam_step_from_zero() {
        let cfg = TrainConfig::default();
        let (w, state) = adam_step(&[0.0], &AdamState::new(1), &[1.0], &cfg);
        // m̂ = 1, v̂ = 1: update = lr / (1 + eps)
        assert_abs_diff_eq!(w[0], -1e-3 / (1.0 + 1e-8), epsilon = 1e-18);
        assert_abs_diff_eq!(w[0], -0.000_999_999_99, epsilon = 1e-14);
        assert_eq!(state.step, 1);
        let (w0, s0) = adam_step(&[0.3, -0.2], &AdamState::new(2), &[0.0, 0.0], &cfg);
        assert_eq!(w0, vec![0.3, -0.2]);
        assert_eq!(s0.step, 1);
        assert_eq!(
            adam_step(&[0.3], &state, &[0.7], &cfg),
            adam_step(&[0.3], &state, &[0.7], &cfg)
        );
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                epochs: 0,
                ..ok.clone()
            },
            TrainConfig {
                adam_beta2: 1.0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let id = PredictorId {
            model_id: "m".into(),
            dataset_id: "d".into(),
            num_layers: 1,
            num_choices: 2,
        };
        let s = vec![Sample {
            features: vec![0.5, 0.5],
            label: true,
        }];
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_predictor(&id, &[], &s, &cfg),
            Err(ConfidenceError::EmptyTrainingSet)
        ));
        assert!(matches!(
            train_predictor(&id, &s, &[], &cfg),
            Err(ConfidenceError::EmptyValidationSet)
        ));
        let wrong = vec![Sample {
            features: vec![1.0],
            label: true,
        }];
        assert!(matches!(
            train_predictor(&id, &wrong, &s, &cfg),
            Err(ConfidenceError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn nan_features_surface_as_non_finite_loss() {
        let id = PredictorId {
            model_id: "m".into(),
            dataset_id: "d".into(),
            num_layers: 1,
            num_choices: 2,
        };
        let train = vec![Sample {
            features: vec![f64::NAN, 0.5],
            label: true,
        }];
        let val = vec![Sample {
            features: vec![0.5, 0.5],
            label: true,
        }];
        let err = train_predictor(&id, &train, &val, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("epoch 1"), "{err}");
    }

    #[test]
    fn predictor_json_uses_short_dimension_keys() {
        let p = predictor(vec![0.5, -0.25]);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["L"], 1);
        assert_eq!(v["K"], 2);
        let back: ConfidencePredictor = serde_json::from_value(v).unwrap();
        assert_eq!(back.weights, p.weights);
    }
}
