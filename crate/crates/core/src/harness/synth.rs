//! Synthetic feature sets with planted, recoverable correctness signals.
//!
//! Example `j` belongs to expertise region `j mod N`; model `i` answers
//! correctly with probability `expert_accuracy` inside region `i` and
//! `other_accuracy` elsewhere. Wrong answers are uniform over the other
//! classes.
//!
//! Correctness is written into the intermediate layers (1..L−1): each row is
//! `(1 − α)·q + α·e_t`, with `q` a uniform draw from the simplex and `e_t` the
//! one-hot of a target choice. Correct records target choice `i mod K`,
//! incorrect ones `(i + 1) mod K`; with probability `noise` the target is
//! swapped. The mixing weight is `α = s / (1 + s)` for signature strength `s`,
//! so for `s > 1` and zero noise the two outcomes are linearly separable.
//!
//! The final layer carries the answer only: `(1 − β)·q + β·e_prediction` with
//! `β ~ U[0.55, 0.95]`, independent of correctness.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::features::{FeatureRecord, FeatureSet};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dataset_id: String,
    pub num_models: usize,
    pub num_examples: usize,
    pub num_layers: usize,
    pub num_choices: usize,
    pub signature_strength: f64,
    pub noise: f64,
    pub expert_accuracy: f64,
    pub other_accuracy: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_id: "synth".into(),
            num_models: 3,
            num_examples: 500,
            num_layers: 4,
            num_choices: 4,
            signature_strength: 4.0,
            noise: 0.0,
            expert_accuracy: 1.0,
            other_accuracy: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Invalid(m));
        if self.dataset_id.is_empty() {
            return fail("dataset_id is empty".into());
        }
        if self.num_models == 0 || self.num_examples == 0 {
            return fail("num_models and num_examples must be positive".into());
        }
        if self.num_layers < 2 {
            return fail("num_layers must be at least 2 to carry a signature".into());
        }
        if self.num_choices < 2 {
            return fail("num_choices must be at least 2".into());
        }
        if !(self.signature_strength >= 0.0 && self.signature_strength.is_finite()) {
            return fail(format!(
                "signature_strength {} must be >= 0",
                self.signature_strength
            ));
        }
        for (name, p) in [
            ("noise", self.noise),
            ("expert_accuracy", self.expert_accuracy),
            ("other_accuracy", self.other_accuracy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} is not a probability"));
            }
        }
        Ok(())
    }

    /// Weight of the target vertex in intermediate rows.
    pub fn mixing_weight(&self) -> f64 {
        self.signature_strength / (1.0 + self.signature_strength)
    }
}

pub(crate) fn choice_labels(k: usize) -> Vec<String> {
    match k {
        2 => vec!["True".into(), "False".into()],
        k if k <= 26 => (b'A'..)
            .take(k)
            .map(|c| char::from(c).to_string())
            .collect(),
        k => (0..k).map(|i| format!("C{i}")).collect(),
    }
}

fn simplex_point<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

fn mix_toward<R: Rng>(rng: &mut R, k: usize, target: usize, weight: f64) -> Vec<f64> {
    let mut row: Vec<f64> = simplex_point(rng, k)
        .into_iter()
        .map(|q| (1.0 - weight) * q)
        .collect();
    row[target] += weight;
    row
}

/// Generates a complete feature set; deterministic in `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<FeatureSet, HarnessError> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let k = cfg.num_choices;
    let alpha = cfg.mixing_weight();
    let labels = choice_labels(k);
    let mut records = Vec::with_capacity(cfg.num_models * cfg.num_examples);
    for j in 0..cfg.num_examples {
        let region = j % cfg.num_models;
        let gold = rng::uniform_below(&mut rng, k as u64) as usize;
        for i in 0..cfg.num_models {
            let p_correct = if i == region {
                cfg.expert_accuracy
            } else {
                cfg.other_accuracy
            };
            let correct = rng.random::<f64>() < p_correct;
            let prediction = if correct {
                gold
            } else {
                let offset = 1 + rng::uniform_below(&mut rng, k as u64 - 1) as usize;
                (gold + offset) % k
            };
            let flip = rng.random::<f64>() < cfg.noise;
            let target = if correct != flip { i % k } else { (i + 1) % k };
            let mut layer_probs: Vec<Vec<f64>> = (1..cfg.num_layers)
                .map(|_| mix_toward(&mut rng, k, target, alpha))
                .collect();
            let beta = 0.55 + 0.4 * rng.random::<f64>();
            layer_probs.push(mix_toward(&mut rng, k, prediction, beta));
            records.push(FeatureRecord {
                dataset_id: cfg.dataset_id.clone(),
                example_id: format!("ex{j:06}"),
                model_id: format!("model-{i}"),
                num_layers: cfg.num_layers,
                num_choices: k,
                layer_probs,
                prediction,
                gold,
                choice_labels: labels.clone(),
            });
        }
    }
    Ok(FeatureSet::new(records)?)
}
