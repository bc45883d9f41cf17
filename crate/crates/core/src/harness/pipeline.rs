//! Feature extraction from a pool of seeded toy models.

use std::collections::BTreeSet;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::choice_labels;
use super::HarnessError;
use crate::features::{argmax_lowest, FeatureRecord, FeatureSet};
use crate::rng;
use crate::toy_lm::{extract_features, init_toy_model, ChoiceSpec, ToyLmConfig};

/// A synthetic token task: random sequences whose gold answer is the token
/// sum modulo the number of choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenTask {
    pub dataset_id: String,
    pub num_instances: usize,
    pub seq_len: usize,
    pub choice_token_ids: Vec<usize>,
    pub seed: u64,
}

impl Default for TokenTask {
    fn default() -> Self {
        Self {
            dataset_id: "toy".into(),
            num_instances: 40,
            seq_len: 8,
            choice_token_ids: vec![1, 2],
            seed: 0,
        }
    }
}

impl TokenTask {
    /// `(tokens, gold)` for every instance.
    pub fn instances(&self, vocab_size: usize) -> Vec<(Vec<usize>, usize)> {
        let mut rng = rng::seeded(self.seed);
        let k = self.choice_token_ids.len().max(1);
        (0..self.num_instances)
            .map(|_| {
                let tokens: Vec<usize> = (0..self.seq_len)
                    .map(|_| rng::uniform_below(&mut rng, vocab_size as u64) as usize)
                    .collect();
                let gold = tokens.iter().sum::<usize>() % k;
                (tokens, gold)
            })
            .collect()
    }
}

/// Runs one toy model per seed over every task instance.
///
/// Models share `base` except for `init_seed`. Records come out example-major,
/// models in seed order, and each prediction is the final-row argmax.
pub fn toy_pipeline(
    base: &ToyLmConfig,
    task: &TokenTask,
    seeds: &[u64],
) -> Result<FeatureSet, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Invalid(
            "at least one model seed is required".into(),
        ));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(HarnessError::Invalid("model seeds must be distinct".into()));
    }
    if task.seq_len == 0 || task.num_instances == 0 {
        return Err(HarnessError::Invalid(
            "task needs at least one instance of one token".into(),
        ));
    }
    let spec = ChoiceSpec::new(task.choice_token_ids.clone(), base.vocab_size)?;
    let labels = choice_labels(spec.len());
    let instances = task.instances(base.vocab_size);

    let per_model: Vec<Vec<FeatureRecord>> = seeds
        .par_iter()
        .map(|&seed| {
            let model = init_toy_model(&ToyLmConfig {
                init_seed: seed,
                ..base.clone()
            })?;
            instances
                .iter()
                .enumerate()
                .map(|(j, (tokens, gold))| {
                    let layer_probs = extract_features(&model, tokens, &spec)?;
                    let prediction = argmax_lowest(layer_probs.last().expect("at least one layer"))
                        .expect("K >= 2");
                    Ok(FeatureRecord {
                        dataset_id: task.dataset_id.clone(),
                        example_id: format!("inst{j:06}"),
                        model_id: format!("toy-s{seed}"),
                        num_layers: base.num_layers,
                        num_choices: spec.len(),
                        layer_probs,
                        prediction,
                        gold: *gold,
                        choice_labels: labels.clone(),
                    })
                })
                .collect::<Result<Vec<_>, HarnessError>>()
        })
        .collect::<Result<_, _>>()?;

    let mut records = Vec::with_capacity(seeds.len() * instances.len());
    for j in 0..instances.len() {
        records.extend(per_model.iter().map(|m| m[j].clone()));
    }
    Ok(FeatureSet::new(records)?)
}

/// One layer's lens distribution for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensDumpLine {
    pub dataset_id: String,
    pub example_id: String,
    pub model_id: String,
    /// 1-based.
    pub layer: usize,
    pub probs: Vec<f64>,
}

/// Writes every record's per-layer distributions as JSON lines.
pub fn write_lens_dump<W: Write>(set: &FeatureSet, mut out: W) -> io::Result<()> {
    for r in set.records() {
        for (l, probs) in r.layer_probs.iter().enumerate() {
            let line = LensDumpLine {
                dataset_id: r.dataset_id.clone(),
                example_id: r.example_id.clone(),
                model_id: r.model_id.clone(),
                layer: l + 1,
                probs: probs.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}
