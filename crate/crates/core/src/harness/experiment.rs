use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::report::{
    render_table, tenths_from_counts, DatasetDetails, EnsembleReport, ExampleDecisions, ModelScore,
    PredictorSummary, ReportCell, ReportColumn, ReportMetadata,
};
use super::HarnessError;
use crate::confidence::{
    predict_confidence, train_predictor, ConfidencePredictor, PredictorId, Sample, TrainConfig,
    TrainLog,
};
use crate::ensemble::{decide, ModelVote, Strategy};
use crate::features::{load_features, sample_and_split, ExampleKey, FeatureSet, Split, SplitSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPredictor {
    pub predictor: ConfidencePredictor,
    pub log: TrainLog,
}

impl TrainedPredictor {
    fn summary(&self) -> PredictorSummary {
        PredictorSummary {
            model_id: self.predictor.model_id.clone(),
            best_epoch: self.log.best_epoch,
            best_val_loss: self.log.best_val_loss,
            best_val_accuracy: Some(self.log.epochs[self.log.best_epoch - 1].val_accuracy),
        }
    }
}

fn single_dataset(set: &FeatureSet) -> Result<String, HarnessError> {
    let ids = set.dataset_ids();
    if ids.len() == 1 {
        Ok(ids.into_iter().next().unwrap().to_string())
    } else {
        Err(HarnessError::MixedDatasets(
            ids.into_iter().map(String::from).collect(),
        ))
    }
}

fn require_complete(set: &FeatureSet, dataset_id: &str) -> Result<(), HarnessError> {
    let missing = set.incomplete_examples();
    match missing.first() {
        None => Ok(()),
        Some(first) => Err(HarnessError::Incomplete {
            dataset_id: dataset_id.to_string(),
            count: missing.len(),
            first: first.example_id.clone(),
        }),
    }
}

fn check_disjoint(split: &Split) -> Result<(), HarnessError> {
    let mut seen: BTreeSet<&ExampleKey> = BTreeSet::new();
    for part in [&split.train, &split.val, &split.test] {
        for key in part.example_keys() {
            if !seen.insert(key) {
                return Err(HarnessError::PartitionLeak(key.to_string()));
            }
        }
    }
    Ok(())
}

fn samples(set: &FeatureSet, dataset_id: &str, model_id: &str) -> Vec<Sample> {
    set.records_of(dataset_id, model_id)
        .into_iter()
        .map(Sample::from_record)
        .collect()
}

/// Trains one predictor per model of the (single) dataset in `train`.
///
/// Models train in parallel; the result is in model-id order.
pub fn train_predictors(
    train: &FeatureSet,
    val: &FeatureSet,
    cfg: &TrainConfig,
) -> Result<Vec<TrainedPredictor>, HarnessError> {
    let dataset_id = single_dataset(train)?;
    let models: Vec<&str> = train.model_ids(&dataset_id).into_iter().collect();
    models
        .par_iter()
        .map(|&model_id| {
            let train_samples = samples(train, &dataset_id, model_id);
            let val_samples = samples(val, &dataset_id, model_id);
            let first = train.records_of(&dataset_id, model_id)[0];
            let id = PredictorId {
                model_id: model_id.to_string(),
                dataset_id: dataset_id.clone(),
                num_layers: first.num_layers,
                num_choices: first.num_choices,
            };
            let (predictor, log) = train_predictor(&id, &train_samples, &val_samples, cfg)
                .map_err(|source| HarnessError::Training {
                    model_id: model_id.to_string(),
                    dataset_id: dataset_id.clone(),
                    source,
                })?;
            Ok(TrainedPredictor { predictor, log })
        })
        .collect()
}

/// Per-strategy cells, per-model test accuracy and per-example decisions.
pub type TestScores = (Vec<ReportCell>, Vec<ModelScore>, Vec<ExampleDecisions>);

/// Applies each strategy to every test example.
///
/// `predictors` must cover every model when max-confidence is requested and is
/// ignored otherwise. Votes are assembled in model-id order.
pub fn score_test_set(
    test: &FeatureSet,
    predictors: &[ConfidencePredictor],
    strategies: &[Strategy],
) -> Result<TestScores, HarnessError> {
    let dataset_id = single_dataset(test)?;
    require_complete(test, &dataset_id)?;
    let models: Vec<&str> = test.model_ids(&dataset_id).into_iter().collect();
    let needs_confidence = strategies.iter().any(|s| s.needs_confidence());
    let by_model: Vec<Option<&ConfidencePredictor>> = models
        .iter()
        .map(|m| {
            let found = predictors.iter().find(|p| p.model_id == *m);
            if needs_confidence && found.is_none() {
                Err(HarnessError::MissingPredictor(m.to_string()))
            } else {
                Ok(found)
            }
        })
        .collect::<Result<_, _>>()?;

    let mut decisions = Vec::with_capacity(test.num_examples());
    let mut correct = vec![0usize; strategies.len()];
    let mut ties = vec![0usize; strategies.len()];
    let mut model_correct = vec![0usize; models.len()];
    for key in test.example_keys() {
        let records = test.records_for(key).expect("key from this set");
        let gold = records.values().next().expect("non-empty example").gold;
        let votes = models
            .iter()
            .zip(&by_model)
            .map(|(m, p)| {
                let r = records[m];
                let confidence = match p {
                    Some(p) if needs_confidence => Some(
                        predict_confidence(p, &r.feature_vector()).map_err(|source| {
                            HarnessError::Training {
                                model_id: m.to_string(),
                                dataset_id: dataset_id.clone(),
                                source,
                            }
                        })?,
                    ),
                    _ => None,
                };
                Ok(ModelVote {
                    model_id: m.to_string(),
                    prediction: r.prediction,
                    final_probs: r.final_probs().to_vec(),
                    confidence,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        for (i, v) in votes.iter().enumerate() {
            model_correct[i] += usize::from(v.prediction == gold);
        }
        let mut chosen = Vec::with_capacity(strategies.len());
        for (s, &strategy) in strategies.iter().enumerate() {
            let d = decide(strategy, &votes)?;
            correct[s] += usize::from(d.chosen_class == gold);
            ties[s] += usize::from(d.tie_broken);
            chosen.push(d.chosen_class);
        }
        decisions.push(ExampleDecisions {
            example_id: key.example_id.clone(),
            gold,
            chosen,
        });
    }

    let total = decisions.len();
    let cells = strategies
        .iter()
        .enumerate()
        .map(|(s, &strategy)| ReportCell {
            strategy,
            accuracy_tenths: tenths_from_counts(correct[s], total),
            correct: Some(correct[s]),
            total: Some(total),
            tie_broken: Some(ties[s]),
        })
        .collect();
    let single_models = models
        .iter()
        .zip(model_correct)
        .map(|(m, c)| ModelScore {
            model_id: m.to_string(),
            correct: c,
            total,
        })
        .collect();
    Ok((cells, single_models, decisions))
}

fn evaluate_inner(
    name: &str,
    set: &FeatureSet,
    split: &SplitSpec,
    train: &TrainConfig,
    strategies: &[Strategy],
) -> Result<(ReportColumn, Vec<TrainedPredictor>), HarnessError> {
    let (dataset_id, parts) = checked_split(set, split)?;
    let trained = if strategies.iter().any(|s| s.needs_confidence()) {
        train_predictors(&parts.train, &parts.val, train)?
    } else {
        Vec::new()
    };
    let predictors: Vec<ConfidencePredictor> =
        trained.iter().map(|t| t.predictor.clone()).collect();
    let summaries = trained.iter().map(TrainedPredictor::summary).collect();
    let column = score_column(name, dataset_id, &parts, &predictors, summaries, strategies)?;
    Ok((column, trained))
}

fn checked_split(set: &FeatureSet, split: &SplitSpec) -> Result<(String, Split), HarnessError> {
    let dataset_id = single_dataset(set)?;
    require_complete(set, &dataset_id)?;
    let parts = sample_and_split(set, split)?;
    check_disjoint(&parts)?;
    Ok((dataset_id, parts))
}

fn score_column(
    name: &str,
    dataset_id: String,
    parts: &Split,
    predictors: &[ConfidencePredictor],
    summaries: Vec<PredictorSummary>,
    strategies: &[Strategy],
) -> Result<ReportColumn, HarnessError> {
    let (cells, single_models, decisions) = score_test_set(&parts.test, predictors, strategies)?;
    Ok(ReportColumn {
        dataset: name.to_string(),
        cells,
        details: Some(DatasetDetails {
            dataset_id,
            train_size: parts.train.num_examples(),
            val_size: parts.val.num_examples(),
            test_size: parts.test.num_examples(),
            predictors: summaries,
            single_models,
            decisions,
        }),
    })
}

/// Like [`evaluate_dataset`], but scores the test partition with predictors
/// trained earlier (for instance by `lens train` with the same split).
///
/// Predictors must match the dataset; extra ones are ignored.
pub fn evaluate_with_predictors(
    name: &str,
    set: &FeatureSet,
    split: &SplitSpec,
    predictors: &[ConfidencePredictor],
    strategies: &[Strategy],
) -> Result<ReportColumn, HarnessError> {
    let (dataset_id, parts) = checked_split(set, split)?;
    let mine: Vec<ConfidencePredictor> = predictors
        .iter()
        .filter(|p| p.dataset_id == dataset_id)
        .cloned()
        .collect();
    let summaries = mine
        .iter()
        .map(|p| PredictorSummary {
            model_id: p.model_id.clone(),
            best_epoch: p.best_epoch,
            best_val_loss: p.best_val_loss,
            best_val_accuracy: None,
        })
        .collect();
    score_column(name, dataset_id, &parts, &mine, summaries, strategies)
}

/// Split, train and score one complete single-dataset feature set.
///
/// Predictors only see the train and validation partitions; baselines use no
/// predictor at all.
pub fn evaluate_dataset(
    name: &str,
    set: &FeatureSet,
    split: &SplitSpec,
    train: &TrainConfig,
    strategies: &[Strategy],
) -> Result<ReportColumn, HarnessError> {
    evaluate_inner(name, set, split, train, strategies).map(|(column, _)| column)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs every dataset of `cfg` and assembles the report.
///
/// With `output_dir` set, also writes `report.json`, the rendered table and
/// each trained predictor under `predictors/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EnsembleReport, HarnessError> {
    cfg.validate()?;
    let mut columns = Vec::with_capacity(cfg.datasets.len());
    let mut all_trained = Vec::new();
    for source in &cfg.datasets {
        let set = load_features(&source.path)?;
        let (column, trained) =
            evaluate_inner(&source.name, &set, &cfg.split, &cfg.train, &cfg.strategies)?;
        columns.push(column);
        all_trained.extend(trained);
    }
    let report = EnsembleReport {
        strategies: cfg.strategies.clone(),
        columns,
        metadata: ReportMetadata {
            split: Some(cfg.split.clone()),
            train: Some(cfg.train.clone()),
            shuffle_algorithm: crate::rng::SHUFFLE_ALGORITHM.to_string(),
        },
    };
    if let Some(dir) = &cfg.output_dir {
        let pred_dir = dir.join("predictors");
        fs::create_dir_all(&pred_dir).map_err(io_err(&pred_dir))?;
        let json = dir.join("report.json");
        fs::write(&json, report.to_json()).map_err(io_err(&json))?;
        let ext = match cfg.report_format {
            super::ReportFormat::Markdown => "md",
            super::ReportFormat::Text => "txt",
        };
        let table = dir.join(format!("report.{ext}"));
        fs::write(&table, render_table(&report, cfg.report_format)).map_err(io_err(&table))?;
        for t in &all_trained {
            let p = &t.predictor;
            let path = pred_dir.join(format!("{}__{}.json", p.dataset_id, p.model_id));
            p.save(&path).map_err(|source| HarnessError::Training {
                model_id: p.model_id.clone(),
                dataset_id: p.dataset_id.clone(),
                source,
            })?;
        }
    }
    Ok(report)
}
