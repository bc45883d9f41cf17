//! Feature records, their JSON-lines file format, and seeded corpus splits.
//!
//! A [`FeatureRecord`] holds what one model produced for one example: a
//! `num_layers × num_choices` matrix whose row `l` is the normalized choice
//! distribution read out at layer `l`, the model's answer, and the gold label.
//! The flattened feature vector consumed by the confidence predictor is the
//! row-major concatenation of those rows.
//!
//! On disk a feature file is UTF-8 JSON lines, one record object per line with
//! the field names of [`FeatureRecord`]. Floats are written in shortest
//! round-trip form and parsed exactly, so `load(save(s)) == s` bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Tolerance on `|Σ_k p_k − 1|` for every row of `layer_probs`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}invalid record {dataset_id}/{example_id}/{model_id}: {}", line_prefix(*.line), violations.join("; "))]
    InvalidRecord {
        line: Option<usize>,
        dataset_id: String,
        example_id: String,
        model_id: String,
        violations: Vec<String>,
    },
    #[error("model {model_id} has {found} layers on {dataset_id}/{example_id}, but {expected} elsewhere")]
    InconsistentLayers {
        model_id: String,
        dataset_id: String,
        example_id: String,
        expected: usize,
        found: usize,
    },
    #[error("dataset {dataset_id} has {found} choices on example {example_id}, but {expected} elsewhere")]
    InconsistentChoices {
        dataset_id: String,
        example_id: String,
        expected: usize,
        found: usize,
    },
    #[error("dataset {dataset_id} uses different choice labels on example {example_id}")]
    InconsistentLabels {
        dataset_id: String,
        example_id: String,
    },
    #[error("duplicate record for {dataset_id}/{example_id}/{model_id}")]
    DuplicateRecord {
        dataset_id: String,
        example_id: String,
        model_id: String,
    },
    #[error("corpus size {requested} exceeds the {available} distinct examples available")]
    CorpusTooLarge { requested: usize, available: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

/// One (example, model) pair of layer-wise choice probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub dataset_id: String,
    pub example_id: String,
    pub model_id: String,
    pub num_layers: usize,
    pub num_choices: usize,
    /// Row `l` is the normalized distribution over choices at layer `l + 1`.
    pub layer_probs: Vec<Vec<f64>>,
    pub prediction: usize,
    pub gold: usize,
    pub choice_labels: Vec<String>,
}

impl FeatureRecord {
    /// Row-major concatenation of `layer_probs`.
    pub fn feature_vector(&self) -> Vec<f64> {
        self.layer_probs.iter().flatten().copied().collect()
    }

    /// The last layer's choice distribution.
    pub fn final_probs(&self) -> &[f64] {
        self.layer_probs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_correct(&self) -> bool {
        self.prediction == self.gold
    }

    pub fn key(&self) -> ExampleKey {
        ExampleKey {
            dataset_id: self.dataset_id.clone(),
            example_id: self.example_id.clone(),
        }
    }
}

/// Index of the largest entry, lowest index on ties. `None` for an empty slice.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Every invariant violation of `r`, as human-readable messages.
pub fn validate_record(r: &FeatureRecord) -> Vec<String> {
    let mut out = Vec::new();
    for (name, value) in [
        ("dataset_id", &r.dataset_id),
        ("example_id", &r.example_id),
        ("model_id", &r.model_id),
    ] {
        if value.is_empty() {
            out.push(format!("{name} is empty"));
        }
    }
    if r.num_layers == 0 {
        out.push("num_layers must be at least 1".to_string());
    }
    if r.num_choices < 2 {
        out.push(format!(
            "num_choices is {}, expected at least 2",
            r.num_choices
        ));
    }
    if r.layer_probs.len() != r.num_layers {
        out.push(format!(
            "layer_probs has {} rows, expected {}",
            r.layer_probs.len(),
            r.num_layers
        ));
    }
    for (l, row) in r.layer_probs.iter().enumerate() {
        if row.len() != r.num_choices {
            out.push(format!(
                "row {l} has {} entries, expected {}",
                row.len(),
                r.num_choices
            ));
        }
        for (k, &p) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("row {l} entry {k} is {p}, outside [0, 1]"));
            }
        }
        let sum: f64 = row.iter().sum();
        if sum.is_nan() || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            out.push(format!("row {l} sums to {sum}"));
        }
    }
    if r.choice_labels.len() != r.num_choices {
        out.push(format!(
            "choice_labels has {} entries, expected {}",
            r.choice_labels.len(),
            r.num_choices
        ));
    }
    if r.prediction >= r.num_choices {
        out.push(format!(
            "prediction {} out of range for {} choices",
            r.prediction, r.num_choices
        ));
    }
    if r.gold >= r.num_choices {
        out.push(format!(
            "gold {} out of range for {} choices",
            r.gold, r.num_choices
        ));
    }
    if let Some(argmax) = argmax_lowest(r.final_probs()) {
        if argmax != r.prediction {
            out.push(format!(
                "prediction is {} but the final-layer argmax is {argmax}",
                r.prediction
            ));
        }
    }
    out
}

/// Identifies an example: ids are unique within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExampleKey {
    pub dataset_id: String,
    pub example_id: String,
}

impl fmt::Display for ExampleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset_id, self.example_id)
    }
}

/// A validated, immutable collection of feature records.
///
/// Construction checks every record plus the cross-record invariants: a model
/// has the same layer count everywhere, and a dataset has one choice count and
/// one label list. Completeness (every model of a dataset present on every
/// example) is reported by [`FeatureSet::is_complete`] rather than enforced.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    records: Vec<FeatureRecord>,
    index: BTreeMap<ExampleKey, BTreeMap<String, usize>>,
}

impl PartialEq for FeatureSet {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl FeatureSet {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self, FeatureError> {
        for r in &records {
            check_record(r, None)?;
        }
        let mut layers: BTreeMap<&str, usize> = BTreeMap::new();
        let mut choices: BTreeMap<&str, (usize, &[String])> = BTreeMap::new();
        let mut index: BTreeMap<ExampleKey, BTreeMap<String, usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let expected = *layers.entry(&r.model_id).or_insert(r.num_layers);
            if expected != r.num_layers {
                return Err(FeatureError::InconsistentLayers {
                    model_id: r.model_id.clone(),
                    dataset_id: r.dataset_id.clone(),
                    example_id: r.example_id.clone(),
                    expected,
                    found: r.num_layers,
                });
            }
            let (k, labels) = *choices
                .entry(&r.dataset_id)
                .or_insert((r.num_choices, &r.choice_labels));
            if k != r.num_choices {
                return Err(FeatureError::InconsistentChoices {
                    dataset_id: r.dataset_id.clone(),
                    example_id: r.example_id.clone(),
                    expected: k,
                    found: r.num_choices,
                });
            }
            if labels != r.choice_labels.as_slice() {
                return Err(FeatureError::InconsistentLabels {
                    dataset_id: r.dataset_id.clone(),
                    example_id: r.example_id.clone(),
                });
            }
            let models = index.entry(r.key()).or_default();
            if models.insert(r.model_id.clone(), i).is_some() {
                return Err(FeatureError::DuplicateRecord {
                    dataset_id: r.dataset_id.clone(),
                    example_id: r.example_id.clone(),
                    model_id: r.model_id.clone(),
                });
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct examples in lexicographic `(dataset_id, example_id)` order.
    pub fn example_keys(&self) -> impl Iterator<Item = &ExampleKey> {
        self.index.keys()
    }

    pub fn num_examples(&self) -> usize {
        self.index.len()
    }

    /// Records of one example keyed by model id (sorted).
    pub fn records_for(&self, key: &ExampleKey) -> Option<BTreeMap<&str, &FeatureRecord>> {
        self.index.get(key).map(|models| {
            models
                .iter()
                .map(|(m, &i)| (m.as_str(), &self.records[i]))
                .collect()
        })
    }

    pub fn dataset_ids(&self) -> BTreeSet<&str> {
        self.index.keys().map(|k| k.dataset_id.as_str()).collect()
    }

    /// Models that appear anywhere in `dataset_id`, sorted.
    pub fn model_ids(&self, dataset_id: &str) -> BTreeSet<&str> {
        self.records
            .iter()
            .filter(|r| r.dataset_id == dataset_id)
            .map(|r| r.model_id.as_str())
            .collect()
    }

    /// Records of one (dataset, model) pair, in example order.
    pub fn records_of(&self, dataset_id: &str, model_id: &str) -> Vec<&FeatureRecord> {
        self.index
            .iter()
            .filter(|(k, _)| k.dataset_id == dataset_id)
            .filter_map(|(_, models)| models.get(model_id).map(|&i| &self.records[i]))
            .collect()
    }

    /// Examples lacking a record from some model that appears in their dataset.
    pub fn incomplete_examples(&self) -> Vec<&ExampleKey> {
        let mut models_by_dataset: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            models_by_dataset
                .entry(&r.dataset_id)
                .or_default()
                .insert(&r.model_id);
        }
        self.index
            .iter()
            .filter(|(k, models)| models.len() != models_by_dataset[k.dataset_id.as_str()].len())
            .map(|(k, _)| k)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.incomplete_examples().is_empty()
    }

    /// The records of the given examples, in original record order.
    pub fn restrict_to(&self, keys: &BTreeSet<ExampleKey>) -> FeatureSet {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| keys.contains(&r.key()))
            .cloned()
            .collect();
        FeatureSet::new(records).expect("a subset of a valid set is valid")
    }
}

fn check_record(r: &FeatureRecord, line: Option<usize>) -> Result<(), FeatureError> {
    let violations = validate_record(r);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(FeatureError::InvalidRecord {
            line,
            dataset_id: r.dataset_id.clone(),
            example_id: r.example_id.clone(),
            model_id: r.model_id.clone(),
            violations,
        })
    }
}

/// Parses a JSON-lines feature stream. Blank lines are skipped.
pub fn read_features<R: BufRead>(reader: R) -> Result<FeatureSet, FeatureError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| FeatureError::Parse {
            line: lineno,
            source: serde_json::Error::io(source),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FeatureRecord =
            serde_json::from_str(&line).map_err(|source| FeatureError::Parse {
                line: lineno,
                source,
            })?;
        check_record(&record, Some(lineno))?;
        records.push(record);
    }
    FeatureSet::new(records)
}

pub fn write_features<W: Write>(set: &FeatureSet, mut writer: W) -> io::Result<()> {
    for r in set.records() {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet, FeatureError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_features(BufReader::new(file))
}

pub fn save_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let path = path.as_ref();
    let io_err = |source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_features(set, BufWriter::new(file)).map_err(io_err)
}

/// How a corpus is sampled and partitioned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub corpus_size: usize,
    #[serde(with = "ratio_str")]
    pub test_fraction: Ratio<u64>,
    #[serde(with = "ratio_str")]
    pub val_fraction_of_train: Ratio<u64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_size: 500,
            test_fraction: Ratio::new(1, 2),
            val_fraction_of_train: Ratio::new(1, 5),
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// `(train, val, test)` sizes: test is `⌊corpus · test_fraction⌋`, val is
    /// `⌈remaining · val_fraction⌉`, train is what is left.
    pub fn partition_sizes(&self) -> Result<(usize, usize, usize), FeatureError> {
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("val_fraction_of_train", self.val_fraction_of_train),
        ] {
            if *f.numer() == 0 || f >= Ratio::from_integer(1) {
                return Err(FeatureError::InvalidSplit(format!(
                    "{name} {f} is not in (0, 1)"
                )));
            }
        }
        let corpus = self.corpus_size as u64;
        let test = (self.test_fraction * corpus).floor().to_integer();
        let remaining = corpus - test;
        let val = (self.val_fraction_of_train * remaining).ceil().to_integer();
        let train = remaining - val;
        let sizes = (train as usize, val as usize, test as usize);
        if sizes.0 == 0 || sizes.1 == 0 || sizes.2 == 0 {
            return Err(FeatureError::InvalidSplit(format!(
                "corpus of {} leaves an empty partition (train {}, val {}, test {})",
                self.corpus_size, sizes.0, sizes.1, sizes.2
            )));
        }
        Ok(sizes)
    }
}

/// Three disjoint partitions of a sampled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: FeatureSet,
    pub val: FeatureSet,
    pub test: FeatureSet,
}

/// Samples `corpus_size` examples and partitions them into train/val/test.
///
/// Examples are sorted lexicographically, shuffled with [`rng::shuffle`] under
/// `spec.seed`, and the first `corpus_size` form the corpus. The corpus is cut
/// in order into test, then val, then train. All records of an example land
/// in the same partition.
pub fn sample_and_split(set: &FeatureSet, spec: &SplitSpec) -> Result<Split, FeatureError> {
    let (_, n_val, n_test) = spec.partition_sizes()?;
    let available = set.num_examples();
    if spec.corpus_size > available {
        return Err(FeatureError::CorpusTooLarge {
            requested: spec.corpus_size,
            available,
        });
    }
    let mut keys: Vec<&ExampleKey> = set.example_keys().collect();
    rng::shuffle(&mut rng::seeded(spec.seed), &mut keys);
    let corpus = &keys[..spec.corpus_size];
    let collect = |slice: &[&ExampleKey]| -> BTreeSet<ExampleKey> {
        slice.iter().map(|&k| k.clone()).collect()
    };
    let test = collect(&corpus[..n_test]);
    let val = collect(&corpus[n_test..n_test + n_val]);
    let train = collect(&corpus[n_test + n_val..]);
    Ok(Split {
        train: set.restrict_to(&train),
        val: set.restrict_to(&val),
        test: set.restrict_to(&test),
    })
}

/// Fractions written as `"a/b"` strings (or plain integers) in config files.
pub(crate) mod ratio_str {
    use num_rational::Ratio;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(r)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Ratio<u64>, D::Error> {
        let text = String::deserialize(d)?;
        text.trim()
            .parse::<Ratio<u64>>()
            .map_err(|e| de::Error::custom(format!("bad fraction {text:?}: {e}")))
    }
}
