use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::confidence::TrainConfig;
use crate::ensemble::Strategy;
use crate::features::SplitSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!(
                "unknown report format {other:?} (expected text or markdown)"
            )),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Markdown => "markdown",
        })
    }
}

/// One table column: a display name and the feature file behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub name: String,
    pub path: PathBuf,
}

/// A full experiment, usually read from TOML:
///
/// ```toml
/// strategies = ["majority_vote", "probability_max", "max_confidence"]
/// report_format = "markdown"
/// output_dir = "results"
///
/// [[datasets]]
/// name = "BoolQ"
/// path = "boolq.jsonl"
///
/// [split]
/// seed = 7
/// corpus_size = 500
/// test_fraction = "1/2"
/// val_fraction_of_train = "1/5"
///
/// [train]
/// learning_rate = 0.001
/// batch_size = 32
/// epochs = 200
/// shuffle_seed = 7
/// ```
///
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSource>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub report_format: ReportFormat,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.datasets.is_empty() {
            return Err(HarnessError::Invalid(
                "at least one dataset is required".into(),
            ));
        }
        if self.strategies.is_empty() {
            return Err(HarnessError::Invalid(
                "at least one strategy is required".into(),
            ));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Invalid("dataset names must be unique".into()));
        }
        Ok(())
    }
}

pub fn load_experiment_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| HarnessError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for d in &mut cfg.datasets {
        if d.path.is_relative() {
            d.path = base.join(&d.path);
        }
    }
    if let Some(out) = cfg.output_dir.as_mut().filter(|o| o.is_relative()) {
        *out = base.join(&*out);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_example_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(
            &path,
            "[[datasets]]\nname = \"BoolQ\"\npath = \"boolq.jsonl\"\n\n[split]\nseed = 3\n\n[train]\nepochs = 5\n",
        )
        .unwrap();
        let cfg = load_experiment_config(&path).unwrap();
        assert_eq!(cfg.datasets[0].path, dir.path().join("boolq.jsonl"));
        assert_eq!(cfg.split.seed, 3);
        assert_eq!(cfg.split.corpus_size, 500);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.strategies, Strategy::ALL.to_vec());
        assert_eq!(cfg.report_format, ReportFormat::Text);
    }

    #[test]
    fn rejects_unknown_keys_and_empty_lists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(&path, "datasets = []\n").unwrap();
        assert!(matches!(
            load_experiment_config(&path),
            Err(HarnessError::Invalid(_))
        ));
        fs::write(&path, "datasets = []\nbogus = 1\n").unwrap();
        assert!(matches!(
            load_experiment_config(&path),
            Err(HarnessError::Config { .. })
        ));
    }
}
