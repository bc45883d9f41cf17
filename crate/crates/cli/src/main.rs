//! `lens`: generate features, train confidence predictors and compare
//! ensemble strategies from the command line.
//!
//! Every command that writes files takes `--out <dir>`; without it, results
//! go to stdout. Errors print a diagnostic chain and exit nonzero.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use lens_core::confidence::{ConfidencePredictor, TrainConfig};
use lens_core::ensemble::Strategy;
use lens_core::features::{
    load_features, sample_and_split, save_features, write_features, FeatureSet, SplitSpec,
};
use lens_core::harness::{
    evaluate_with_predictors, load_experiment_config, render_table, run_experiment, synth_generate,
    toy_pipeline, train_predictors, write_lens_dump, DatasetSource, EnsembleReport,
    ExperimentConfig, ReportFormat, ReportMetadata, SynthConfig, TokenTask,
};
use lens_core::rng::SHUFFLE_ALGORITHM;
use lens_core::toy_lm::ToyLmConfig;

#[derive(Parser)]
#[command(
    name = "lens",
    version,
    about = "Confidence-based LLM ensembles from logit-lens features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature file with planted per-model expertise.
    Synth(SynthArgs),
    /// Run seeded toy transformers on a token task and write their features.
    ToyExtract(ToyArgs),
    /// Split a feature file and train one confidence predictor per model.
    Train(TrainArgs),
    /// Compare ensemble strategies on the test partition.
    Evaluate(EvalArgs),
    /// Render a saved report.json as a table.
    Report(ReportArgs),
    /// Inspect feature files.
    #[command(subcommand)]
    Features(FeaturesCommand),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synthetic-data settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset_id: Option<String>,
    #[arg(long)]
    models: Option<usize>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    choices: Option<usize>,
    /// Strength of the planted correctness signature (0 = none).
    #[arg(long)]
    strength: Option<f64>,
    /// Probability of flipping the planted signature.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    expert_accuracy: Option<f64>,
    #[arg(long)]
    other_accuracy: Option<f64>,
    /// Directory for `<dataset_id>.jsonl`; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `toy-extract --config` file layout.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ToyFile {
    seeds: Option<Vec<u64>>,
    model: ToyLmConfig,
    task: TokenTask,
}

#[derive(Args)]
struct ToyArgs {
    /// TOML file with `seeds`, `[model]` and `[task]` tables; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of models; their init seeds are `seed, seed+1, ...`.
    #[arg(long)]
    models: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Comma-separated vocabulary ids of the answer tokens.
    #[arg(long, value_delimiter = ',')]
    choices: Option<Vec<usize>>,
    #[arg(long)]
    dataset_id: Option<String>,
    /// Directory for `<dataset_id>.jsonl`; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every layer's lens distribution to `lens_dump.jsonl`.
    #[arg(long, requires = "out")]
    dump_lens: bool,
}

/// Split and training settings shared by `train` and `evaluate`.
#[derive(Args)]
struct RunArgs {
    /// Experiment TOML; its split and train tables are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds both the split and the training shuffle.
    #[arg(long)]
    seed: Option<u64>,
    /// Examples sampled before splitting.
    #[arg(long)]
    corpus: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Directory for `<dataset>__<model>.json` predictors and `.log.json` curves.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Feature files as `NAME=PATH` or `PATH` (named after the file stem).
    /// Replaces the datasets of `--config`.
    #[arg(long = "features")]
    features: Vec<String>,
    /// Use predictors from `lens train` instead of training afresh.
    #[arg(long)]
    predictors: Option<PathBuf>,
    /// Comma-separated subset of majority_vote, probability_max, max_confidence.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Write report.json, the table and predictors here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    report: PathBuf,
    #[arg(long, default_value = "text")]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Check every record and the file's cross-record invariants.
    Validate { path: PathBuf },
    /// Sample and split a feature file into train/val/test.
    Split {
        path: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        corpus: usize,
        /// Directory for train.jsonl, val.jsonl and test.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::ToyExtract(args) => toy_extract(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Report(args) => report(args),
        Command::Features(FeaturesCommand::Validate { path }) => validate(&path),
        Command::Features(FeaturesCommand::Split {
            path,
            seed,
            corpus,
            out,
        }) => split(&path, seed, corpus, out.as_deref()),
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit_features(set: &FeatureSet, out: Option<&Path>, dataset_id: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(format!("{dataset_id}.jsonl"));
            save_features(set, &path)?;
            println!("wrote {} records to {}", set.len(), path.display());
        }
        None => write_features(set, io::stdout().lock()).context("writing to stdout")?,
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag.clone() { cfg.$field = v; })*
        };
    }
    set!(seed => seed, dataset_id => dataset_id, models => num_models, examples => num_examples,
         layers => num_layers, choices => num_choices, strength => signature_strength,
         noise => noise, expert_accuracy => expert_accuracy, other_accuracy => other_accuracy);
    let set = synth_generate(&cfg)?;
    emit_features(&set, a.out.as_deref(), &cfg.dataset_id)
}

fn toy_extract(a: ToyArgs) -> Result<()> {
    let file: ToyFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => ToyFile::default(),
    };
    let mut model = file.model;
    let mut task = file.task;
    if let Some(l) = a.layers {
        model.num_layers = l;
    }
    if let Some(n) = a.instances {
        task.num_instances = n;
    }
    if let Some(c) = a.choices {
        task.choice_token_ids = c;
    }
    if let Some(d) = a.dataset_id {
        task.dataset_id = d;
    }
    if let Some(s) = a.seed {
        task.seed = s;
    }
    let seeds: Vec<u64> = match (a.models, file.seeds) {
        (Some(n), _) => (0..n as u64).map(|i| task.seed + i).collect(),
        (None, Some(s)) => s,
        (None, None) => (0..3).map(|i| task.seed + i).collect(),
    };
    let set = toy_pipeline(&model, &task, &seeds)?;
    emit_features(&set, a.out.as_deref(), &task.dataset_id)?;
    if a.dump_lens {
        let path = a.out.expect("clap enforces --out").join("lens_dump.jsonl");
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = io::BufWriter::new(file);
        write_lens_dump(&set, &mut w)?;
        w.flush()?;
        println!("wrote lens dump to {}", path.display());
    }
    Ok(())
}

/// Split and training settings from `--config` plus flag overrides.
fn settings(run: &RunArgs) -> Result<(Option<ExperimentConfig>, SplitSpec, TrainConfig)> {
    let cfg = run
        .config
        .as_deref()
        .map(load_experiment_config)
        .transpose()?;
    let (mut split, mut train) = cfg
        .as_ref()
        .map(|c| (c.split.clone(), c.train.clone()))
        .unwrap_or_default();
    if let Some(s) = run.seed {
        split.seed = s;
        train.shuffle_seed = s;
    }
    if let Some(c) = run.corpus {
        split.corpus_size = c;
    }
    if let Some(e) = run.epochs {
        train.epochs = e;
    }
    if let Some(lr) = run.learning_rate {
        train.learning_rate = lr;
    }
    Ok((cfg, split, train))
}

fn train(a: TrainArgs) -> Result<()> {
    let (_, split_spec, train_cfg) = settings(&a.run)?;
    let set = load_features(&a.features)?;
    let parts = sample_and_split(&set, &split_spec)?;
    let trained = train_predictors(&parts.train, &parts.val, &train_cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    println!(
        "split: train {} / val {} / test {} examples",
        parts.train.num_examples(),
        parts.val.num_examples(),
        parts.test.num_examples()
    );
    for t in &trained {
        let p = &t.predictor;
        let stem = format!("{}__{}", p.dataset_id, p.model_id);
        p.save(a.out.join(format!("{stem}.json")))?;
        let log_path = a.out.join(format!("{stem}.log.json"));
        fs::write(&log_path, serde_json::to_string_pretty(&t.log)? + "\n")
            .with_context(|| format!("writing {}", log_path.display()))?;
        let best = &t.log.epochs[t.log.best_epoch - 1];
        println!(
            "{}: best epoch {} val loss {:.4} val accuracy {:.3}",
            p.model_id, best.epoch, best.val_loss, best.val_accuracy
        );
    }
    Ok(())
}

fn dataset_source(arg: &str) -> Result<DatasetSource> {
    let (name, path) = match arg.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let path = PathBuf::from(arg);
            let stem = path
                .file_stem()
                .with_context(|| format!("cannot name dataset from {arg:?}"))?
                .to_string_lossy()
                .into_owned();
            (stem, path)
        }
    };
    Ok(DatasetSource { name, path })
}

fn load_predictors(dir: &Path) -> Result<Vec<ConfidencePredictor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<_>>()?;
    paths.retain(|p| {
        p.extension().is_some_and(|e| e == "json") && !p.to_string_lossy().ends_with(".log.json")
    });
    paths.sort();
    if paths.is_empty() {
        bail!("no predictor files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| ConfidencePredictor::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let (cfg, split, train) = settings(&a.run)?;
    let mut cfg = cfg.unwrap_or_else(|| ExperimentConfig {
        datasets: Vec::new(),
        split: split.clone(),
        train: train.clone(),
        strategies: Strategy::ALL.to_vec(),
        output_dir: None,
        report_format: ReportFormat::Text,
    });
    cfg.split = split;
    cfg.train = train;
    if !a.features.is_empty() {
        cfg.datasets = a
            .features
            .iter()
            .map(|f| dataset_source(f))
            .collect::<Result<_>>()?;
    }
    if let Some(s) = a.strategies {
        cfg.strategies = s;
    }
    if let Some(f) = a.format {
        cfg.report_format = f;
    }
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    if cfg.datasets.is_empty() {
        bail!("no datasets: pass --features or a --config listing some");
    }
    cfg.validate()?;

    let report = match &a.predictors {
        None => run_experiment(&cfg)?,
        Some(dir) => {
            let predictors = load_predictors(dir)?;
            let columns = cfg
                .datasets
                .iter()
                .map(|d| {
                    let set = load_features(&d.path)?;
                    evaluate_with_predictors(
                        &d.name,
                        &set,
                        &cfg.split,
                        &predictors,
                        &cfg.strategies,
                    )
                    .with_context(|| format!("evaluating {}", d.name))
                })
                .collect::<Result<_>>()?;
            let report = EnsembleReport {
                strategies: cfg.strategies.clone(),
                columns,
                metadata: ReportMetadata {
                    split: Some(cfg.split.clone()),
                    train: None,
                    shuffle_algorithm: SHUFFLE_ALGORITHM.to_string(),
                },
            };
            if let Some(out) = &cfg.output_dir {
                fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
                fs::write(out.join("report.json"), report.to_json())?;
            }
            report
        }
    };
    print!("{}", render_table(&report, cfg.report_format));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text =
        fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let report: EnsembleReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.report.display()))?;
    print!("{}", render_table(&report, a.format));
    Ok(())
}

fn validate(path: &Path) -> Result<()> {
    let set = load_features(path)?;
    let datasets: Vec<&str> = set.dataset_ids().into_iter().collect();
    println!(
        "{}: {} records, {} examples, datasets [{}]",
        path.display(),
        set.len(),
        set.num_examples(),
        datasets.join(", ")
    );
    for d in &datasets {
        let models: Vec<&str> = set.model_ids(d).into_iter().collect();
        println!("  {d}: models [{}]", models.join(", "));
    }
    let incomplete = set.incomplete_examples();
    if !incomplete.is_empty() {
        println!(
            "  warning: {} examples lack a record from some model (first: {})",
            incomplete.len(),
            incomplete[0]
        );
    }
    Ok(())
}

fn split(path: &Path, seed: u64, corpus: usize, out: Option<&Path>) -> Result<()> {
    let set = load_features(path)?;
    let spec = SplitSpec {
        corpus_size: corpus,
        ..SplitSpec::with_seed(seed)
    };
    let parts = sample_and_split(&set, &spec)?;
    println!(
        "train {} / val {} / test {} examples ({SHUFFLE_ALGORITHM}, seed {seed})",
        parts.train.num_examples(),
        parts.val.num_examples(),
        parts.test.num_examples()
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, part) in [
            ("train", &parts.train),
            ("val", &parts.val),
            ("test", &parts.test),
        ] {
            save_features(part, dir.join(format!("{name}.jsonl")))?;
        }
    }
    Ok(())
}
