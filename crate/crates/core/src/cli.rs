//! The `mlem` command line: simulate, fit, importance, compare, univariate.
//!
//! Every command writes JSON (and, where useful, flat CSV) reports through
//! [`crate::io::write_atomic`]. Reports contain no timestamps or host data, so
//! reruns with the same inputs and seed are byte-identical.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{check_aligned, load_feature_table, FeatureKind, FeatureTable, RepresentationSet};
use crate::error::Error;
use crate::importance::{frobenius_distance, permutation_importance, weighted_tau, ImportanceReport, DEFAULT_PERMUTATIONS};
use crate::io::{read_json, write_atomic, write_json};
use crate::metric::{MetricModel, ModelVariant, WeightFile, WeightMatrix};
use crate::pairs::{assemble_batch, select_batch_size, BatchSizeParams, BatchSizeSelection};
use crate::rng::derive_seed;
use crate::softrank::SoftRankConfig;
use crate::synth::{generate_dataset, GroundTruth, SynthConfig};
use crate::train::{
    mean_std, pairs_among, run_folds, univariate_comparison, EvalConfig, SplitSpec, StopReason, TrainConfig,
    DEFAULT_EVAL_MAX_PAIRS,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Best objective below which a run that exhausted `max_steps` counts as failed.
pub const CONVERGENCE_FLOOR: f64 = 0.05;

/// Stream tag for the batch-size probe RNG.
const PROBE_STREAM: u64 = 0x5052_4f42;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("training did not converge: {0}")]
    Convergence(String),
}

impl CliError {
    /// 0 success, 2 invalid input, 3 degenerate data, 4 convergence failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Convergence(_) => 4,
            CliError::Lib(e) => match e {
                Error::UndefinedCorrelation(_) | Error::DegenerateParameters(_) | Error::DegenerateData(_) => 3,
                Error::NonFiniteGradient { .. } => 4,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mlem", version, about = "Metric learning encoding models")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MLEM_NUM_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic datasets with a planted SPD metric.
    Simulate(SimulateArgs),
    /// Train a metric on a feature table and representation matrix.
    Fit(FitArgs),
    /// Permutation importance of every feature and interaction.
    Importance(ImportanceArgs),
    /// Compare weight matrices and importance profiles.
    Compare(CompareArgs),
    /// Train one model per representation unit plus the multivariate reference.
    Univariate(UnivariateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 768)]
    pub d: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Number of datasets; seeds are first-seed, first-seed + 1, ...
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Feature table (CSV with a `stimulus_id` column).
    #[arg(long)]
    pub features: PathBuf,
    /// Representation matrix (binary or CSV).
    #[arg(long)]
    pub reps: PathBuf,
    /// Force a feature kind, e.g. `--kind size=ordinal`.
    #[arg(long = "kind", value_parser = parse_kind_override)]
    pub kinds: Vec<(String, FeatureKind)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Holdout,
    Kfold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSizeArg {
    Auto,
    Fixed(usize),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `auto` runs the probe procedure; otherwise a pair count.
    #[arg(long, default_value = "4096", value_parser = parse_batch_size)]
    pub batch_size: BatchSizeArg,
    #[arg(long, default_value_t = 1.0)]
    pub softrank_eps: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the stimulus split (defaults to --seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Holdout)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Cap on held-out pairs scored per fold.
    #[arg(long, default_value_t = DEFAULT_EVAL_MAX_PAIRS)]
    pub eval_max_pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub probe_batches: usize,
    #[arg(long, default_value_t = 1.2)]
    pub probe_growth: f64,
    #[arg(long, default_value_t = 0.01)]
    pub probe_std: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_parser = parse_variant, default_value = "mlem")]
    pub variant: ModelVariant,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Ground-truth file from `simulate`; adds Frobenius distances to the report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    /// Weight file written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub n_perm: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to held-out pairs of the 80/20 split with this seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_EVAL_MAX_PAIRS)]
    pub max_pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Weight files, fit reports or importance reports (repeatable).
    #[arg(long = "a", required = true)]
    pub a: Vec<PathBuf>,
    #[arg(long = "b", required = true)]
    pub b: Vec<PathBuf>,
    /// Ground truth: one file for all pairs, or one per compared pair.
    #[arg(long)]
    pub ground_truth: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UnivariateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `all` or a comma-separated list of unit indices.
    #[arg(long, default_value = "all")]
    pub units: String,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind_override(s: &str) -> std::result::Result<(String, FeatureKind), String> {
    let (name, kind) = s
        .rsplit_once('=')
        .ok_or_else(|| format!("expected NAME=KIND, got `{s}`"))?;
    Ok((name.to_string(), kind.parse().map_err(|e: Error| e.to_string())?))
}

fn parse_batch_size(s: &str) -> std::result::Result<BatchSizeArg, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(BatchSizeArg::Auto);
    }
    match s.parse::<usize>() {
        Ok(b) if b > 0 => Ok(BatchSizeArg::Fixed(b)),
        _ => Err(format!("batch size must be `auto` or a positive integer, got `{s}`")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<ModelVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // a second initialization (e.g. in tests) keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Fit(args) => fit(&args),
        Command::Importance(args) => importance(&args),
        Command::Compare(args) => compare(&args),
        Command::Univariate(args) => univariate(&args),
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateReport {
    pub version: String,
    pub command: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub noise: f64,
    pub seeds: Vec<u64>,
    pub datasets: Vec<SimulatedDataset>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub seed: u64,
    pub dir: String,
    pub max_relative_mds_error: f64,
    pub truncated_eigenvalues: usize,
}

pub fn dataset_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let datasets = seeds
        .par_iter()
        .map(|&seed| -> CliResult<SimulatedDataset> {
            let config = SynthConfig {
                n: args.n,
                m: args.m,
                d: args.d,
                noise_level: args.noise,
                seed,
            };
            let data = generate_dataset(&config)?;
            let dir = dataset_dir(&args.out_dir, seed);
            data.table.save(&dir.join("features.csv"))?;
            data.reps.save_binary(&dir.join("reps.bin"))?;
            write_json(&dir.join("ground_truth.json"), &data.ground_truth)?;
            Ok(SimulatedDataset {
                seed,
                dir: format!("seed_{seed}"),
                max_relative_mds_error: data.ground_truth.mds.fidelity.max_relative_error,
                truncated_eigenvalues: data.ground_truth.mds.truncated,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = SimulateReport {
        version: VERSION.into(),
        command: "simulate".into(),
        n: args.n,
        m: args.m,
        d: args.d,
        noise: args.noise,
        seeds,
        datasets,
    };
    write_json(&args.out_dir.join("simulate_report.json"), &report)?;
    Ok(())
}

// ---------------------------------------------------------------- fit

fn load_data(args: &DataArgs) -> CliResult<(FeatureTable, RepresentationSet)> {
    let overrides: HashMap<String, FeatureKind> = args.kinds.iter().cloned().collect();
    let table = load_feature_table(&args.features, &overrides)?;
    let reps = RepresentationSet::load(&args.reps)?;
    check_aligned(&table, &reps)?;
    Ok((table, reps))
}

/// Training configuration after resolving `--batch-size auto`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTraining {
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval_max_pairs: usize,
    pub batch_size_mode: String,
    pub batch_size_selection: Option<BatchSizeSelection>,
}

fn resolve_training(args: &TrainArgs, table: &FeatureTable) -> CliResult<ResolvedTraining> {
    let softrank = SoftRankConfig::new(args.softrank_eps)?;
    let split = match args.split {
        SplitArg::Holdout => SplitSpec {
            mode: crate::train::SplitMode::Holdout {
                train_fraction: args.train_fraction,
            },
            seed: args.split_seed.unwrap_or(args.seed),
        },
        SplitArg::Kfold => SplitSpec::kfold(args.k, args.split_seed.unwrap_or(args.seed)),
    };
    if args.eval_max_pairs == 0 {
        return Err(CliError::Usage("--eval-max-pairs must be positive".into()));
    }
    let (batch_size, selection) = match args.batch_size {
        BatchSizeArg::Fixed(b) => (b, None),
        BatchSizeArg::Auto => {
            let params = BatchSizeParams {
                num_probe_batches: args.probe_batches,
                growth: args.probe_growth,
                std_threshold: args.probe_std,
                ..BatchSizeParams::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, &[PROBE_STREAM]));
            let sel = select_batch_size(table, &params, &mut rng)?;
            (sel.batch_size, Some(sel))
        }
    };
    let train = TrainConfig {
        learning_rate: args.lr,
        patience: args.patience,
        max_steps: args.max_steps,
        batch_size,
        softrank,
        seed: args.seed,
        ..TrainConfig::default()
    };
    train.validate()?;
    Ok(ResolvedTraining {
        train,
        split,
        eval_max_pairs: args.eval_max_pairs,
        batch_size_mode: match args.batch_size {
            BatchSizeArg::Auto => "auto".into(),
            BatchSizeArg::Fixed(_) => "fixed".into(),
        },
        batch_size_selection: selection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: String,
    pub command: String,
    pub features: String,
    pub reps: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub variant: ModelVariant,
    pub config: ResolvedTraining,
    pub folds: Vec<FoldReport>,
    pub mean_test_spearman: f64,
    pub std_test_spearman: f64,
    pub mean_steps_to_converge: f64,
    pub std_steps_to_converge: f64,
    pub mean_frobenius_to_ground_truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub test_spearman: f64,
    pub steps_to_converge: usize,
    pub stop_reason: StopReason,
    pub best_step: usize,
    pub best_objective: f64,
    /// Batch objective per step; `null` for skipped steps.
    pub objective_trace: Vec<Option<f64>>,
    pub model_file: String,
    pub weights: WeightFile,
    pub frobenius_to_ground_truth: Option<f64>,
}

fn fit(args: &FitArgs) -> CliResult<()> {
    let (table, reps) = load_data(&args.data)?;
    let resolved = resolve_training(&args.train, &table)?;
    let ground_truth = args
        .ground_truth
        .as_deref()
        .map(load_ground_truth_weights)
        .transpose()?;
    let eval = EvalConfig {
        max_pairs: resolved.eval_max_pairs,
        seed: derive_seed(resolved.split.seed, &[1]),
    };
    let cv = run_folds(&table, &reps, args.variant, &resolved.train, &resolved.split, &eval)?;

    let single = cv.folds.len() == 1;
    let mut folds = Vec::with_capacity(cv.folds.len());
    for f in &cv.folds {
        let model_file = if single {
            "model.json".to_string()
        } else {
            format!("model_fold{}.json", f.fold)
        };
        let weights = f.trained.model.to_file();
        write_json(&args.out.join(&model_file), &weights)?;
        let frobenius_to_ground_truth = match &ground_truth {
            Some(gt) => Some(frobenius_distance(&f.trained.model.weights, gt)?),
            None => None,
        };
        folds.push(FoldReport {
            fold: f.fold,
            n_train: f.trained.train_stimuli.len(),
            n_test: f.trained.test_stimuli.len(),
            test_spearman: f.test_score,
            steps_to_converge: f.trace.steps_to_converge,
            stop_reason: f.trace.stop_reason,
            best_step: f.trace.best_step,
            best_objective: f.trace.best_objective,
            objective_trace: f.trace.records.iter().map(|r| r.batch_objective).collect(),
            model_file,
            weights,
            frobenius_to_ground_truth,
        });
    }
    let steps: Vec<f64> = folds.iter().map(|f| f.steps_to_converge as f64).collect();
    let (mean_steps, std_steps) = mean_std(&steps);
    let frob: Vec<f64> = folds.iter().filter_map(|f| f.frobenius_to_ground_truth).collect();
    let report = FitReport {
        version: VERSION.into(),
        command: "fit".into(),
        features: display_path(&args.data.features),
        reps: display_path(&args.data.reps),
        n: table.n(),
        m: table.m(),
        d: reps.d(),
        variant: args.variant,
        config: resolved,
        folds,
        mean_test_spearman: cv.mean_score,
        std_test_spearman: cv.std_score,
        mean_steps_to_converge: mean_steps,
        std_steps_to_converge: std_steps,
        mean_frobenius_to_ground_truth: (!frob.is_empty()).then(|| mean_std(&frob).0),
    };
    write_json(&args.out.join("report.json"), &report)?;
    println!(
        "{} test spearman {:.4} +- {:.4} over {} fold(s); report in {}",
        args.variant,
        report.mean_test_spearman,
        report.std_test_spearman,
        report.folds.len(),
        args.out.display()
    );
    check_convergence(&report.folds)
}

fn check_convergence(folds: &[FoldReport]) -> CliResult<()> {
    let failed: Vec<String> = folds
        .iter()
        .filter(|f| f.stop_reason == StopReason::MaxSteps && f.best_objective < CONVERGENCE_FLOOR)
        .map(|f| format!("fold {} (best objective {:.4})", f.fold, f.best_objective))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Convergence(format!(
            "max steps reached with best objective below {CONVERGENCE_FLOOR}: {}",
            failed.join(", ")
        )))
    }
}

fn display_path(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn load_ground_truth_weights(path: &Path) -> CliResult<WeightMatrix> {
    let gt: GroundTruth = read_json(path)?;
    Ok(gt.weights()?)
}

// ---------------------------------------------------------------- importance

fn importance(args: &ImportanceArgs) -> CliResult<()> {
    let file: WeightFile = read_json(&args.model)?;
    let model = MetricModel::from_file(&file)?;
    let (table, reps) = load_data(&args.data)?;
    let names = table.feature_names();
    if names != model.feature_names {
        return Err(Error::DimensionMismatch(format!(
            "model features [{}] do not match table features [{}]",
            model.feature_names.join(", "),
            names.join(", ")
        ))
        .into());
    }
    if args.max_pairs == 0 {
        return Err(CliError::Usage("--max-pairs must be positive".into()));
    }
    let stimuli: Vec<usize> = match args.split_seed {
        Some(seed) => SplitSpec::holdout(seed).partition(table.n())?.swap_remove(0).test,
        None => (0..table.n()).collect(),
    };
    let pairs = pairs_among(&stimuli, args.max_pairs, derive_seed(args.seed, &[0]));
    let batch = assemble_batch(&table, &reps, &pairs)?;
    let report = permutation_importance(&model, &batch, args.n_perm, args.seed)?;
    write_json(&args.out.join("importance.json"), &report)?;
    write_atomic(&args.out.join("importance.csv"), report.to_csv_string().as_bytes())?;
    if let Some(top) = report.ranked().first() {
        println!(
            "baseline spearman {:.4}; top entry {} ({:.4})",
            report.baseline_score, top.name, top.importance
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- compare

/// One comparable unit: a weight matrix, an importance profile, or both.
#[derive(Debug, Clone)]
struct Item {
    label: String,
    feature_names: Vec<String>,
    weights: Option<WeightMatrix>,
    importances: Option<Vec<f64>>,
    steps_to_converge: Option<usize>,
}

fn from_value<T: serde::de::DeserializeOwned>(path: &Path, value: serde_json::Value) -> CliResult<T> {
    serde_json::from_value(value).map_err(|e| Error::malformed(path, e.to_string()).into())
}

fn load_items(path: &Path) -> CliResult<Vec<Item>> {
    let value: serde_json::Value = read_json(path)?;
    let label = display_path(path);
    let obj = value
        .as_object()
        .ok_or_else(|| Error::malformed(path, "expected a JSON object"))?;
    if obj.get("command").and_then(|c| c.as_str()) == Some("fit") {
        let report: FitReport = from_value(path, value)?;
        return report
            .folds
            .iter()
            .map(|f| {
                Ok(Item {
                    label: format!("{label}#fold{}", f.fold),
                    feature_names: f.weights.feature_names.clone(),
                    weights: Some(MetricModel::from_file(&f.weights)?.weights),
                    importances: None,
                    steps_to_converge: Some(f.steps_to_converge),
                })
            })
            .collect();
    }
    if obj.contains_key("entries") {
        let report: ImportanceReport = from_value(path, value)?;
        return Ok(vec![Item {
            label,
            feature_names: report.feature_names.clone(),
            weights: None,
            importances: Some(report.importances()),
            steps_to_converge: None,
        }]);
    }
    if obj.contains_key("config") && obj.contains_key("W") {
        let gt: GroundTruth = from_value(path, value)?;
        return Ok(vec![Item {
            label,
            feature_names: gt.feature_names.clone(),
            weights: Some(gt.weights()?),
            importances: None,
            steps_to_converge: None,
        }]);
    }
    if obj.contains_key("W") {
        let file: WeightFile = from_value(path, value)?;
        return Ok(vec![Item {
            label,
            feature_names: file.feature_names.clone(),
            weights: Some(MetricModel::from_file(&file)?.weights),
            importances: None,
            steps_to_converge: None,
        }]);
    }
    Err(Error::malformed(path, "not a weight file, fit report, importance report or ground truth").into())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub version: String,
    pub command: String,
    pub pairs: Vec<ComparedPair>,
    pub summary: CompareSummary,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComparedPair {
    pub a: String,
    pub b: String,
    pub frobenius_a_b: Option<f64>,
    pub weighted_tau: Option<f64>,
    pub frobenius_a_ground_truth: Option<f64>,
    pub frobenius_b_ground_truth: Option<f64>,
    pub steps_a: Option<usize>,
    pub steps_b: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompareSummary {
    pub frobenius_a_b: Option<MeanStd>,
    pub weighted_tau: Option<MeanStd>,
    pub frobenius_a_ground_truth: Option<MeanStd>,
    pub frobenius_b_ground_truth: Option<MeanStd>,
    pub steps_a: Option<MeanStd>,
    pub steps_b: Option<MeanStd>,
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> Option<MeanStd> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(&v);
    Some(MeanStd {
        mean,
        std,
        count: v.len(),
    })
}

fn check_same_features(a: &Item, b: &Item) -> CliResult<()> {
    if a.feature_names != b.feature_names {
        return Err(Error::DimensionMismatch(format!(
            "{} and {} have different feature sets",
            a.label, b.label
        ))
        .into());
    }
    Ok(())
}

fn compare(args: &CompareArgs) -> CliResult<()> {
    let collect = |paths: &[PathBuf]| -> CliResult<Vec<Item>> {
        let mut all = Vec::new();
        for p in paths {
            all.extend(load_items(p)?);
        }
        Ok(all)
    };
    let a = collect(&args.a)?;
    let b = collect(&args.b)?;
    if a.len() != b.len() {
        return Err(CliError::Usage(format!(
            "--a resolves to {} items but --b to {}",
            a.len(),
            b.len()
        )));
    }
    let gts = collect(&args.ground_truth)?;
    if !(gts.is_empty() || gts.len() == 1 || gts.len() == a.len()) {
        return Err(CliError::Usage(format!(
            "expected 0, 1 or {} ground-truth files, got {}",
            a.len(),
            gts.len()
        )));
    }

    let mut pairs = Vec::with_capacity(a.len());
    for (idx, (x, y)) in a.iter().zip(&b).enumerate() {
        check_same_features(x, y)?;
        let gt = match gts.len() {
            0 => None,
            1 => Some(&gts[0]),
            _ => Some(&gts[idx]),
        };
        let frob = |p: &Item, q: &Item| -> CliResult<Option<f64>> {
            match (&p.weights, &q.weights) {
                (Some(u), Some(v)) => Ok(Some(frobenius_distance(u, v)?)),
                _ => Ok(None),
            }
        };
        let to_gt = |p: &Item| -> CliResult<Option<f64>> {
            match gt {
                Some(g) => {
                    check_same_features(p, g)?;
                    frob(p, g)
                }
                None => Ok(None),
            }
        };
        let tau = match (&x.importances, &y.importances) {
            (Some(r), Some(s)) => Some(weighted_tau(r, s)?),
            _ => None,
        };
        pairs.push(ComparedPair {
            a: x.label.clone(),
            b: y.label.clone(),
            frobenius_a_b: frob(x, y)?,
            weighted_tau: tau,
            frobenius_a_ground_truth: to_gt(x)?,
            frobenius_b_ground_truth: to_gt(y)?,
            steps_a: x.steps_to_converge,
            steps_b: y.steps_to_converge,
        });
    }
    let summary = CompareSummary {
        frobenius_a_b: summarize(pairs.iter().map(|p| p.frobenius_a_b)),
        weighted_tau: summarize(pairs.iter().map(|p| p.weighted_tau)),
        frobenius_a_ground_truth: summarize(pairs.iter().map(|p| p.frobenius_a_ground_truth)),
        frobenius_b_ground_truth: summarize(pairs.iter().map(|p| p.frobenius_b_ground_truth)),
        steps_a: summarize(pairs.iter().map(|p| p.steps_a.map(|s| s as f64))),
        steps_b: summarize(pairs.iter().map(|p| p.steps_b.map(|s| s as f64))),
    };
    let report = CompareReport {
        version: VERSION.into(),
        command: "compare".into(),
        pairs,
        summary,
    };
    write_json(&args.out, &report)?;
    Ok(())
}

// ---------------------------------------------------------------- univariate

fn parse_units(spec: &str, d: usize) -> CliResult<Vec<usize>> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok((0..d).collect());
    }
    let mut units = Vec::new();
    for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let u: usize = tok
            .parse()
            .map_err(|_| CliError::Usage(format!("bad unit index `{tok}`")))?;
        if u >= d {
            return Err(Error::IndexOutOfBounds { index: u, len: d }.into());
        }
        units.push(u);
    }
    if units.is_empty() {
        return Err(CliError::Usage("no units selected".into()));
    }
    Ok(units)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UnivariateReport {
    pub version: String,
    pub command: String,
    pub features: String,
    pub reps: String,
    pub config: ResolvedTraining,
    pub units: Vec<crate::train::UnitScore>,
    pub multivariate_test_spearman: f64,
    /// Over non-degenerate units; `None` if every unit was degenerate.
    pub max_univariate_test_spearman: Option<f64>,
    pub mean_univariate_test_spearman: Option<f64>,
    pub degenerate_units: Vec<usize>,
}

fn univariate(args: &UnivariateArgs) -> CliResult<()> {
    let (table, reps) = load_data(&args.data)?;
    let units = parse_units(&args.units, reps.d())?;
    let resolved = resolve_training(&args.train, &table)?;
    let eval = EvalConfig {
        max_pairs: resolved.eval_max_pairs,
        seed: derive_seed(resolved.split.seed, &[1]),
    };
    let cmp = univariate_comparison(&table, &reps, &units, &resolved.train, &resolved.split, &eval)?;
    let scores: Vec<f64> = cmp.units.iter().filter_map(|u| u.test_spearman).collect();
    let max = scores.iter().copied().reduce(f64::max);
    let mut csv = String::from("unit,test_spearman,steps_to_converge\n");
    for u in &cmp.units {
        // degenerate units leave both cells empty
        let score = u.test_spearman.map(|s| s.to_string()).unwrap_or_default();
        let steps = u.steps_to_converge.map(|s| s.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{score},{steps}\n", u.unit));
    }
    let report = UnivariateReport {
        version: VERSION.into(),
        command: "univariate".into(),
        features: display_path(&args.data.features),
        reps: display_path(&args.data.reps),
        config: resolved,
        multivariate_test_spearman: cmp.multivariate_test_spearman,
        max_univariate_test_spearman: max,
        mean_univariate_test_spearman: (!scores.is_empty()).then(|| mean_std(&scores).0),
        degenerate_units: cmp
            .units
            .iter()
            .filter(|u| u.test_spearman.is_none())
            .map(|u| u.unit)
            .collect(),
        units: cmp.units,
    };
    write_atomic(&args.out.join("univariate.csv"), csv.as_bytes())?;
    write_json(&args.out.join("univariate.json"), &report)?;
    println!(
        "multivariate {:.4}; best univariate {} over {} units ({} degenerate)",
        report.multivariate_test_spearman,
        max.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        report.units.len(),
        report.degenerate_units.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn batch_size_flag() {
        assert_eq!(parse_batch_size("auto"), Ok(BatchSizeArg::Auto));
        assert_eq!(parse_batch_size("128"), Ok(BatchSizeArg::Fixed(128)));
        assert!(parse_batch_size("0").is_err());
        assert!(parse_batch_size("lots").is_err());
    }

    #[test]
    fn kind_override_flag() {
        assert_eq!(
            parse_kind_override("a=b=ordinal").unwrap(),
            ("a=b".to_string(), FeatureKind::Ordinal)
        );
        assert!(parse_kind_override("size").is_err());
        assert!(parse_kind_override("size=float").is_err());
    }

    #[test]
    fn unit_lists() {
        assert_eq!(parse_units("all", 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_units("0, 2", 3).unwrap(), vec![0, 2]);
        assert_eq!(parse_units("3", 3).unwrap_err().exit_code(), 2);
        assert!(parse_units("", 3).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::DegenerateData("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::InvalidConfig("x".into())).exit_code(), 2);
        assert_eq!(CliError::Convergence("x".into()).exit_code(), 4);
    }

    #[test]
    fn convergence_rule() {
        let fold = |reason, best| FoldReport {
            fold: 0,
            n_train: 2,
            n_test: 2,
            test_spearman: 0.0,
            steps_to_converge: 10,
            stop_reason: reason,
            best_step: 0,
            best_objective: best,
            objective_trace: vec![],
            model_file: "model.json".into(),
            weights: WeightFile {
                variant: ModelVariant::Mlem,
                m: 1,
                feature_names: vec!["f".into()],
                w: vec![1.0],
            },
            frobenius_to_ground_truth: None,
        };
        assert!(check_convergence(&[fold(StopReason::MaxSteps, 0.01)]).is_err());
        assert!(check_convergence(&[fold(StopReason::MaxSteps, 0.5)]).is_ok());
        assert!(check_convergence(&[fold(StopReason::Patience, 0.01)]).is_ok());
    }
}
