//! Stochastic training loop, held-out evaluation and cross-validation.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_aligned, FeatureTable, RepresentationSet};
use crate::error::{Error, Result};
use crate::metric::{objective_and_gradient, MetricModel, MetricParams, ModelVariant};
use crate::pairs::{assemble_batch, pair_count, sample_pairs};
use crate::rng::derive_seed;
use crate::softrank::{spearman_exact, SoftRankConfig};

/// Minimum gain in the batch objective that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-5;

/// Default cap on the number of held-out pairs scored by [`evaluate`].
pub const DEFAULT_EVAL_MAX_PAIRS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub softrank: SoftRankConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            patience: 50,
            max_steps: 1000,
            batch_size: 4096,
            softrank: SoftRankConfig::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.patience == 0 || self.max_steps == 0 || self.batch_size == 0 {
            return bad("patience, max_steps and batch_size must be at least 1".into());
        }
        if self.weight_decay != 0.0 {
            return bad(format!("weight decay is fixed at 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("Adam epsilon must be positive".into());
        }
        SoftRankConfig::new(self.softrank.regularization).map(|_| ())
    }
}

/// Running extremes of the neural distances seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxState {
    pub running_min: f64,
    pub running_max: f64,
}

impl Default for MinMaxState {
    fn default() -> Self {
        MinMaxState {
            running_min: f64::INFINITY,
            running_max: f64::NEG_INFINITY,
        }
    }
}

impl MinMaxState {
    pub fn is_initialized(&self) -> bool {
        self.running_min <= self.running_max
    }
}

/// Online min-max scaling into `[0, 1]`. The state absorbs this batch's
/// extremes before scaling. The flag is set when the running range is empty
/// or the batch itself is constant.
pub fn minmax_scale(values: &[f64], state: &mut MinMaxState) -> (Vec<f64>, bool) {
    for &v in values {
        state.running_min = state.running_min.min(v);
        state.running_max = state.running_max.max(v);
    }
    let range = state.running_max - state.running_min;
    let batch_constant = values.iter().all(|v| *v == values[0]);
    if range.is_nan() || range <= 0.0 {
        return (vec![0.0; values.len()], true);
    }
    let scaled = values
        .iter()
        .map(|v| ((v - state.running_min) / range).clamp(0.0, 1.0))
        .collect();
    (scaled, batch_constant)
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
    pub steps: i32,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            first: DMatrix::zeros(rows, cols),
            second: DMatrix::zeros(rows, cols),
            steps: 0,
        }
    }
}

/// One AdamW update minimizing a loss whose gradient is `grads`.
pub fn adamw_step(
    params: &mut DMatrix<f64>,
    grads: &DMatrix<f64>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.shape() != grads.shape() || params.shape() != state.first.shape() {
        return Err(Error::DimensionMismatch(format!(
            "params {:?}, grads {:?}, optimizer state {:?}",
            params.shape(),
            grads.shape(),
            state.first.shape()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step: state.steps as usize + 1,
            max_abs: grads.iter().fold(0.0, |a: f64, g| a.max(g.abs())),
        });
    }
    state.steps += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.steps);
    let c2 = 1.0 - b2.powi(state.steps);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        *p -= cfg.learning_rate * cfg.weight_decay * *p;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `None` when the batch had constant targets and the step was skipped.
    pub batch_objective: Option<f64>,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub steps_to_converge: usize,
    pub stop_reason: StopReason,
    pub best_step: usize,
    pub best_objective: f64,
}

/// Parameters and normalized metric from a training run, with the split used.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: MetricModel,
    pub params: MetricParams,
    pub train_stimuli: Vec<usize>,
    pub test_stimuli: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    Holdout { train_fraction: f64 },
    KFold { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub mode: SplitMode,
    pub seed: u64,
}

impl SplitSpec {
    pub fn holdout(seed: u64) -> Self {
        SplitSpec {
            mode: SplitMode::Holdout {
                train_fraction: 0.8,
            },
            seed,
        }
    }

    pub fn kfold(k: usize, seed: u64) -> Self {
        SplitSpec {
            mode: SplitMode::KFold { k },
            seed,
        }
    }

    /// Partitions stimuli `0..n` into train/test folds. Index lists are sorted.
    pub fn partition(&self, n: usize) -> Result<Vec<Fold>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        match self.mode {
            SplitMode::Holdout { train_fraction } => {
                if !(train_fraction > 0.0 && train_fraction < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "train fraction must lie in (0, 1), got {train_fraction}"
                    )));
                }
                let n_train = (train_fraction * n as f64).round() as usize;
                if n_train < 2 || n - n_train < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "holdout split of {n} stimuli leaves {n_train} train / {} test; both need at least 2",
                        n - n_train
                    )));
                }
                let mut train = order[..n_train].to_vec();
                let mut test = order[n_train..].to_vec();
                train.sort_unstable();
                test.sort_unstable();
                Ok(vec![Fold { train, test }])
            }
            SplitMode::KFold { k } => {
                if k < 2 || n < k {
                    return Err(Error::InvalidConfig(format!(
                        "cannot form {k} folds from {n} stimuli"
                    )));
                }
                if n / k < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "folds of {} stimuli are too small to form pairs",
                        n / k
                    )));
                }
                Ok((0..k)
                    .map(|f| {
                        let mut test: Vec<usize> =
                            order.iter().skip(f).step_by(k).copied().collect();
                        test.sort_unstable();
                        let mut train: Vec<usize> = (0..n)
                            .filter(|i| test.binary_search(i).is_err())
                            .collect();
                        train.sort_unstable();
                        Fold { train, test }
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Trains on the pairs among `train` (global stimulus indices, sorted
/// ascending). Only rows listed in `train` are ever read.
pub fn fit_on(
    table: &FeatureTable,
    reps: &RepresentationSet,
    train: &[usize],
    variant: ModelVariant,
    config: &TrainConfig,
) -> Result<(MetricParams, TrainTrace)> {
    config.validate()?;
    check_aligned(table, reps)?;
    if train.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 training stimuli, got {}",
            train.len()
        )));
    }
    if train.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(
            "training indices must be strictly increasing".into(),
        ));
    }
    table.check_stimulus(*train.last().unwrap())?;
    let all_equal = {
        let first = reps.row(train[0]);
        train.iter().all(|&i| reps.row(i) == first)
    };
    if all_equal {
        return Err(Error::DegenerateData(
            "all neural distances among training stimuli are equal".into(),
        ));
    }

    let m = table.m();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MetricParams::init(m, variant, &mut rng);
    let mut adam = AdamState::new(m, m);
    let mut scaler = MinMaxState::default();
    let batch_size = config.batch_size.min(pair_count(train.len()));

    let mut records = Vec::with_capacity(config.max_steps.min(4096));
    let mut best = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut best_step = 0;
    let mut stale = 0usize;
    let mut stop_reason = StopReason::MaxSteps;

    for step in 1..=config.max_steps {
        let pairs: Vec<(usize, usize)> = sample_pairs(train.len(), batch_size, &mut rng)
            .into_iter()
            .map(|(i, j)| (train[i], train[j]))
            .collect();
        let batch = assemble_batch(table, reps, &pairs)?;
        let eval = objective_and_gradient(&params, &batch, &config.softrank, &mut scaler)?;

        let objective = (!eval.skip).then_some(eval.objective);
        match objective {
            Some(obj) if obj > best + IMPROVEMENT_THRESHOLD => {
                best = obj;
                best_params = params.clone();
                best_step = step;
                stale = 0;
            }
            _ => stale += 1,
        }
        records.push(StepRecord {
            step,
            batch_objective: objective,
            best_so_far: best,
        });
        if stale >= config.patience {
            stop_reason = StopReason::Patience;
            break;
        }
        if step == config.max_steps {
            break;
        }
        if !eval.skip {
            let loss_grad = -eval.grad;
            adamw_step(&mut params.a, &loss_grad, &mut adam, config)?;
        }
    }

    if best == f64::NEG_INFINITY {
        return Err(Error::DegenerateData(
            "every training batch had constant neural distances".into(),
        ));
    }
    let trace = TrainTrace {
        steps_to_converge: records.len(),
        records,
        stop_reason,
        best_step,
        best_objective: best,
    };
    Ok((best_params, trace))
}

/// Trains one model on the first fold of `split` (the only fold for holdout).
pub fn fit(
    table: &FeatureTable,
    reps: &RepresentationSet,
    variant: ModelVariant,
    config: &TrainConfig,
    split: &SplitSpec,
) -> Result<(TrainedModel, TrainTrace)> {
    check_aligned(table, reps)?;
    let fold = split.partition(table.n())?.swap_remove(0);
    train_fold(table, reps, variant, config, fold)
}

fn train_fold(
    table: &FeatureTable,
    reps: &RepresentationSet,
    variant: ModelVariant,
    config: &TrainConfig,
    fold: Fold,
) -> Result<(TrainedModel, TrainTrace)> {
    let (params, trace) = fit_on(table, reps, &fold.train, variant, config)?;
    let model = MetricModel::from_params(&params, table.feature_names())?;
    Ok((
        TrainedModel {
            model,
            params,
            train_stimuli: fold.train,
            test_stimuli: fold.test,
        },
        trace,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_pairs: DEFAULT_EVAL_MAX_PAIRS,
            seed: 0,
        }
    }
}

/// Pairs among `stimuli` (sorted global indices), subsampled uniformly when
/// there are more than `max_pairs`.
pub fn pairs_among(stimuli: &[usize], max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted = stimuli.to_vec();
    sorted.sort_unstable();
    sample_pairs(sorted.len(), max_pairs, &mut rng)
        .into_iter()
        .map(|(i, j)| (sorted[i], sorted[j]))
        .collect()
}

/// Exact Spearman between predicted and empirical distances over pairs of
/// held-out stimuli.
pub fn evaluate(
    model: &MetricModel,
    table: &FeatureTable,
    reps: &RepresentationSet,
    test_stimuli: &[usize],
    eval: &EvalConfig,
) -> Result<f64> {
    if test_stimuli.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "evaluation needs at least 2 test stimuli, got {}",
            test_stimuli.len()
        )));
    }
    let pairs = pairs_among(test_stimuli, eval.max_pairs, eval.seed);
    let batch = assemble_batch(table, reps, &pairs)?;
    let pred = model.predict(&batch)?;
    spearman_exact(&pred, batch.neural_distances()).map_err(|e| match e {
        Error::UndefinedCorrelation(msg) => {
            Error::DegenerateData(format!("held-out distances are degenerate: {msg}"))
        }
        other => other,
    })
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub trained: TrainedModel,
    pub trace: TrainTrace,
    pub test_score: f64,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub mean_score: f64,
    pub std_score: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

/// Trains and scores one model per fold of `split`. Folds run in parallel
/// with per-fold seeds derived from `config.seed`.
pub fn run_folds(
    table: &FeatureTable,
    reps: &RepresentationSet,
    variant: ModelVariant,
    config: &TrainConfig,
    split: &SplitSpec,
    eval: &EvalConfig,
) -> Result<CrossValidation> {
    check_aligned(table, reps)?;
    let folds = split.partition(table.n())?;
    let single = folds.len() == 1;
    let results: Vec<Result<FoldResult>> = folds
        .into_par_iter()
        .enumerate()
        .map(|(f, fold)| {
            let mut cfg = config.clone();
            if !single {
                cfg.seed = derive_seed(config.seed, &[f as u64]);
            }
            let (trained, trace) = train_fold(table, reps, variant, &cfg, fold)?;
            let test_score = evaluate(&trained.model, table, reps, &trained.test_stimuli, eval)?;
            Ok(FoldResult {
                fold: f,
                trained,
                trace,
                test_score,
            })
        })
        .collect();
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = folds.iter().map(|f| f.test_score).collect();
    let (mean_score, std_score) = mean_std(&scores);
    Ok(CrossValidation {
        folds,
        mean_score,
        std_score,
    })
}

/// k-fold cross-validation over stimuli.
pub fn cross_validate(
    table: &FeatureTable,
    reps: &RepresentationSet,
    variant: ModelVariant,
    config: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<CrossValidation> {
    run_folds(
        table,
        reps,
        variant,
        config,
        &SplitSpec::kfold(k, seed),
        &EvalConfig::default(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub unit: usize,
    /// `None` when the unit's distances are constant on the train or test split.
    pub test_spearman: Option<f64>,
    pub steps_to_converge: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateComparison {
    pub units: Vec<UnitScore>,
    pub multivariate_test_spearman: f64,
}

/// One MLEM per representation unit plus the multivariate reference, all on
/// the same (first) fold of `split` and the same configuration.
pub fn univariate_comparison(
    table: &FeatureTable,
    reps: &RepresentationSet,
    units: &[usize],
    config: &TrainConfig,
    split: &SplitSpec,
    eval: &EvalConfig,
) -> Result<UnivariateComparison> {
    check_aligned(table, reps)?;
    for &u in units {
        if u >= reps.d() {
            return Err(Error::IndexOutOfBounds {
                index: u,
                len: reps.d(),
            });
        }
    }
    let fold = split.partition(table.n())?.swap_remove(0);
    let score_for = |r: &RepresentationSet| -> Result<(f64, usize)> {
        let (trained, trace) = train_fold(table, r, ModelVariant::Mlem, config, fold.clone())?;
        let score = evaluate(&trained.model, table, r, &trained.test_stimuli, eval)?;
        Ok((score, trace.steps_to_converge))
    };
    let (multivariate, _) = score_for(reps)?;
    let scored: Vec<Result<UnitScore>> = units
        .par_iter()
        .map(|&unit| {
            let slice = reps.univariate_slice(unit)?;
            let (test_spearman, steps_to_converge) = match score_for(&slice) {
                Ok((score, steps)) => (Some(score), Some(steps)),
                Err(Error::DegenerateData(_)) => (None, None),
                Err(e) => return Err(e),
            };
            Ok(UnitScore {
                unit,
                test_spearman,
                steps_to_converge,
            })
        })
        .collect();
    Ok(UnivariateComparison {
        units: scored.into_iter().collect::<Result<Vec<_>>>()?,
        multivariate_test_spearman: multivariate,
    })
}
