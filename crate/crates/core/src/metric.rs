//! The learned weight matrix, its parametrizations and analytic gradients.
//!
//! Two variants share one unconstrained parameter matrix `A`:
//!
//! * `Mlem`: `L` is the lower triangle of `A` with `softplus` on the
//!   diagonal, `W = L L^T` (SPD by construction), and a pair with feature
//!   distances `p` is predicted at `sqrt(p^T W p)`.
//! * `Frrsai`: `W = (A + A^T) / 2` with no sign constraint; the prediction is
//!   the raw quadratic form `p^T W p`, which is rank-equivalent to the square
//!   root wherever the latter is defined.
//!
//! In both cases the forward pass uses `W / ||W||_F` and the gradient is
//! propagated through that normalization.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::PairBatch;
use crate::softrank::{average_ranks, spearman_soft_ranked, SoftRankConfig};
use crate::train::{minmax_scale, MinMaxState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Mlem,
    Frrsai,
}

impl ModelVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::Mlem => "mlem",
            ModelVariant::Frrsai => "frrsai",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlem" => Ok(ModelVariant::Mlem),
            "frrsai" => Ok(ModelVariant::Frrsai),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant `{other}` (expected mlem or frrsai)"
            ))),
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unconstrained parameters `A` (m x m).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams {
    pub a: DMatrix<f64>,
    pub variant: ModelVariant,
}

impl MetricParams {
    pub fn new(a: DMatrix<f64>, variant: ModelVariant) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "parameter matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateParameters("non-finite parameter".into()));
        }
        Ok(MetricParams { a, variant })
    }

    /// Uniform in `[-1/sqrt(m), 1/sqrt(m)]`, the usual dense-layer initialization.
    pub fn init<R: Rng + ?Sized>(m: usize, variant: ModelVariant, rng: &mut R) -> Self {
        let bound = 1.0 / (m as f64).sqrt();
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-bound..bound));
        MetricParams { a, variant }
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }
}

/// Symmetric m x m weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(pub DMatrix<f64>);

impl WeightMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::DimensionMismatch("weight matrix must be square".into()));
        }
        Ok(WeightMatrix(w))
    }

    pub fn from_row_major(m: usize, values: &[f64]) -> Result<Self> {
        if values.len() != m * m {
            return Err(Error::DimensionMismatch(format!(
                "expected {} weights for m={m}, got {}",
                m * m,
                values.len()
            )));
        }
        WeightMatrix::new(DMatrix::from_row_slice(m, m, values))
    }

    pub fn identity(m: usize) -> Self {
        WeightMatrix(DMatrix::identity(m, m))
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let m = self.m();
        (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| self.0[(i, j)])
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.0 - self.0.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.0 + self.0.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    /// `p^T W p`.
    #[inline]
    pub fn quadratic_form(&self, p: &[f64]) -> f64 {
        let m = self.m();
        let mut acc = 0.0;
        for k in 0..m {
            if p[k] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (l, pl) in p.iter().enumerate() {
                row += self.0[(k, l)] * pl;
            }
            acc += p[k] * row;
        }
        acc
    }

    /// `||p||_W = sqrt(p^T W p)`, radicand clamped at zero.
    pub fn weighted_norm(&self, p: &[f64]) -> f64 {
        self.quadratic_form(p).max(0.0).sqrt()
    }
}

/// `A -> W`: Cholesky-style product for MLEM, symmetrization for FR-RSA-I.
pub fn build_weights(params: &MetricParams) -> WeightMatrix {
    match params.variant {
        ModelVariant::Mlem => {
            let l = cholesky_factor(&params.a);
            WeightMatrix(&l * l.transpose())
        }
        ModelVariant::Frrsai => WeightMatrix((&params.a + params.a.transpose()) * 0.5),
    }
}

/// Lower-triangular factor with softplus-positive diagonal.
pub fn cholesky_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    DMatrix::from_fn(m, m, |i, j| {
        if i > j {
            a[(i, j)]
        } else if i == j {
            softplus(a[(i, i)])
        } else {
            0.0
        }
    })
}

pub fn normalize_frobenius(w: &WeightMatrix) -> Result<WeightMatrix> {
    let norm = w.frobenius_norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateParameters(format!(
            "cannot normalize weight matrix with Frobenius norm {norm}"
        )));
    }
    Ok(WeightMatrix(&w.0 / norm))
}

fn check_batch_dim(w: &WeightMatrix, batch: &PairBatch) -> Result<()> {
    if w.m() != batch.m() {
        return Err(Error::DimensionMismatch(format!(
            "weight matrix is {m}x{m} but batch has {} features",
            batch.m(),
            m = w.m()
        )));
    }
    Ok(())
}

/// Predicted distances for every row of the batch.
pub fn predict_distances(
    w: &WeightMatrix,
    batch: &PairBatch,
    variant: ModelVariant,
) -> Result<Vec<f64>> {
    check_batch_dim(w, batch)?;
    Ok(batch
        .feature_rows()
        .map(|p| predict_one(w, p, variant))
        .collect())
}

#[inline]
pub fn predict_one(w: &WeightMatrix, p: &[f64], variant: ModelVariant) -> f64 {
    match variant {
        ModelVariant::Mlem => w.weighted_norm(p),
        ModelVariant::Frrsai => w.quadratic_form(p),
    }
}

/// A trained (or loaded) metric: normalized weights plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    pub variant: ModelVariant,
    pub feature_names: Vec<String>,
    pub weights: WeightMatrix,
}

impl MetricModel {
    pub fn from_params(params: &MetricParams, feature_names: Vec<String>) -> Result<Self> {
        if feature_names.len() != params.m() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature names for a {}-dimensional metric",
                feature_names.len(),
                params.m()
            )));
        }
        Ok(MetricModel {
            variant: params.variant,
            feature_names,
            weights: normalize_frobenius(&build_weights(params))?,
        })
    }

    pub fn predict(&self, batch: &PairBatch) -> Result<Vec<f64>> {
        predict_distances(&self.weights, batch, self.variant)
    }

    pub fn to_file(&self) -> WeightFile {
        WeightFile {
            variant: self.variant,
            m: self.weights.m(),
            feature_names: self.feature_names.clone(),
            w: self.weights.to_row_major(),
        }
    }

    pub fn from_file(file: &WeightFile) -> Result<Self> {
        if file.feature_names.len() != file.m {
            return Err(Error::DimensionMismatch(format!(
                "weight file declares m={} but lists {} feature names",
                file.m,
                file.feature_names.len()
            )));
        }
        Ok(MetricModel {
            variant: file.variant,
            feature_names: file.feature_names.clone(),
            weights: WeightMatrix::from_row_major(file.m, &file.w)?,
        })
    }
}

/// On-disk weight matrix: `{"variant", "m", "feature_names", "W"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub variant: ModelVariant,
    pub m: usize,
    pub feature_names: Vec<String>,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
}

/// Result of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub objective: f64,
    /// Gradient of the objective (to be maximized) with respect to `A`.
    pub grad: DMatrix<f64>,
    /// Targets were constant after scaling; the step must be skipped.
    pub skip: bool,
    /// Soft ranks of the predictions collapsed.
    pub degenerate: bool,
}

/// Soft-Spearman objective of the normalized metric on one batch and its
/// gradient with respect to the unconstrained parameters.
pub fn objective_and_gradient(
    params: &MetricParams,
    batch: &PairBatch,
    cfg: &SoftRankConfig,
    scaler: &mut MinMaxState,
) -> Result<ObjectiveEval> {
    let m = params.m();
    if batch.is_empty() {
        return Err(Error::DegenerateData("empty batch".into()));
    }
    if batch.m() != m {
        return Err(Error::DimensionMismatch(format!(
            "parameters are {m}x{m} but batch has {} features",
            batch.m()
        )));
    }

    let (scaled, constant) = minmax_scale(batch.neural_distances(), scaler);
    if constant {
        return Ok(ObjectiveEval {
            objective: 0.0,
            grad: DMatrix::zeros(m, m),
            skip: true,
            degenerate: false,
        });
    }

    let raw = build_weights(params);
    let norm = raw.frobenius_norm();
    let w = normalize_frobenius(&raw)?;
    let pred = predict_distances(&w, batch, params.variant)?;
    let soft = spearman_soft_ranked(&pred, &average_ranks(&scaled), cfg);

    // d obj / d q_t where q_t = p_t^T W_n p_t
    let dq: Vec<f64> = match params.variant {
        ModelVariant::Mlem => pred
            .iter()
            .zip(&soft.grad)
            .map(|(&y, &g)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
            .collect(),
        ModelVariant::Frrsai => soft.grad.clone(),
    };

    let mut g_norm = DMatrix::<f64>::zeros(m, m);
    for (p, &g) in batch.feature_rows().zip(&dq) {
        if g == 0.0 {
            continue;
        }
        for k in 0..m {
            if p[k] == 0.0 {
                continue;
            }
            let gk = g * p[k];
            for l in 0..m {
                g_norm[(k, l)] += gk * p[l];
            }
        }
    }

    // through W_n = W / ||W||_F
    let inner = raw.0.dot(&g_norm);
    let g_w = &g_norm / norm - &raw.0 * (inner / (norm * norm * norm));

    let grad = match params.variant {
        ModelVariant::Mlem => {
            let l = cholesky_factor(&params.a);
            let g_l = (&g_w + g_w.transpose()) * &l;
            DMatrix::from_fn(m, m, |i, j| {
                if i > j {
                    g_l[(i, j)]
                } else if i == j {
                    g_l[(i, i)] * sigmoid(params.a[(i, i)])
                } else {
                    0.0
                }
            })
        }
        ModelVariant::Frrsai => (&g_w + g_w.transpose()) * 0.5,
    };

    Ok(ObjectiveEval {
        objective: soft.value,
        grad,
        skip: false,
        degenerate: soft.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch_from_rows(rows: &[Vec<f64>], neural: &[f64]) -> PairBatch {
        let pairs = (0..rows.len()).map(|t| (t, t + 1)).collect();
        PairBatch::from_parts(pairs, rows[0].len(), rows.concat(), neural.to_vec()).unwrap()
    }

    #[test]
    fn softplus_is_stable() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(1000.0), 1000.0, epsilon = 1e-12);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn mlem_zero_params() {
        let w = build_weights(&MetricParams::new(DMatrix::zeros(2, 2), ModelVariant::Mlem).unwrap());
        let ln2sq = std::f64::consts::LN_2.powi(2);
        assert_abs_diff_eq!(w.0[(0, 0)], ln2sq, epsilon = 1e-15);
        assert_abs_diff_eq!(w.0[(1, 1)], ln2sq, epsilon = 1e-15);
        assert_eq!(w.0[(0, 1)], 0.0);
        assert!((ln2sq - 0.4805).abs() < 1e-4);
    }

    #[test]
    fn frrsai_symmetrizes() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 4.0, 0.0, 0.0]);
        let w = build_weights(&MetricParams::new(a, ModelVariant::Frrsai).unwrap());
        assert_eq!(w.0, DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]));
        assert!(w.min_eigenvalue() < 0.0);
    }

    #[test]
    fn normalization() {
        let w = WeightMatrix(DMatrix::identity(2, 2) * 2.0);
        let n = normalize_frobenius(&w).unwrap();
        assert_abs_diff_eq!(n.0[(0, 0)], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(
            normalize_frobenius(&WeightMatrix(DMatrix::zeros(2, 2))),
            Err(Error::DegenerateParameters(_))
        ));
    }

    #[test]
    fn normalization_preserves_rank_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let params = MetricParams::init(4, ModelVariant::Mlem, &mut rng);
            let w = build_weights(&params);
            let rows: Vec<Vec<f64>> = (0..30)
                .map(|_| (0..4).map(|_| rng.random_range(0.0..2.0)).collect())
                .collect();
            let batch = batch_from_rows(&rows, &vec![1.0; 30]);
            let before = predict_distances(&w, &batch, ModelVariant::Mlem).unwrap();
            let after =
                predict_distances(&normalize_frobenius(&w).unwrap(), &batch, ModelVariant::Mlem)
                    .unwrap();
            let argsort = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
                idx
            };
            assert_eq!(argsort(&before), argsort(&after));
        }
    }

    #[test]
    fn prediction_examples() {
        let batch = batch_from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 1.0]], &[1.0, 2.0, 3.0]);
        let mlem = predict_distances(&WeightMatrix::identity(2), &batch, ModelVariant::Mlem).unwrap();
        assert_eq!(&mlem[..2], &[5.0, 0.0]);
        let w = WeightMatrix(DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0]));
        let fr = predict_distances(&w, &batch, ModelVariant::Frrsai).unwrap();
        assert_eq!(fr, vec![9.0 - 48.0 + 16.0, 0.0, -2.0]);
        assert!(predict_distances(&WeightMatrix::identity(3), &batch, ModelVariant::Mlem).is_err());
    }

    #[test]
    fn weight_file_round_trip() {
        let model = MetricModel {
            variant: ModelVariant::Mlem,
            feature_names: vec!["a".into(), "b".into()],
            weights: WeightMatrix::from_row_major(2, &[1.0, 0.5, 0.5, 2.0]).unwrap(),
        };
        let json = serde_json::to_value(model.to_file()).unwrap();
        assert_eq!(json["variant"], "mlem");
        assert_eq!(json["W"][1], 0.5);
        let back = MetricModel::from_file(&serde_json::from_value(json).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    fn fd_check(variant: ModelVariant, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(2..6);
        let b = rng.random_range(8..40);
        let params = MetricParams::init(m, variant, &mut rng);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let neural: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..3.0)).collect();
        let batch = batch_from_rows(&rows, &neural);
        let cfg = SoftRankConfig::default();
        let eval = objective_and_gradient(&params, &batch, &cfg, &mut MinMaxState::default()).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let mut plus = params.clone();
                plus.a[(i, j)] += h;
                let mut minus = params.clone();
                minus.a[(i, j)] -= h;
                let fp = objective_and_gradient(&plus, &batch, &cfg, &mut MinMaxState::default())
                    .unwrap()
                    .objective;
                let fm = objective_and_gradient(&minus, &batch, &cfg, &mut MinMaxState::default())
                    .unwrap()
                    .objective;
                let fd = (fp - fm) / (2.0 * h);
                let g = eval.grad[(i, j)];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            assert!(fd_check(ModelVariant::Mlem, seed) < 1e-4);
            assert!(fd_check(ModelVariant::Frrsai, seed) < 1e-4);
        }
    }

    #[test]
    fn self_consistent_batch_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = MetricParams::init(3, ModelVariant::Mlem, &mut rng);
        let w = normalize_frobenius(&build_weights(&params)).unwrap();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let neural: Vec<f64> = rows.iter().map(|p| w.weighted_norm(p)).collect();
        let batch = batch_from_rows(&rows, &neural);
        let cfg = SoftRankConfig::new(1e-6).unwrap();
        let eval = objective_and_gradient(&params, &batch, &cfg, &mut MinMaxState::default()).unwrap();
        assert!(eval.objective > 0.999);
        assert!(eval.grad.amax() < 1e-6);
    }

    #[test]
    fn constant_targets_signal_skip() {
        let batch = batch_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[2.0, 2.0]);
        let params = MetricParams::new(DMatrix::zeros(2, 2), ModelVariant::Mlem).unwrap();
        let eval = objective_and_gradient(
            &params,
            &batch,
            &SoftRankConfig::default(),
            &mut MinMaxState::default(),
        )
        .unwrap();
        assert!(eval.skip);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mlem_params(m: usize) -> impl Strategy<Value = MetricParams> {
            proptest::collection::vec(-3.0f64..3.0, m * m).prop_map(move |v| {
                MetricParams::new(DMatrix::from_row_slice(m, m, &v), ModelVariant::Mlem).unwrap()
            })
        }

        proptest! {
            #[test]
            fn mlem_weights_are_spd(params in (1usize..7).prop_flat_map(mlem_params)) {
                let w = normalize_frobenius(&build_weights(&params)).unwrap();
                prop_assert!(w.max_asymmetry() < 1e-12);
                prop_assert!(w.min_eigenvalue() > 0.0);
                prop_assert!((w.frobenius_norm() - 1.0).abs() < 1e-12);
                prop_assert!(w.0.clone().cholesky().is_some());
            }

            #[test]
            fn weighted_norm_is_a_norm(
                params in mlem_params(4),
                p in proptest::collection::vec(0.0f64..5.0, 4),
                q in proptest::collection::vec(0.0f64..5.0, 4),
                c in 0.0f64..10.0,
            ) {
                let w = normalize_frobenius(&build_weights(&params)).unwrap();
                let sum: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a + b).collect();
                prop_assert!(w.weighted_norm(&sum) <= w.weighted_norm(&p) + w.weighted_norm(&q) + 1e-9);
                let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
                prop_assert!((w.weighted_norm(&scaled) - c * w.weighted_norm(&p)).abs() < 1e-9);
            }
        }
    }
}
