//! Synthetic datasets with a planted SPD metric.
//!
//! Pipeline: fair-coin binary features, a random unit-Frobenius SPD matrix
//! `W_gt`, ground-truth distances `sqrt(p^T W_gt p)`, a classical (Torgerson)
//! MDS embedding of those distances, then Gaussian noise scaled per column.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureTable, FeatureValue, RepresentationSet};
use crate::error::{Error, Result};
use crate::metric::{normalize_frobenius, WeightMatrix};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 256,
            m: 16,
            d: 768,
            noise_level: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 1 || self.d < 1 {
            return Err(Error::InvalidConfig(format!(
                "synthetic data needs n >= 2, m >= 1, d >= 1 (got n={}, m={}, d={})",
                self.n, self.m, self.d
            )));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise level must be a nonnegative number, got {}",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Random SPD matrix with unit Frobenius norm: `G G^T + 1e-3 m I`, normalized.
pub fn make_spd<R: Rng + ?Sized>(m: usize, rng: &mut R) -> WeightMatrix {
    let g = DMatrix::<f64>::from_fn(m, m, |_, _| rng.sample(StandardNormal));
    let gram = &g * g.transpose() + DMatrix::<f64>::identity(m, m) * (1e-3 * m as f64);
    // symmetrize away round-off from the product
    let sym = (&gram + gram.transpose()) * 0.5;
    normalize_frobenius(&WeightMatrix(sym)).expect("ridge keeps the Gram matrix nonzero")
}

/// `n x m` nominal table of independent fair coins labelled `A` / `B`.
pub fn sample_binary_features<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<FeatureTable> {
    let mut columns: Vec<Vec<FeatureValue>> = vec![Vec::with_capacity(n); m];
    for _ in 0..n {
        for col in columns.iter_mut() {
            col.push(FeatureValue::label(if rng.random_bool(0.5) { "A" } else { "B" }));
        }
    }
    FeatureTable::from_columns(
        (0..n).map(|i| format!("s{i}")).collect(),
        columns
            .into_iter()
            .enumerate()
            .map(|(k, values)| (format!("f{k}"), FeatureKind::Nominal, values))
            .collect(),
    )
}

/// Ground-truth distances `sqrt(p_ij^T W p_ij)` evaluated on demand.
#[derive(Debug, Clone)]
pub struct GroundTruthDistances<'a> {
    table: &'a FeatureTable,
    weights: &'a WeightMatrix,
}

impl GroundTruthDistances<'_> {
    pub fn n(&self) -> usize {
        self.table.n()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let mut p = vec![0.0; self.table.m()];
        self.table.distance_vector_into(i, j, &mut p);
        self.weights.weighted_norm(&p)
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let d = self.distance(i, j);
                out[(i, j)] = d;
                out[(j, i)] = d;
            }
        }
        out
    }
}

pub fn ground_truth_distances<'a>(
    table: &'a FeatureTable,
    weights: &'a WeightMatrix,
) -> Result<GroundTruthDistances<'a>> {
    if weights.m() != table.m() {
        return Err(Error::DimensionMismatch(format!(
            "ground-truth metric is {m}x{m} but the table has {} features",
            table.m(),
            m = weights.m()
        )));
    }
    Ok(GroundTruthDistances { table, weights })
}

/// Embedding plus how faithfully it reproduces the input distances.
#[derive(Debug, Clone)]
pub struct MdsEmbedding {
    pub coords: DMatrix<f64>,
    /// Number of strictly positive eigenvalues of the centered Gram matrix.
    pub positive_eigenvalues: usize,
    /// Positive eigenvalues discarded because `d` was too small.
    pub truncated: usize,
    /// Sum of |negative eigenvalues| over sum of |all eigenvalues|.
    pub negative_mass: f64,
    pub fidelity: EmbeddingFidelity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFidelity {
    /// max over pairs of |d_embed - d| / d, over pairs with d > 0 (up to round-off)
    pub max_relative_error: f64,
    /// max over pairs of |d_embed - d| / max d
    pub max_scaled_error: f64,
}

/// Torgerson MDS: `B = -1/2 J D^2 J`, keep nonnegative eigenvalues in
/// decreasing order, coordinates `v * sqrt(lambda)`, truncated or
/// zero-padded to `d` columns.
pub fn classical_mds(distances: &DMatrix<f64>, d: usize) -> Result<MdsEmbedding> {
    let n = distances.nrows();
    if !distances.is_square() || n < 2 {
        return Err(Error::DimensionMismatch(
            "distance matrix must be square with at least 2 rows".into(),
        ));
    }
    let max_d = distances.amax();
    for i in 0..n {
        if distances[(i, i)].abs() > 1e-12 * max_d.max(1.0) {
            return Err(Error::InvalidConfig("distance matrix diagonal must be zero".into()));
        }
        for j in 0..n {
            let (a, b) = (distances[(i, j)], distances[(j, i)]);
            if a < 0.0 || !a.is_finite() || (a - b).abs() > 1e-12 * max_d.max(1.0) {
                return Err(Error::InvalidConfig(
                    "distance matrix must be symmetric, finite and nonnegative".into(),
                ));
            }
        }
    }
    if d == 0 {
        return Err(Error::InvalidConfig("target dimension must be positive".into()));
    }

    let sq = distances.map(|v| v * v);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let grand = sq.mean();
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));

    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let tol = scale * n as f64 * f64::EPSILON;
    let positive: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&k| eig.eigenvalues[k] > tol)
        .collect();
    let total_abs: f64 = eig.eigenvalues.iter().map(|v| v.abs()).sum();
    let negative: f64 = eig
        .eigenvalues
        .iter()
        .filter(|v| **v < -tol)
        .map(|v| v.abs())
        .sum();

    let kept = positive.len().min(d);
    let mut coords = DMatrix::zeros(n, d);
    for (c, &k) in positive.iter().take(kept).enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        for i in 0..n {
            coords[(i, c)] = eig.eigenvectors[(i, k)] * s;
        }
    }
    let truncated = positive.len() - kept;
    if truncated > 0 {
        warn!("MDS truncated {truncated} positive eigenvalues to fit {d} dimensions");
    }

    let fidelity = embedding_fidelity(distances, &coords);
    Ok(MdsEmbedding {
        coords,
        positive_eigenvalues: positive.len(),
        truncated,
        negative_mass: if total_abs > 0.0 { negative / total_abs } else { 0.0 },
        fidelity,
    })
}

pub fn embedding_fidelity(distances: &DMatrix<f64>, coords: &DMatrix<f64>) -> EmbeddingFidelity {
    let n = distances.nrows();
    let max_d = distances.amax();
    let mut rel: f64 = 0.0;
    let mut scaled: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let emb = (coords.row(i) - coords.row(j)).norm();
            let target = distances[(i, j)];
            let err = (emb - target).abs();
            // duplicate stimuli: round-off in the eigenvectors only shows in the scaled error
            if target > 1e-9 * max_d {
                rel = rel.max(err / target);
            }
            if max_d > 0.0 {
                scaled = scaled.max(err / max_d);
            }
        }
    }
    EmbeddingFidelity {
        max_relative_error: rel,
        max_scaled_error: scaled,
    }
}

/// `Y + level * diag(sigma) * E` with `sigma_j` the sample std (n - 1) of column j.
pub fn add_noise<R: Rng + ?Sized>(y: &DMatrix<f64>, level: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise level must be nonnegative, got {level}"
        )));
    }
    let n = y.nrows();
    let mut out = y.clone();
    if level == 0.0 || n < 2 {
        return Ok(out);
    }
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let column = y.column(j);
        let mean = column.mean();
        let sigma = (column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        for v in col.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += level * sigma * e;
        }
    }
    Ok(out)
}

/// Ground truth stored alongside a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub feature_names: Vec<String>,
    pub m: usize,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub mds: MdsSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdsSummary {
    pub positive_eigenvalues: usize,
    pub truncated: usize,
    pub negative_mass: f64,
    pub fidelity: EmbeddingFidelity,
}

impl GroundTruth {
    pub fn weights(&self) -> Result<WeightMatrix> {
        WeightMatrix::from_row_major(self.m, &self.w)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub table: FeatureTable,
    pub reps: RepresentationSet,
    pub ground_truth: GroundTruth,
    pub weights: WeightMatrix,
}

/// Features, ground-truth metric, embedding and noise, each drawn from its
/// own stream derived from `config.seed`.
pub fn generate_dataset(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[k]));
    let table = sample_binary_features(config.n, config.m, &mut stream(0))?;
    let weights = make_spd(config.m, &mut stream(1));
    let distances = ground_truth_distances(&table, &weights)?.matrix();
    let embedding = classical_mds(&distances, config.d)?;
    let noisy = add_noise(&embedding.coords, config.noise_level, &mut stream(2))?;
    let mut data = Vec::with_capacity(config.n * config.d);
    for i in 0..config.n {
        data.extend(noisy.row(i).iter());
    }
    let reps = RepresentationSet::new(config.n, config.d, data)?;
    let ground_truth = GroundTruth {
        config: *config,
        feature_names: table.feature_names(),
        m: config.m,
        w: weights.to_row_major(),
        mds: MdsSummary {
            positive_eigenvalues: embedding.positive_eigenvalues,
            truncated: embedding.truncated,
            negative_mass: embedding.negative_mass,
            fidelity: embedding.fidelity,
        },
    };
    Ok(SyntheticDataset {
        table,
        reps,
        ground_truth,
        weights,
    })
}
