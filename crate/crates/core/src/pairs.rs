//! Pair sampling, on-the-fly batch assembly and batch-size selection.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_aligned, FeatureTable, RepresentationSet};
use crate::error::{Error, Result};
use crate::importance::{expand_interactions_into, interaction_count};

/// Sampled pairs with their feature-distance rows and neural distances.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pairs: Vec<(usize, usize)>,
    m: usize,
    /// b x m, row-major
    features: Vec<f64>,
    neural: Vec<f64>,
}

impl PairBatch {
    pub fn from_parts(
        pairs: Vec<(usize, usize)>,
        m: usize,
        features: Vec<f64>,
        neural: Vec<f64>,
    ) -> Result<Self> {
        let b = pairs.len();
        if m == 0 || features.len() != b * m || neural.len() != b {
            return Err(Error::DimensionMismatch(format!(
                "batch of {b} pairs needs {} feature values and {b} neural distances, got {} and {}",
                b * m,
                features.len(),
                neural.len()
            )));
        }
        Ok(PairBatch {
            pairs,
            m,
            features,
            neural,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn feature_row(&self, t: usize) -> &[f64] {
        &self.features[t * self.m..(t + 1) * self.m]
    }

    pub fn feature_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.features.chunks_exact(self.m)
    }

    pub fn neural_distances(&self) -> &[f64] {
        &self.neural
    }
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Decodes a linear index into the lexicographic list of pairs `i < j`.
fn decode_pair(k: usize, n: usize) -> (usize, usize) {
    // pairs before row i: i*n - i*(i+1)/2
    let before = |i: usize| i * n - i * (i + 1) / 2;
    let nf = n as f64;
    let disc = (2.0 * nf - 1.0).powi(2) - 8.0 * k as f64;
    let mut i = (((2.0 * nf - 1.0) - disc.max(0.0).sqrt()) / 2.0).floor() as usize;
    i = i.min(n - 2);
    while i > 0 && before(i) > k {
        i -= 1;
    }
    while i + 1 < n - 1 && before(i + 1) <= k {
        i += 1;
    }
    (i, i + 1 + k - before(i))
}

/// Every unordered pair `i < j` of `0..n`, lexicographically.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// `b` distinct pairs drawn uniformly without replacement; all pairs when
/// `b` reaches the total.
pub fn sample_pairs<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total = pair_count(n);
    if b >= total {
        return all_pairs(n);
    }
    rand::seq::index::sample(rng, total, b)
        .into_iter()
        .map(|k| decode_pair(k, n))
        .collect()
}

/// Feature and neural distances for the given pairs, computed on demand.
pub fn assemble_batch(
    table: &FeatureTable,
    reps: &RepresentationSet,
    pairs: &[(usize, usize)],
) -> Result<PairBatch> {
    check_aligned(table, reps)?;
    let n = table.n();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= j || j >= n) {
        return Err(Error::InvalidConfig(format!(
            "pair ({i}, {j}) is not an ordered pair of stimuli below {n}"
        )));
    }
    let m = table.m();
    let mut features = vec![0.0; pairs.len() * m];
    let mut neural = vec![0.0; pairs.len()];
    features
        .par_chunks_mut(m)
        .zip(neural.par_iter_mut())
        .zip(pairs.par_iter())
        .with_min_len(256)
        .for_each(|((row, dn), &(i, j))| {
            table.distance_vector_into(i, j, row);
            *dn = reps.distance_unchecked(i, j);
        });
    PairBatch::from_parts(pairs.to_vec(), m, features, neural)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeParams {
    pub num_probe_batches: usize,
    pub initial_size: usize,
    pub growth: f64,
    pub std_threshold: f64,
    /// Upper bound on the batch size; `None` means the total pair count.
    pub max_size: Option<usize>,
}

impl Default for BatchSizeParams {
    fn default() -> Self {
        BatchSizeParams {
            num_probe_batches: 64,
            initial_size: 4096,
            growth: 1.2,
            std_threshold: 0.01,
            max_size: None,
        }
    }
}

impl BatchSizeParams {
    fn validate(&self) -> Result<()> {
        if self.num_probe_batches < 2 {
            return Err(Error::InvalidConfig(
                "batch-size selection needs at least 2 probe batches".into(),
            ));
        }
        if self.initial_size == 0 || self.max_size == Some(0) {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if !(self.growth > 1.0 && self.growth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "growth factor must exceed 1, got {}",
                self.growth
            )));
        }
        if self.std_threshold.is_nan() || self.std_threshold <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "std threshold must be positive, got {}",
                self.std_threshold
            )));
        }
        Ok(())
    }
}

/// Outcome of the probe procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeSelection {
    pub batch_size: usize,
    /// False when the cap was reached without meeting the threshold.
    pub threshold_met: bool,
    /// `(size, worst correlation std)` for each size probed.
    pub probes: Vec<(usize, f64)>,
}

/// Smallest size in `b0, ceil(b0 g), ceil(b0 g^2), ...` (capped) whose
/// within-batch correlations between expanded feature columns have a
/// standard deviation below the threshold across the probe batches.
pub fn select_batch_size<R: Rng + ?Sized>(
    table: &FeatureTable,
    params: &BatchSizeParams,
    rng: &mut R,
) -> Result<BatchSizeSelection> {
    params.validate()?;
    let n = table.n();
    let total = pair_count(n);
    let cap = params.max_size.unwrap_or(total).min(total).max(1);
    if params.std_threshold.is_infinite() {
        return Ok(BatchSizeSelection {
            batch_size: params.initial_size.min(cap),
            threshold_met: true,
            probes: Vec::new(),
        });
    }

    let mut probes = Vec::new();
    let mut t = 0i32;
    loop {
        let raw = (params.initial_size as f64 * params.growth.powi(t)).ceil() as usize;
        let size = raw.min(cap);
        let worst = correlation_variability(table, size, params.num_probe_batches, rng);
        probes.push((size, worst));
        if worst < params.std_threshold {
            return Ok(BatchSizeSelection {
                batch_size: size,
                threshold_met: true,
                probes,
            });
        }
        if size >= cap {
            warn!(
                "batch-size threshold {} never met; using cap {cap} (worst std {worst:.4})",
                params.std_threshold
            );
            return Ok(BatchSizeSelection {
                batch_size: cap,
                threshold_met: false,
                probes,
            });
        }
        t += 1;
    }
}

/// Worst (largest) across-probe standard deviation of any pairwise column
/// correlation. Correlations undefined in more than half the probes count
/// as infinitely unstable.
fn correlation_variability<R: Rng + ?Sized>(
    table: &FeatureTable,
    size: usize,
    probes: usize,
    rng: &mut R,
) -> f64 {
    let n = table.n();
    let batches: Vec<Vec<(usize, usize)>> = (0..probes).map(|_| sample_pairs(n, size, rng)).collect();
    let per_batch: Vec<Vec<f64>> = batches
        .par_iter()
        .map(|pairs| column_correlations(table, pairs))
        .collect();
    let count = per_batch[0].len();
    let mut worst: f64 = 0.0;
    for c in 0..count {
        let defined: Vec<f64> = per_batch
            .iter()
            .map(|v| v[c])
            .filter(|v| !v.is_nan())
            .collect();
        if 2 * (probes - defined.len()) > probes || defined.len() < 2 {
            return f64::INFINITY;
        }
        worst = worst.max(sample_std(&defined));
    }
    worst
}

fn sample_std(values: &[f64]) -> f64 {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
}

/// Upper-triangle Pearson correlations between expanded columns within one
/// batch (`NaN` where a column has zero variance).
fn column_correlations(table: &FeatureTable, pairs: &[(usize, usize)]) -> Vec<f64> {
    let m = table.m();
    let mp = interaction_count(m);
    let b = pairs.len();
    let mut z = DMatrix::<f64>::zeros(b, mp);
    let mut p = vec![0.0; m];
    let mut expanded = vec![0.0; mp];
    for (t, &(i, j)) in pairs.iter().enumerate() {
        table.distance_vector_into(i, j, &mut p);
        expand_interactions_into(&p, &mut expanded);
        for (c, v) in expanded.iter().enumerate() {
            z[(t, c)] = *v;
        }
    }
    let mut valid = vec![true; mp];
    for (c, mut col) in z.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if norm <= 1e-12 * (b as f64).sqrt() {
            valid[c] = false;
        } else {
            col /= norm;
        }
    }
    let gram = z.tr_mul(&z);
    let mut out = Vec::with_capacity(mp * (mp - 1) / 2);
    for a in 0..mp {
        for c in a + 1..mp {
            out.push(if valid[a] && valid[c] {
                gram[(a, c)].clamp(-1.0, 1.0)
            } else {
                f64::NAN
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureKind, FeatureValue};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn binary_table(n: usize, m: usize, seed: u64) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let columns = (0..m)
            .map(|k| {
                let values = (0..n)
                    .map(|_| FeatureValue::label(if rng.random_bool(0.5) { "A" } else { "B" }))
                    .collect();
                (format!("f{k}"), FeatureKind::Nominal, values)
            })
            .collect();
        FeatureTable::from_columns((0..n).map(|i| format!("s{i}")).collect(), columns).unwrap()
    }

    fn random_reps(n: usize, d: usize, seed: u64) -> RepresentationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RepresentationSet::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn decode_covers_all_pairs() {
        for n in 2..40 {
            let expected = all_pairs(n);
            let decoded: Vec<_> = (0..pair_count(n)).map(|k| decode_pair(k, n)).collect();
            assert_eq!(decoded, expected);
        }
    }

    #[test]
    fn exhaustive_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs: HashSet<_> = sample_pairs(3, 3, &mut rng).into_iter().collect();
        assert_eq!(pairs, [(0, 1), (0, 2), (1, 2)].into_iter().collect());
        assert_eq!(sample_pairs(3, 10, &mut rng).len(), 3);
    }

    #[test]
    fn sample_is_distinct_and_reproducible() {
        let a = sample_pairs(256, 4096, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_pairs(256, 4096, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let set: HashSet<_> = a.iter().copied().collect();
        assert_eq!(set.len(), 4096);
        assert!(a.iter().all(|&(i, j)| i < j && j < 256));
    }

    #[test]
    fn identical_stimuli_give_zero_row() {
        let table = FeatureTable::from_columns(
            vec!["a".into(), "b".into()],
            vec![(
                "g".into(),
                FeatureKind::Nominal,
                vec![FeatureValue::label("A"), FeatureValue::label("A")],
            )],
        )
        .unwrap();
        let reps = RepresentationSet::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let batch = assemble_batch(&table, &reps, &[(0, 1)]).unwrap();
        assert_eq!(batch.feature_row(0), &[0.0]);
        assert_eq!(batch.neural_distances(), &[0.0]);
    }

    #[test]
    fn one_differing_feature() {
        let table = FeatureTable::from_columns(
            vec!["a".into(), "b".into()],
            vec![
                (
                    "g".into(),
                    FeatureKind::Nominal,
                    vec![FeatureValue::label("A"), FeatureValue::label("B")],
                ),
                (
                    "h".into(),
                    FeatureKind::Nominal,
                    vec![FeatureValue::label("X"), FeatureValue::label("X")],
                ),
            ],
        )
        .unwrap();
        let reps = RepresentationSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let batch = assemble_batch(&table, &reps, &[(0, 1)]).unwrap();
        assert_eq!(batch.feature_row(0), &[1.0, 0.0]);
    }

    #[test]
    fn assemble_errors() {
        let table = binary_table(4, 2, 0);
        assert!(assemble_batch(&table, &random_reps(5, 2, 0), &[(0, 1)]).is_err());
        assert!(assemble_batch(&table, &random_reps(4, 2, 0), &[(1, 0)]).is_err());
        assert!(assemble_batch(&table, &random_reps(4, 2, 0), &[(1, 4)]).is_err());
    }

    #[test]
    fn full_batch_matches_materialized_rdms() {
        let n = 24;
        let table = binary_table(n, 3, 1);
        let reps = random_reps(n, 5, 2);
        // materialize both dissimilarity matrices independently
        let mut feature_rdm = vec![vec![vec![0.0; n]; n]; 3];
        let mut neural_rdm = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for (k, rdm) in feature_rdm.iter_mut().enumerate() {
                    rdm[i][j] = table.feature_distance(k, i, j).unwrap();
                }
                neural_rdm[i][j] = reps
                    .row(i)
                    .iter()
                    .zip(reps.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let batch = assemble_batch(&table, &reps, &all_pairs(n)).unwrap();
        assert_eq!(batch.len(), n * (n - 1) / 2);
        for (t, &(i, j)) in batch.pairs().iter().enumerate() {
            for (k, rdm) in feature_rdm.iter().enumerate() {
                assert_eq!(batch.feature_row(t)[k], rdm[i][j]);
            }
            assert!((batch.neural_distances()[t] - neural_rdm[i][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn infinite_threshold_returns_initial_size() {
        let table = binary_table(64, 3, 3);
        let params = BatchSizeParams {
            std_threshold: f64::INFINITY,
            initial_size: 100,
            ..Default::default()
        };
        let sel = select_batch_size(&table, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(sel.batch_size, 100);
    }

    #[test]
    fn selected_size_is_on_the_growth_grid() {
        let table = binary_table(64, 3, 4);
        let params = BatchSizeParams {
            initial_size: 50,
            std_threshold: 0.05,
            num_probe_batches: 16,
            ..Default::default()
        };
        let sel = select_batch_size(&table, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cap = pair_count(64);
        let on_grid = (0..60).any(|t| (50.0 * 1.2f64.powi(t)).ceil() as usize == sel.batch_size);
        assert!(on_grid || sel.batch_size == cap, "{}", sel.batch_size);
    }

    #[test]
    fn looser_threshold_never_larger() {
        let table = binary_table(48, 3, 6);
        let base = BatchSizeParams {
            initial_size: 40,
            num_probe_batches: 12,
            ..Default::default()
        };
        let mut last = usize::MAX;
        for sigma in [0.01, 0.03, 0.06, 0.1, 0.3] {
            let params = BatchSizeParams {
                std_threshold: sigma,
                ..base
            };
            let sel = select_batch_size(&table, &params, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert!(sel.batch_size <= last);
            last = sel.batch_size;
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let table = binary_table(8, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for params in [
            BatchSizeParams {
                growth: 1.0,
                ..Default::default()
            },
            BatchSizeParams {
                num_probe_batches: 1,
                ..Default::default()
            },
            BatchSizeParams {
                std_threshold: 0.0,
                ..Default::default()
            },
        ] {
            assert!(select_batch_size(&table, &params, &mut rng).is_err());
        }
    }

    #[test]
    fn constant_feature_hits_cap_with_warning() {
        let table_cols = vec![
            (
                "c".to_string(),
                FeatureKind::Nominal,
                vec![FeatureValue::label("A"); 20],
            ),
            (
                "v".to_string(),
                FeatureKind::Ordinal,
                (0..20).map(|i| FeatureValue::Number(i as f64)).collect(),
            ),
        ];
        let table =
            FeatureTable::from_columns((0..20).map(|i| format!("s{i}")).collect(), table_cols)
                .unwrap();
        let params = BatchSizeParams {
            initial_size: 10,
            num_probe_batches: 8,
            ..Default::default()
        };
        let sel = select_batch_size(&table, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(sel.batch_size, pair_count(20));
        assert!(!sel.threshold_met);
    }
}
