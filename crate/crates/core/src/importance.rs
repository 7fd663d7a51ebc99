//! Permutation importance over features and feature interactions, and the
//! metrics used to compare weight matrices and importance profiles.
//!
//! A feature-distance vector `p` (length m) is expanded to one column per
//! entry of the upper triangle of `W`, ordered `(0,0), (0,1), ..., (0,m-1),
//! (1,1), ..., (m-1,m-1)`:
//!
//! ```text
//! P[(k,k)] = p_k * p_k
//! P[(k,l)] = 2 * p_k * p_l      (k < l)
//! ```
//!
//! so that `p^T W p = sum over (k,l) of W_kl * P[(k,l)]`. Each expanded column
//! is permuted independently across the sampled pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{MetricModel, ModelVariant, WeightMatrix};
use crate::pairs::PairBatch;
use crate::rng::derive_seed;
use crate::softrank::spearman_exact;
use crate::train::mean_std;

/// Default number of permutations per column.
pub const DEFAULT_PERMUTATIONS: usize = 10;

pub fn interaction_count(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Bijection between expanded column indices and `(k, l)` with `k <= l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionIndex {
    m: usize,
    pairs: Vec<(usize, usize)>,
}

impl InteractionIndex {
    pub fn new(m: usize) -> Self {
        let pairs = (0..m).flat_map(|k| (k..m).map(move |l| (k, l))).collect();
        InteractionIndex { m, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, column: usize) -> (usize, usize) {
        self.pairs[column]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn column(&self, k: usize, l: usize) -> usize {
        let (k, l) = if k <= l { (k, l) } else { (l, k) };
        k * self.m - k * k.saturating_sub(1) / 2 + (l - k)
    }

    /// Feature name for diagonal entries, `a × b` for interactions.
    pub fn names(&self, feature_names: &[String]) -> Vec<String> {
        self.pairs
            .iter()
            .map(|&(k, l)| {
                if k == l {
                    feature_names[k].clone()
                } else {
                    format!("{} × {}", feature_names[k], feature_names[l])
                }
            })
            .collect()
    }
}

pub fn expand_interactions_into(p: &[f64], out: &mut [f64]) {
    let m = p.len();
    debug_assert_eq!(out.len(), interaction_count(m));
    let mut c = 0;
    for k in 0..m {
        out[c] = p[k] * p[k];
        c += 1;
        for l in k + 1..m {
            out[c] = 2.0 * p[k] * p[l];
            c += 1;
        }
    }
}

pub fn expand_interactions(p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; interaction_count(p.len())];
    expand_interactions_into(p, &mut out);
    out
}

/// Upper-triangle weights in expanded-column order.
fn weight_vector(w: &WeightMatrix) -> Vec<f64> {
    InteractionIndex::new(w.m())
        .pairs()
        .iter()
        .map(|&(k, l)| w.matrix()[(k, l)])
        .collect()
}

#[inline]
fn link(radicand: f64, variant: ModelVariant) -> f64 {
    match variant {
        ModelVariant::Mlem => radicand.max(0.0).sqrt(),
        ModelVariant::Frrsai => radicand,
    }
}

/// The metric written as a function of the expanded vector.
pub fn h_w(expanded: &[f64], w: &WeightMatrix, variant: ModelVariant) -> Result<f64> {
    if expanded.len() != interaction_count(w.m()) {
        return Err(Error::DimensionMismatch(format!(
            "expanded vector has length {}, a {m}x{m} metric needs {}",
            expanded.len(),
            interaction_count(w.m()),
            m = w.m()
        )));
    }
    let radicand: f64 = weight_vector(w)
        .iter()
        .zip(expanded)
        .map(|(a, b)| a * b)
        .sum();
    Ok(link(radicand, variant))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub name: String,
    pub k: usize,
    pub l: usize,
    pub importance: f64,
    pub std: f64,
    pub per_permutation_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub feature_names: Vec<String>,
    pub variant: ModelVariant,
    pub baseline_score: f64,
    pub n_permutations: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceReport {
    pub fn importances(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.importance).collect()
    }

    /// Entries sorted by importance, largest first (stable on ties).
    pub fn ranked(&self) -> Vec<&ImportanceEntry> {
        let mut sorted: Vec<&ImportanceEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| b.importance.total_cmp(&a.importance));
        sorted
    }

    /// `name,importance,std` rows sorted by importance, descending.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("name,importance,std\n");
        for e in self.ranked() {
            let name = if e.name.contains(',') || e.name.contains('"') {
                format!("\"{}\"", e.name.replace('"', "\"\""))
            } else {
                e.name.clone()
            };
            out.push_str(&format!("{name},{},{}\n", e.importance, e.std));
        }
        out
    }
}

/// Permutation importance with seeded shuffles: column `c`, repetition `r`
/// uses the stream `derive_seed(seed, [c, r])`.
pub fn permutation_importance(
    model: &MetricModel,
    batch: &PairBatch,
    n_permutations: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    let mut report = permutation_importance_with(model, batch, n_permutations, |c, r, b| {
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[c as u64, r as u64],
        )));
        perm
    })?;
    report.seed = seed;
    Ok(report)
}

/// Permutation importance with caller-supplied permutations
/// (`permutation(column, repetition, batch_len)`).
pub fn permutation_importance_with<F>(
    model: &MetricModel,
    batch: &PairBatch,
    n_permutations: usize,
    permutation: F,
) -> Result<ImportanceReport>
where
    F: Fn(usize, usize, usize) -> Vec<usize> + Sync,
{
    let m = model.weights.m();
    if batch.m() != m {
        return Err(Error::DimensionMismatch(format!(
            "model has {m} features, batch has {}",
            batch.m()
        )));
    }
    if n_permutations == 0 {
        return Err(Error::InvalidConfig("need at least one permutation".into()));
    }
    let b = batch.len();
    let index = InteractionIndex::new(m);
    let mp = index.len();
    let weights = weight_vector(&model.weights);

    // b x mp expanded design, row-major
    let mut expanded = vec![0.0; b * mp];
    for (row, p) in expanded.chunks_exact_mut(mp).zip(batch.feature_rows()) {
        expand_interactions_into(p, row);
    }
    let radicands: Vec<f64> = expanded
        .chunks_exact(mp)
        .map(|row| row.iter().zip(&weights).map(|(x, w)| x * w).sum())
        .collect();
    let target = batch.neural_distances();
    let baseline_pred: Vec<f64> = radicands.iter().map(|&s| link(s, model.variant)).collect();
    let baseline = spearman_exact(&baseline_pred, target).map_err(|e| {
        Error::DegenerateData(format!("baseline score undefined: {e}"))
    })?;

    let names = index.names(&model.feature_names);
    let entries: Vec<Result<ImportanceEntry>> = (0..mp)
        .into_par_iter()
        .map(|c| {
            let mut scores = Vec::with_capacity(n_permutations);
            let mut pred = vec![0.0; b];
            for r in 0..n_permutations {
                let perm = permutation(c, r, b);
                if perm.len() != b {
                    return Err(Error::DimensionMismatch(format!(
                        "permutation of length {} for {b} pairs",
                        perm.len()
                    )));
                }
                for t in 0..b {
                    let swapped = expanded[perm[t] * mp + c] - expanded[t * mp + c];
                    pred[t] = link(radicands[t] + weights[c] * swapped, model.variant);
                }
                // a column permutation that flattens every prediction carries no rank information
                scores.push(spearman_exact(&pred, target).unwrap_or(0.0));
            }
            let drops: Vec<f64> = scores.iter().map(|s| baseline - s).collect();
            let (importance, std) = mean_std(&drops);
            let (k, l) = index.pair(c);
            Ok(ImportanceEntry {
                name: names[c].clone(),
                k,
                l,
                importance,
                std,
                per_permutation_scores: scores,
            })
        })
        .collect();

    Ok(ImportanceReport {
        feature_names: model.feature_names.clone(),
        variant: model.variant,
        baseline_score: baseline,
        n_permutations,
        n_pairs: b,
        seed: 0,
        entries: entries.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Entrywise Euclidean distance between two weight matrices.
pub fn frobenius_distance(a: &WeightMatrix, b: &WeightMatrix) -> Result<f64> {
    if a.m() != b.m() {
        return Err(Error::DimensionMismatch(format!(
            "cannot compare {}x{} and {}x{} matrices",
            a.m(),
            a.m(),
            b.m(),
            b.m()
        )));
    }
    Ok((a.matrix() - b.matrix()).norm())
}

/// Rank of each item by decreasing score, starting at 0; ties are broken by
/// item index.
fn descending_ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (rank, &item) in order.iter().enumerate() {
        ranks[item] = rank;
    }
    ranks
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn weighted_tau_one_side(r: &[f64], s: &[f64], ranks: &[usize]) -> f64 {
    let n = r.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let w = 1.0 / (ranks[i] as f64 + 1.0) + 1.0 / (ranks[j] as f64 + 1.0);
            num += w * sgn(r[i] - r[j]) * sgn(s[i] - s[j]);
            den += w;
        }
    }
    num / den
}

/// Symmetrized Kendall tau with additive hyperbolic weights.
pub fn weighted_tau(r: &[f64], s: &[f64]) -> Result<f64> {
    if r.len() != s.len() {
        return Err(Error::DimensionMismatch(format!(
            "score vectors have lengths {} and {}",
            r.len(),
            s.len()
        )));
    }
    if r.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two items".into()));
    }
    if r.iter().all(|v| *v == r[0]) || s.iter().all(|v| *v == s[0]) {
        return Err(Error::UndefinedCorrelation("all scores tied".into()));
    }
    let by_r = weighted_tau_one_side(r, s, &descending_ranks(r));
    let by_s = weighted_tau_one_side(r, s, &descending_ranks(s));
    Ok((by_r + by_s) / 2.0)
}
