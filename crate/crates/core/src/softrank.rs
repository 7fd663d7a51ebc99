//! Exact and differentiable Spearman correlation.
//!
//! The soft rank of `x` is the Euclidean projection of `x / eps` onto the
//! permutahedron of `(1, ..., n)`. Sorting `z = x / eps` in decreasing order
//! (`s = z[order]`, `w = (n, n-1, ..., 1)`) reduces the projection to one
//! isotonic regression:
//!
//! ```text
//! soft_rank(x)[order] = s + iso(w - s)
//! ```
//!
//! where `iso` is the nondecreasing least-squares fit computed by
//! pool-adjacent-violators. Inside each pooled block the Jacobian of `iso`
//! is the block-averaging matrix, which gives the pullback in closed form.
//! Larger inputs receive larger ranks; as `eps -> 0` the output tends to the
//! hard ranks and as `eps -> inf` every entry tends to `(n + 1) / 2`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SoftRankConfig {
    /// Relaxation strength; smaller is closer to hard ranks.
    pub regularization: f64,
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        SoftRankConfig {
            regularization: 1.0,
        }
    }
}

impl SoftRankConfig {
    pub fn new(regularization: f64) -> Result<Self> {
        if !(regularization > 0.0 && regularization.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "soft-rank regularization must be positive and finite, got {regularization}"
            )));
        }
        Ok(SoftRankConfig { regularization })
    }
}

/// Half-open index range `[start, end)` pooled into one value by PAV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub end: usize,
}

/// Pool-adjacent-violators; returns the fit and its pooled blocks.
pub fn isotonic_with_blocks(y: &[f64]) -> (Vec<f64>, Vec<Block>) {
    // (sum, count, start) per block on a stack
    let mut stack: Vec<(f64, usize, usize)> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        stack.push((v, 1, i));
        while stack.len() >= 2 {
            let (s2, c2, _) = stack[stack.len() - 1];
            let (s1, c1, _) = stack[stack.len() - 2];
            if s1 / c1 as f64 > s2 / c2 as f64 {
                stack.pop();
                let top = stack.last_mut().unwrap();
                top.0 = s1 + s2;
                top.1 = c1 + c2;
            } else {
                break;
            }
        }
    }
    let mut fit = Vec::with_capacity(y.len());
    let mut blocks = Vec::with_capacity(stack.len());
    for (sum, count, start) in stack {
        let mean = sum / count as f64;
        fit.extend(std::iter::repeat_n(mean, count));
        blocks.push(Block {
            start,
            end: start + count,
        });
    }
    (fit, blocks)
}

/// Euclidean projection of `y` onto the cone of nondecreasing vectors.
pub fn isotonic_regression(y: &[f64]) -> Vec<f64> {
    isotonic_with_blocks(y).0
}

/// Everything needed to evaluate a soft rank and pull gradients back through it.
#[derive(Debug, Clone)]
struct SoftRankSolution {
    ranks: Vec<f64>,
    /// `order[t]` is the index of the t-th largest input.
    order: Vec<usize>,
    blocks: Vec<Block>,
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn solve_soft_rank(x: &[f64], cfg: &SoftRankConfig) -> SoftRankSolution {
    let n = x.len();
    let inv_eps = 1.0 / cfg.regularization;
    let order = descending_order(x);
    let sorted: Vec<f64> = order.iter().map(|&i| x[i] * inv_eps).collect();
    let residual: Vec<f64> = sorted
        .iter()
        .enumerate()
        .map(|(t, &s)| (n - t) as f64 - s)
        .collect();
    let (fit, blocks) = isotonic_with_blocks(&residual);
    let mut ranks = vec![0.0; n];
    for (t, &i) in order.iter().enumerate() {
        ranks[i] = sorted[t] + fit[t];
    }
    SoftRankSolution {
        ranks,
        order,
        blocks,
    }
}

fn pullback_with(sol: &SoftRankSolution, cfg: &SoftRankConfig, upstream: &[f64]) -> Vec<f64> {
    let n = sol.ranks.len();
    let inv_eps = 1.0 / cfg.regularization;
    let permuted: Vec<f64> = sol.order.iter().map(|&i| upstream[i]).collect();
    let mut grad = vec![0.0; n];
    for block in &sol.blocks {
        let slice = &permuted[block.start..block.end];
        let mean = slice.iter().sum::<f64>() / slice.len() as f64;
        for t in block.start..block.end {
            grad[sol.order[t]] = (permuted[t] - mean) * inv_eps;
        }
    }
    grad
}

/// Differentiable ranks in `[1, n]` summing to `n (n + 1) / 2`.
pub fn soft_rank(x: &[f64], cfg: &SoftRankConfig) -> Vec<f64> {
    solve_soft_rank(x, cfg).ranks
}

/// Vector-Jacobian product of [`soft_rank`] at `x`.
pub fn soft_rank_pullback(x: &[f64], cfg: &SoftRankConfig, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != x.len() {
        return Err(Error::DimensionMismatch(format!(
            "upstream has length {}, input has length {}",
            upstream.len(),
            x.len()
        )));
    }
    Ok(pullback_with(&solve_soft_rank(x, cfg), cfg, upstream))
}

/// Ascending ranks starting at 1, ties receiving the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (c, norm)
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let (ac, na) = centered(a);
    let (bc, nb) = centered(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = ac.iter().zip(&bc).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "need at least two observations".into(),
        ));
    }
    Ok(())
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

/// Spearman correlation with midranks for ties.
pub fn spearman_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    if is_constant(a) || is_constant(b) {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
        .ok_or_else(|| Error::UndefinedCorrelation("zero rank variance".into()))
}

/// Value and gradient of the relaxed Spearman objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSpearman {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Soft ranks of the predictions were constant; value and gradient are zero.
    pub degenerate: bool,
}

/// Pearson correlation between `soft_rank(pred)` and the midranks of `target`,
/// with its gradient with respect to `pred`.
pub fn spearman_soft(pred: &[f64], target: &[f64], cfg: &SoftRankConfig) -> Result<SoftSpearman> {
    check_pair(pred, target)?;
    if is_constant(target) {
        return Err(Error::UndefinedCorrelation("constant target vector".into()));
    }
    Ok(spearman_soft_ranked(pred, &average_ranks(target), cfg))
}

/// Same as [`spearman_soft`] with the target ranks precomputed.
pub fn spearman_soft_ranked(pred: &[f64], target_ranks: &[f64], cfg: &SoftRankConfig) -> SoftSpearman {
    let n = pred.len();
    let sol = solve_soft_rank(pred, cfg);
    let (rc, nr) = centered(&sol.ranks);
    let (tc, nt) = centered(target_ranks);
    if nr <= f64::EPSILON * n as f64 || nt == 0.0 {
        return SoftSpearman {
            value: 0.0,
            grad: vec![0.0; n],
            degenerate: true,
        };
    }
    let dot: f64 = rc.iter().zip(&tc).map(|(x, y)| x * y).sum();
    let value = dot / (nr * nt);
    // d/dr of <rc, tc> / (|rc| |tc|); centering is absorbed because tc and rc are centered
    let upstream: Vec<f64> = rc
        .iter()
        .zip(&tc)
        .map(|(r, t)| t / (nr * nt) - value * r / (nr * nr))
        .collect();
    SoftSpearman {
        value: value.clamp(-1.0, 1.0),
        grad: pullback_with(&sol, cfg, &upstream),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn isotonic_examples() {
        assert_eq!(isotonic_regression(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(isotonic_regression(&[3.0, 1.0, 2.0]), vec![2.0, 2.0, 2.0]);
        assert!(isotonic_regression(&[]).is_empty());
    }

    #[test]
    fn isotonic_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let y = random_vec(&mut rng, 17);
            let fit = isotonic_regression(&y);
            let a: f64 = y.iter().sum();
            let b: f64 = fit.iter().sum();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_rank_limits() {
        let x = [0.3, -1.2, 2.5, 0.9];
        let hard = soft_rank(&x, &SoftRankConfig::new(1e-6).unwrap());
        for (got, want) in hard.iter().zip([2.0, 1.0, 4.0, 3.0]) {
            assert!((got - want).abs() < 1e-4);
        }
        let flat = soft_rank(&x, &SoftRankConfig::new(1e6).unwrap());
        for v in flat {
            assert!((v - 2.5).abs() < 1e-5);
        }
        let sum: f64 = soft_rank(&x, &SoftRankConfig::default()).iter().sum();
        assert!((sum - 10.0).abs() < 1e-12);
    }

    #[test]
    fn soft_rank_single_element() {
        let cfg = SoftRankConfig::default();
        assert_eq!(soft_rank(&[4.2], &cfg), vec![1.0]);
        assert_eq!(soft_rank_pullback(&[4.2], &cfg, &[3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn pullback_vanishes_for_separated_values() {
        let cfg = SoftRankConfig::new(1e-3).unwrap();
        let g = soft_rank_pullback(&[0.0, 1.0, 2.0, 3.0], &cfg, &[1.0, -2.0, 0.5, 4.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = SoftRankConfig::new(0.7).unwrap();
        let h = 1e-5;
        for _ in 0..30 {
            let n = rng.random_range(2..12);
            let x = random_vec(&mut rng, n);
            let u = random_vec(&mut rng, n);
            let g = soft_rank_pullback(&x, &cfg, &u).unwrap();
            for i in 0..n {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fp: f64 = soft_rank(&xp, &cfg).iter().zip(&u).map(|(a, b)| a * b).sum();
                let fm: f64 = soft_rank(&xm, &cfg).iter().zip(&u).map(|(a, b)| a * b).sum();
                let fd = (fp - fm) / (2.0 * h);
                let denom = g[i].abs().max(fd.abs()).max(1e-6);
                assert!((g[i] - fd).abs() / denom < 1e-4, "{} vs {}", g[i], fd);
            }
        }
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 3.0]), vec![3.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman_exact(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_exact(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks (1.5, 1.5, 3) vs (1, 2, 3): centered (-0.5, -0.5, 1) and (-1, 0, 1)
        let expected = 1.5 / (1.5f64.sqrt() * 2f64.sqrt());
        assert!((spearman_exact(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman_exact(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman_exact(&[1.0], &[1.0]).is_err());
        assert!(spearman_exact(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman_soft(&[1.0, 2.0], &[3.0, 3.0], &SoftRankConfig::default()).is_err());
    }

    #[test]
    fn soft_spearman_monotone_agreement() {
        let cfg = SoftRankConfig::new(1e-6).unwrap();
        let out = spearman_soft(&[0.1, 0.5, 0.7, 2.0], &[1.0, 2.0, 3.0, 4.0], &cfg).unwrap();
        assert!((out.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn soft_spearman_degenerate_flag() {
        let cfg = SoftRankConfig::default();
        let out = spearman_soft(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], &cfg).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn soft_spearman_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SoftRankConfig::default();
        let pred = random_vec(&mut rng, 9);
        let target = random_vec(&mut rng, 9);
        let perm = [3, 8, 0, 5, 1, 7, 2, 6, 4];
        let pp: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
        let tp: Vec<f64> = perm.iter().map(|&i| target[i]).collect();
        let a = spearman_soft(&pred, &target, &cfg).unwrap();
        let b = spearman_soft(&pp, &tp, &cfg).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for (t, &i) in perm.iter().enumerate() {
            assert!((b.grad[t] - a.grad[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_spearman_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..40 {
            let n = rng.random_range(3..20);
            let cfg = SoftRankConfig::new(rng.random_range(0.2..3.0)).unwrap();
            let pred = random_vec(&mut rng, n);
            let target = random_vec(&mut rng, n);
            let out = spearman_soft(&pred, &target, &cfg).unwrap();
            for i in 0..n {
                let mut p = pred.clone();
                p[i] += h;
                let fp = spearman_soft(&p, &target, &cfg).unwrap().value;
                p[i] -= 2.0 * h;
                let fm = spearman_soft(&p, &target, &cfg).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let denom = out.grad[i].abs().max(fd.abs()).max(1e-6);
                assert!((out.grad[i] - fd).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn soft_spearman_approaches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = SoftRankConfig::new(1e-8).unwrap();
        for _ in 0..20 {
            let pred = random_vec(&mut rng, 15);
            let target = random_vec(&mut rng, 15);
            let soft = spearman_soft(&pred, &target, &cfg).unwrap().value;
            let exact = spearman_exact(&pred, &target).unwrap();
            assert!((soft - exact).abs() < 1e-6);
        }
    }

    mod props {
        use super::*;
        use proptest::{prelude::any, prop_assert, prop_assume, proptest};

        proptest! {
            #[test]
            fn isotonic_monotone_and_idempotent(y in proptest::collection::vec(-100.0f64..100.0, 0..40)) {
                let fit = isotonic_regression(&y);
                prop_assert!(fit.windows(2).all(|w| w[0] <= w[1] + 1e-12));
                let again = isotonic_regression(&fit);
                for (a, b) in fit.iter().zip(&again) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
                }
            }

            #[test]
            fn soft_rank_in_permutahedron(x in proptest::collection::vec(-50.0f64..50.0, 1..40), eps in 0.01f64..10.0) {
                let cfg = SoftRankConfig::new(eps).unwrap();
                let r = soft_rank(&x, &cfg);
                let n = x.len() as f64;
                let sum: f64 = r.iter().sum();
                prop_assert!((sum - n * (n + 1.0) / 2.0).abs() < 1e-9);
                for v in &r {
                    prop_assert!(*v >= 1.0 - 1e-9 && *v <= n + 1e-9);
                }
                for i in 0..x.len() {
                    for j in 0..x.len() {
                        if x[i] > x[j] {
                            prop_assert!(r[i] >= r[j] - 1e-9);
                        }
                    }
                }
            }

            #[test]
            fn spearman_invariant_under_increasing_maps(
                a in proptest::collection::vec(-5.0f64..5.0, 3..30),
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b: Vec<f64> = a.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
                prop_assume!(!is_constant(&a) && !is_constant(&b));
                let r = spearman_exact(&a, &b).unwrap();
                let a2: Vec<f64> = a.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
                let b2: Vec<f64> = b.iter().map(|v| v * v * v).collect();
                prop_assert!((spearman_exact(&a2, &b2).unwrap() - r).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }

            #[test]
            fn soft_spearman_value_in_range(
                pred in proptest::collection::vec(-5.0f64..5.0, 2..30),
                seed in any::<u64>(),
                eps in 0.01f64..5.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let target: Vec<f64> = pred.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
                prop_assume!(!is_constant(&target));
                let out = spearman_soft(&pred, &target, &SoftRankConfig::new(eps).unwrap()).unwrap();
                prop_assert!((-1.0..=1.0).contains(&out.value));
            }
        }
    }
}
