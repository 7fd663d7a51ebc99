use std::collections::HashSet;

use mlem::data::RepresentationSet;
use mlem::metric::ModelVariant;
use mlem::pairs::sample_pairs;
use mlem::synth::{generate_dataset, SynthConfig};
use mlem::train::{run_folds, univariate_comparison, EvalConfig, SplitSpec, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn holdout_score(cfg: &SynthConfig, variant: ModelVariant) -> f64 {
    let data = generate_dataset(cfg).unwrap();
    let train = TrainConfig {
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    run_folds(
        &data.table,
        &data.reps,
        variant,
        &train,
        &SplitSpec::holdout(cfg.seed),
        &EvalConfig::default(),
    )
    .unwrap()
    .mean_score
}

#[test]
fn noiseless_synthetic_is_encoded_well() {
    let cfg = SynthConfig {
        n: 128,
        m: 4,
        d: 32,
        noise_level: 0.0,
        seed: 1,
    };
    let score = holdout_score(&cfg, ModelVariant::Mlem);
    assert!(score >= 0.9, "held-out spearman {score}");
}

#[test]
fn heavy_noise_lowers_held_out_score() {
    let base = SynthConfig {
        n: 128,
        m: 4,
        d: 32,
        noise_level: 0.0,
        seed: 2,
    };
    let clean = holdout_score(&base, ModelVariant::Mlem);
    let noisy = holdout_score(
        &SynthConfig {
            noise_level: 2.0,
            ..base
        },
        ModelVariant::Mlem,
    );
    assert!(noisy < clean, "noise 2 gave {noisy}, noise 0 gave {clean}");
}

#[test]
fn seeds_give_distinct_unit_norm_ground_truths() {
    let mut seen = Vec::new();
    for seed in 0..5 {
        let data = generate_dataset(&SynthConfig {
            n: 16,
            m: 4,
            d: 8,
            noise_level: 0.0,
            seed,
        })
        .unwrap();
        assert!((data.weights.frobenius_norm() - 1.0).abs() < 1e-12);
        assert!(data.weights.min_eigenvalue() > 0.0);
        assert!(!seen.contains(&data.ground_truth.w));
        seen.push(data.ground_truth.w.clone());
    }
}

#[test]
fn default_scale_pair_sample_is_distinct() {
    let pairs = sample_pairs(256, 4096, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(pairs.len(), 4096);
    assert!(pairs.iter().all(|&(i, j)| i < j && j < 256));
    assert_eq!(pairs.iter().collect::<HashSet<_>>().len(), 4096);
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 1024,
        max_steps: 300,
        ..TrainConfig::default()
    }
}

#[test]
fn single_unit_matches_multivariate() {
    let data = generate_dataset(&SynthConfig {
        n: 64,
        m: 3,
        d: 8,
        noise_level: 0.3,
        seed: 4,
    })
    .unwrap();
    let one = data.reps.univariate_slice(0).unwrap();
    let cmp = univariate_comparison(
        &data.table,
        &one,
        &[0],
        &small_config(),
        &SplitSpec::holdout(4),
        &EvalConfig::default(),
    )
    .unwrap();
    assert_eq!(cmp.units.len(), 1);
    assert_eq!(cmp.units[0].test_spearman, Some(cmp.multivariate_test_spearman));
}

#[test]
fn multivariate_beats_every_unit_when_metric_is_spread() {
    let data = generate_dataset(&SynthConfig {
        n: 96,
        m: 4,
        d: 16,
        noise_level: 0.0,
        seed: 5,
    })
    .unwrap();
    let units: Vec<usize> = (0..data.reps.d()).collect();
    let cmp = univariate_comparison(
        &data.table,
        &data.reps,
        &units,
        &small_config(),
        &SplitSpec::holdout(5),
        &EvalConfig::default(),
    )
    .unwrap();
    let best = cmp
        .units
        .iter()
        .filter_map(|u| u.test_spearman)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        cmp.multivariate_test_spearman > best,
        "multivariate {} vs best unit {best}",
        cmp.multivariate_test_spearman
    );
}

#[test]
fn unit_list_and_degenerate_units() {
    let data = generate_dataset(&SynthConfig {
        n: 48,
        m: 2,
        d: 6,
        noise_level: 0.0,
        seed: 6,
    })
    .unwrap();
    // two binary features give at most four distinct stimuli: trailing MDS columns are zero
    let mut rows: Vec<Vec<f64>> = (0..data.reps.n()).map(|i| data.reps.row(i).to_vec()).collect();
    for row in rows.iter_mut() {
        row[5] = 0.0;
    }
    let reps = RepresentationSet::from_rows(&rows).unwrap();
    let cmp = univariate_comparison(
        &data.table,
        &reps,
        &[0, 5],
        &small_config(),
        &SplitSpec::holdout(6),
        &EvalConfig::default(),
    )
    .unwrap();
    assert_eq!(cmp.units.len(), 2);
    assert!(cmp.units[0].test_spearman.is_some());
    assert_eq!(cmp.units[1].test_spearman, None);
    assert_eq!(cmp.units[1].steps_to_converge, None);
}
