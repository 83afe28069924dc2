use std::sync::Arc;

use mixps_core::harness::{run_experiment, ExperimentSpec, TechniqueChoice, WorkloadSpec};
use mixps_core::stats::{chi_square_gof, log_log_slope};
use mixps_core::workloads::embed::{pair_gradient, pair_loss};
use mixps_core::workloads::mf::{cell_gradient, cell_loss};
use mixps_core::workloads::{
    zipf_weights, EmbedParams, EmbedSpec, EmbeddingDataset, MatrixDataset, MfParams, MfSpec, MfWorkload,
    NegativeDistribution, Workload, Zipf,
};
use mixps_core::ConformityLevel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += h;
            lo[i] -= h;
            (f(&hi) - f(&lo)) / (2.0 * h)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64]) {
    for (a, n) in analytic.iter().zip(numeric) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        assert!(rel <= 1e-5, "analytic {a} vs numeric {n} (relative {rel})");
    }
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn mf_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 6;
    for _ in 0..100 {
        let w = random_vec(&mut rng, d);
        let h = random_vec(&mut rng, d);
        let r = rng.random_range(-2.0..2.0);
        let reg = rng.random_range(0.0..0.1);
        let (gw, gh) = cell_gradient(&w, &h, r, reg);
        assert_close(&gw, &numeric_gradient(|x| cell_loss(x, &h, r, reg), &w));
        assert_close(&gh, &numeric_gradient(|x| cell_loss(&w, x, r, reg), &h));
    }
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 5;
    for _ in 0..100 {
        let head = random_vec(&mut rng, d);
        let tail = random_vec(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, d)).collect();
        let (gh, gt, gn) = pair_gradient(&head, &tail, &negs);
        assert_close(&gh, &numeric_gradient(|x| pair_loss(x, &tail, &negs), &head));
        assert_close(&gt, &numeric_gradient(|x| pair_loss(&head, x, &negs), &tail));
        for j in 0..negs.len() {
            let num = numeric_gradient(
                |x| {
                    let mut n = negs.clone();
                    n[j] = x.to_vec();
                    pair_loss(&head, &tail, &n)
                },
                &negs[j],
            );
            assert_close(&gn[j], &num);
        }
    }
}

#[test]
fn logistic_loss_is_finite_for_large_scores() {
    let big = vec![40.0];
    assert!(pair_loss(&big, &big, std::slice::from_ref(&big)).is_finite());
    assert!(pair_loss(&big, &[-40.0], &[]).is_finite());
}

#[test]
fn zipf_head_share_for_100_keys() {
    let w = zipf_weights(100, 1.1);
    assert!((w[0] - 0.2338).abs() < 1e-4, "{}", w[0]);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zipf_draws_follow_the_configured_exponent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zipf = Zipf::new(10_000, 1.1, &mut rng).unwrap();
    let mut counts = vec![0u64; 10_000];
    for _ in 0..1_000_000 {
        counts[zipf.sample(&mut rng)] += 1;
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..1000];
    let ranks: Vec<f64> = (1..=top.len()).map(|r| r as f64).collect();
    let slope = log_log_slope(&ranks, top).unwrap();
    assert!((-1.25..=-0.95).contains(&slope), "slope {slope}");
}

#[test]
fn zipf_exponent_zero_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let zipf = Zipf::new(50, 0.0, &mut rng).unwrap();
    let mut counts = vec![0u64; 50];
    for _ in 0..100_000 {
        counts[zipf.sample(&mut rng)] += 1;
    }
    assert!(chi_square_gof(&counts, &[0.02; 50], 1.0, 0.001).passed);
}

#[test]
fn matrix_generation_is_deterministic_and_distinct() {
    let spec = MfSpec {
        seed: 9,
        ..MfSpec::default()
    };
    let a = MatrixDataset::generate(&spec).unwrap();
    let b = MatrixDataset::generate(&spec).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, MatrixDataset::generate(&MfSpec { seed: 10, ..spec.clone() }).unwrap());
    assert_eq!(a.train.len() + a.test.len(), spec.cells);
    assert_eq!(a.test.len(), 400);
    let mut cells: Vec<(u32, u32)> = a.train.iter().chain(&a.test).map(|c| (c.row, c.col)).collect();
    cells.sort_unstable();
    cells.dedup();
    assert_eq!(cells.len(), spec.cells);
    let counts = a.access_counts();
    assert_eq!(counts.iter().sum::<u64>(), 2 * a.train.len() as u64);
}

#[test]
fn overfull_matrix_is_rejected() {
    let spec = MfSpec {
        rows: 10,
        cols: 10,
        cells: 60,
        ..MfSpec::default()
    };
    assert!(MatrixDataset::generate(&spec).is_err());
}

#[test]
fn datasets_round_trip_through_the_binary_layout() {
    let m = MatrixDataset::generate(&MfSpec::default()).unwrap();
    let mut buf = Vec::new();
    m.write_to(&mut buf).unwrap();
    assert_eq!(buf.len(), 12 + 32 + 16 * 8000);
    assert_eq!(MatrixDataset::read_from(buf.as_slice()).unwrap(), m);
    assert!(EmbeddingDataset::read_from(buf.as_slice()).is_err());

    let e = EmbeddingDataset::generate(&EmbedSpec::default()).unwrap();
    let file = tempfile::NamedTempFile::new().unwrap();
    e.write_to(std::fs::File::create(file.path()).unwrap()).unwrap();
    let back = EmbeddingDataset::read_from(std::fs::File::open(file.path()).unwrap()).unwrap();
    assert_eq!(back, e);
}

#[test]
fn embedding_pairs_are_in_range_and_skewed() {
    let e = EmbeddingDataset::generate(&EmbedSpec::default()).unwrap();
    assert_eq!(e.train.len() + e.test.len(), 20_000);
    assert!(e.train.iter().all(|&(h, t)| h != t && (h as usize) < e.entities && (t as usize) < e.entities));
    let mut counts = e.direct_counts();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    assert!(counts[0] > 20 * counts[counts.len() / 2]);
    let freq = e.negative_target(NegativeDistribution::Frequency).unwrap();
    assert!((freq.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

fn mf_spec(data: MfSpec, params: MfParams, nodes: usize, epochs: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        workload: WorkloadSpec::Mf { data, params },
        technique: TechniqueChoice::AllRelocate,
        epochs,
        seed: 4,
        ..ExperimentSpec::default()
    };
    spec.cluster.num_nodes = nodes;
    spec
}

#[test]
fn realizable_low_rank_matrix_is_fitted_to_the_noise_floor() {
    let data = MfSpec {
        rows: 100,
        cols: 100,
        cells: 4000,
        true_rank: 2,
        zipf_exponent: 0.0,
        noise: 0.01,
        ..MfSpec::default()
    };
    let params = MfParams {
        rank: 2,
        learning_rate: 0.03,
        regularization: 0.0,
        init_scale: 0.5,
    };
    let report = run_experiment(&mf_spec(data, params, 1, 150)).unwrap();
    assert!(report.last_metric() < 0.05, "rmse {}", report.last_metric());
}

#[test]
fn zero_learning_rate_leaves_the_model_unchanged() {
    let params = MfParams {
        learning_rate: 0.0,
        ..MfParams::default()
    };
    let report = run_experiment(&mf_spec(MfSpec::default(), params, 2, 3)).unwrap();
    for e in &report.epochs {
        assert_eq!(e.test_metric, report.initial_metric);
    }
}

/// Per-epoch held-out RMSE averaged over a family of seeds.
fn mean_curve(data: &MfSpec, nodes: usize, epochs: usize) -> Vec<f64> {
    const SEEDS: u64 = 5;
    let mut sum = vec![0.0; epochs];
    for seed in 0..SEEDS {
        let mut spec = mf_spec(data.clone(), MfParams::default(), nodes, epochs);
        spec.seed = seed;
        for (s, e) in sum.iter_mut().zip(run_experiment(&spec).unwrap().epochs) {
            *s += e.test_metric;
        }
    }
    sum.iter().map(|s| s / SEEDS as f64).collect()
}

#[test]
fn distributed_training_tracks_single_node_per_epoch() {
    let data = MfSpec {
        rows: 500,
        cols: 500,
        cells: 40_000,
        true_rank: 4,
        ..MfSpec::default()
    };
    let one = mean_curve(&data, 1, 8);
    let four = mean_curve(&data, 4, 8);
    // Epochs 1..=3 cross the steep part of the curve, where the exact visit
    // order dominates; compare afterwards.
    for (epoch, (a, b)) in one.iter().zip(&four).enumerate().skip(3) {
        let rel = (b - a).abs() / a;
        assert!(rel < 0.10, "epoch {}: {a} vs {b}", epoch + 1);
    }
}

#[test]
fn every_training_cell_is_assigned_once() {
    let data = Arc::new(MatrixDataset::generate(&MfSpec::default()).unwrap());
    let w = MfWorkload::new(data.clone(), MfParams::default(), 3, 2, 0).unwrap();
    let total: usize = (0..3).flat_map(|n| (0..2).map(move |k| (n, k))).map(|(n, k)| w.cells_of(n, k)).sum();
    assert_eq!(total, data.train.len());
    assert_eq!(w.num_keys(), 400);
}

fn embed_spec(n_neg: usize, level: ConformityLevel) -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        workload: WorkloadSpec::Embed {
            data: EmbedSpec {
                entities: 500,
                pairs: 6000,
                ..EmbedSpec::default()
            },
            params: EmbedParams {
                n_neg,
                negatives: NegativeDistribution::Uniform,
                ..EmbedParams::default()
            },
        },
        technique: TechniqueChoice::AllRelocate,
        conformity: level,
        epochs: 2,
        seed: 8,
        ..ExperimentSpec::default()
    };
    spec.cluster.num_nodes = 2;
    spec.cluster.workers_per_node = 2;
    spec
}

#[test]
fn no_negatives_means_no_sampling_accesses() {
    let report = run_experiment(&embed_spec(0, ConformityLevel::L1)).unwrap();
    for e in &report.epochs {
        assert_eq!(e.sampling_accesses, 0);
        assert_eq!(e.messages.cause(mixps_core::Cause::Sampling), 0);
    }
    assert!(report.histogram.unwrap().sampling.iter().all(|&c| c == 0));
}

#[test]
fn three_negatives_per_pair_are_sampled() {
    let report = run_experiment(&embed_spec(3, ConformityLevel::L2 { max_dependency: None })).unwrap();
    for e in &report.epochs {
        assert_eq!(e.sampling_accesses, 3 * e.points);
        assert_eq!(e.direct_accesses, 2 * e.points);
        assert_eq!(e.points, 5700);
    }
}

#[test]
fn independent_negatives_follow_the_target() {
    let report = run_experiment(&embed_spec(3, ConformityLevel::L1)).unwrap();
    let chi = report.sampled_chi_square.as_ref().unwrap();
    assert!(chi.passed, "{chi:?}");
    assert!(report.last_metric() < report.initial_metric);
}
