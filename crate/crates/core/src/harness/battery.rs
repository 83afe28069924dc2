use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MessageBreakdown;
use crate::api::WorkerContext;
use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::model::{derive_seed, ClusterConfig, Key, ManagementTechnique, TechniqueTable};
use crate::sampling::{DistId, SchemeKind, TargetDistribution};
use crate::stats::{autocorrelation, chi_square_gof};
use crate::transport::{Cause, NetworkModel};

/// Settings of one battery run. The target is a distribution over keys
/// `0..target.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub scheme: SchemeKind,
    pub target: Vec<f64>,
    /// Total samples drawn (M).
    pub draws: usize,
    /// Samples reserved per handle.
    pub handle_size: usize,
    pub pool_size: usize,
    pub use_frequency: usize,
    pub num_nodes: usize,
    /// Significance level of the chi-squared tests.
    pub alpha: f64,
    pub seed: u64,
}

impl BatteryConfig {
    /// Defaults: handles of 1000 samples, G = 250, U = 16, alpha = 0.001; one
    /// node for independent and pooled reuse, two for postponing (one of them
    /// keeps pulling keys away) and four for local sampling.
    pub fn new(scheme: SchemeKind, target: Vec<f64>, draws: usize, seed: u64) -> Self {
        BatteryConfig {
            scheme,
            target,
            draws,
            handle_size: 1000,
            pool_size: 250,
            use_frequency: 16,
            num_nodes: match scheme {
                SchemeKind::Independent | SchemeKind::PooledReuse => 1,
                SchemeKind::ReusePostponing => 2,
                SchemeKind::Local => 4,
            },
            alpha: 0.001,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub passed: bool,
    /// Reported but not part of the verdict: the scheme makes no claim the
    /// test could check.
    pub informational: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub dof: Option<usize>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryOutcome {
    pub config: BatteryConfig,
    /// Delivered samples per key, over all nodes.
    pub counts: Vec<u64>,
    /// Delivered samples per key, per node.
    pub node_counts: Vec<Vec<u64>>,
    /// Messages sent while sampling.
    pub messages: MessageBreakdown,
    pub results: Vec<TestResult>,
}

impl BatteryOutcome {
    /// All non-informational tests passed.
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed || r.informational)
    }

    pub fn result(&self, name: &str) -> Option<&TestResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

/// Draws `config.draws` samples through the configured scheme and checks
/// them against what the scheme's conformity level promises:
///
/// * independent: chi-squared against the target, and autocorrelation at lags 1..5;
/// * pooled reuse: chi-squared of the counts divided by U, every fresh draw
///   delivered exactly U times, and dependency distance at most U·G;
/// * reuse with postponing: per-handle multisets and long-run chi-squared;
/// * local: no messages; distribution tests are reported for information.
pub fn run_conformity_battery(config: &BatteryConfig) -> Result<BatteryOutcome> {
    if config.draws == 0 || config.handle_size == 0 {
        return Err(Error::InvalidInput("need at least one draw per handle".into()));
    }
    if config.num_nodes == 0 || (config.scheme == SchemeKind::ReusePostponing && config.num_nodes < 2) {
        return Err(Error::InvalidInput("postponing needs at least two nodes".into()));
    }
    let n_keys = config.target.len();
    let mut cc = ClusterConfig::new(config.num_nodes, n_keys, 1);
    cc.pool_size = config.pool_size;
    cc.use_frequency = config.use_frequency;
    cc.rng_seed = config.seed;
    let cluster = Cluster::simulated(
        cc,
        TechniqueTable::all(ManagementTechnique::Relocated, n_keys),
        NetworkModel::default(),
    )?;
    let target = TargetDistribution::from_weights(&config.target)?;
    let level = config.scheme.level(config.pool_size, config.use_frequency);
    let id = cluster.register_recording_pools(target, config.scheme, level)?;

    let mut ctxs: Vec<WorkerContext> = cluster.worker_contexts();
    let before = cluster.counters();
    let (node_seqs, handle_results) = match config.scheme {
        SchemeKind::Independent | SchemeKind::PooledReuse => {
            let ctx = ctxs.swap_remove(0);
            let (draws, n) = (config.draws, config.handle_size);
            let seq = cluster.run(async move { draw_sequence(ctx, id, draws, n).await })?;
            (vec![seq], None)
        }
        SchemeKind::ReusePostponing => {
            let sampler = ctxs.swap_remove(0);
            let disturber = ctxs.swap_remove(0);
            let (draws, n) = (config.draws, config.handle_size);
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xd157]));
            let (seq, checks) =
                cluster.run(async move { draw_with_disturber(sampler, disturber, id, draws, n, rng).await })?;
            (vec![seq], Some(checks))
        }
        SchemeKind::Local => {
            let q = config.num_nodes;
            let per_node = config.draws.div_ceil(q);
            let n = config.handle_size;
            let tasks: Vec<_> = ctxs
                .into_iter()
                .filter(|c| c.worker() == 0)
                .map(|c| draw_sequence(c, id, per_node, n))
                .collect();
            let seqs = cluster.run(futures::future::join_all(tasks));
            (seqs.into_iter().collect::<Result<Vec<_>>>()?, None)
        }
    };
    cluster.settle()?;
    let messages = MessageBreakdown::from(&cluster.counters().since(&before));

    let mut node_counts = vec![vec![0u64; n_keys]; config.num_nodes];
    for (node, seq) in node_seqs.iter().enumerate() {
        for &k in seq {
            node_counts[node][k as usize] += 1;
        }
    }
    let mut counts = vec![0u64; n_keys];
    for nc in &node_counts {
        for (c, x) in counts.iter_mut().zip(nc) {
            *c += x;
        }
    }
    let total: u64 = counts.iter().sum();
    let probs = &config.target;
    let norm: f64 = probs.iter().sum();
    let probs: Vec<f64> = probs.iter().map(|p| p / norm).collect();
    let u = config.use_frequency as f64;

    let mut results = Vec::new();
    let chi = |design: f64, informational: bool| {
        let out = chi_square_gof(&counts, &probs, design, config.alpha);
        TestResult {
            name: "chi_square".into(),
            passed: out.passed,
            informational,
            statistic: out.statistic,
            threshold: out.critical,
            dof: Some(out.dof),
            detail: format!("{total} samples, design factor {design}, p = {:.4}", out.p_value),
        }
    };
    match config.scheme {
        SchemeKind::Independent => {
            results.push(chi(1.0, false));
            let xs: Vec<f64> = node_seqs[0].iter().map(|&k| k as f64).collect();
            let bound = 5.0 / (xs.len() as f64).sqrt();
            for lag in 1..=5 {
                let r = autocorrelation(&xs, lag);
                results.push(TestResult {
                    name: format!("autocorrelation_lag{lag}"),
                    passed: r.abs() < bound,
                    informational: false,
                    statistic: r,
                    threshold: bound,
                    dof: None,
                    detail: "sample autocorrelation of delivered key ids".into(),
                });
            }
        }
        SchemeKind::PooledReuse => {
            results.push(chi(u, false));
            let history = cluster.node(0).pool_history(id)?.unwrap_or_default();
            results.extend(reuse_checks(&node_seqs[0], &history, config.pool_size, config.use_frequency));
        }
        SchemeKind::ReusePostponing => {
            results.push(chi(u, false));
            let checks = handle_results.expect("postponing records handle checks");
            results.push(TestResult {
                name: "handle_multiset".into(),
                passed: checks.mismatched == 0,
                informational: false,
                statistic: checks.mismatched as f64,
                threshold: 0.0,
                dof: None,
                detail: format!("{} handles, {} with differing multisets", checks.handles, checks.mismatched),
            });
            results.push(TestResult {
                name: "postponed_at_most_once".into(),
                passed: checks.over_postponed == 0,
                informational: false,
                statistic: checks.over_postponed as f64,
                threshold: 0.0,
                dof: None,
                detail: format!("{} postponements in total", checks.postponed),
            });
            results.push(TestResult {
                name: "postponing_exercised".into(),
                passed: checks.postponed > 0,
                informational: true,
                statistic: checks.postponed as f64,
                threshold: 1.0,
                dof: None,
                detail: "samples moved to the end of their handle".into(),
            });
        }
        SchemeKind::Local => {
            let sampling = messages.cause(Cause::Sampling);
            results.push(TestResult {
                name: "zero_messages".into(),
                passed: messages.total == 0,
                informational: false,
                statistic: messages.total as f64,
                threshold: 0.0,
                dof: None,
                detail: format!("{sampling} attributed to sampling"),
            });
            results.push(chi(1.0, true));
            let (top, &p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty target");
            let f = counts[top] as f64 / total as f64;
            let tol = 5.0 * (p * (1.0 - p) / total as f64).sqrt();
            let per_node: Vec<String> = node_counts
                .iter()
                .zip(&node_seqs)
                .map(|(nc, seq)| format!("{:.4}", nc[top] as f64 / seq.len().max(1) as f64))
                .collect();
            results.push(TestResult {
                name: "node_frequency".into(),
                passed: (f - p).abs() <= tol,
                informational: true,
                statistic: f,
                threshold: p,
                dof: None,
                detail: format!(
                    "key {top}: target {p:.4}, overall frequency {f:.4} (bound 1/Q = {:.4}), per node [{}]",
                    1.0 / config.num_nodes as f64,
                    per_node.join(", ")
                ),
            });
        }
    }
    Ok(BatteryOutcome {
        config: config.clone(),
        counts,
        node_counts,
        messages,
        results,
    })
}

async fn draw_sequence(mut ctx: WorkerContext, id: DistId, draws: usize, handle_size: usize) -> Result<Vec<u32>> {
    let mut seq = Vec::with_capacity(draws);
    while seq.len() < draws {
        let n = handle_size.min(draws - seq.len());
        let mut h = ctx.prepare_sample(id, n)?;
        let batch = ctx.pull_sample(&mut h, None).await?;
        seq.extend(batch.keys.iter().map(|k| k.0 as u32));
    }
    Ok(seq)
}

struct HandleChecks {
    handles: usize,
    mismatched: usize,
    over_postponed: usize,
    postponed: usize,
}

/// Draws through handles on one node while a worker on another node keeps
/// pulling random keys away, so that samples are often not local.
async fn draw_with_disturber(
    mut sampler: WorkerContext,
    disturber: WorkerContext,
    id: DistId,
    draws: usize,
    handle_size: usize,
    mut rng: ChaCha8Rng,
) -> Result<(Vec<u32>, HandleChecks)> {
    let stop = Arc::new(AtomicBool::new(false));
    let n_keys = disturber.node().config().num_keys as u64;
    let disturb = {
        let stop = stop.clone();
        async move {
            while !stop.load(Ordering::Relaxed) {
                disturber.localize(&[Key(rng.random_range(0..n_keys))])?;
                disturber.node().runtime().sleep(Duration::from_micros(150)).await;
            }
            Ok::<_, Error>(())
        }
    };
    let sample = async move {
        let mut seq = Vec::with_capacity(draws);
        let mut checks = HandleChecks {
            handles: 0,
            mismatched: 0,
            over_postponed: 0,
            postponed: 0,
        };
        let chunk = handle_size.div_ceil(8).max(1);
        while seq.len() < draws {
            let n = handle_size.min(draws - seq.len());
            let mut h = sampler.prepare_sample(id, n)?;
            let mut reserved: Vec<Key> = h.pending_keys().collect();
            let mut delivered = Vec::with_capacity(n);
            while h.remaining() > 0 {
                let take = chunk.min(h.remaining());
                let batch = sampler.pull_sample(&mut h, Some(take)).await?;
                delivered.extend(batch.keys);
            }
            checks.handles += 1;
            checks.postponed += h.postponed();
            if h.postponed() > n {
                checks.over_postponed += 1;
            }
            seq.extend(delivered.iter().map(|k| k.0 as u32));
            reserved.sort_unstable();
            delivered.sort_unstable();
            if reserved != delivered {
                checks.mismatched += 1;
            }
        }
        stop.store(true, Ordering::Relaxed);
        Ok::<_, Error>((seq, checks))
    };
    let (out, disturbed) = futures::join!(sample, disturb);
    disturbed?;
    out
}

/// Checks a pooled-reuse stream against the pools it was drawn from. Pools
/// are consumed one after another, so the i-th block of `G * U` delivered
/// samples must hold the i-th pool's draws exactly `U` times each.
fn reuse_checks(seq: &[u32], history: &[Vec<Key>], g: usize, u: usize) -> Vec<TestResult> {
    let block = g * u;
    let complete = (seq.len() / block).min(history.len());
    let mut mismatched = 0;
    let mut max_distance = 0usize;
    for (i, pool) in history.iter().take(complete).enumerate() {
        let seg = &seq[i * block..(i + 1) * block];
        let mut got: Vec<u32> = seg.to_vec();
        got.sort_unstable();
        let mut want: Vec<u32> = pool.iter().flat_map(|k| std::iter::repeat_n(k.0 as u32, u)).collect();
        want.sort_unstable();
        if got != want {
            mismatched += 1;
        }
        let mut first = std::collections::HashMap::new();
        for (pos, &k) in seg.iter().enumerate() {
            let f = *first.entry(k).or_insert(pos);
            max_distance = max_distance.max(pos - f);
        }
    }
    vec![
        TestResult {
            name: "exact_use_count".into(),
            passed: mismatched == 0 && complete > 0,
            informational: false,
            statistic: mismatched as f64,
            threshold: 0.0,
            dof: None,
            detail: format!("{complete} complete pools checked, {mismatched} not used exactly {u} times"),
        },
        TestResult {
            name: "max_dependency_distance".into(),
            passed: max_distance <= block,
            informational: false,
            statistic: max_distance as f64,
            threshold: block as f64,
            dof: None,
            detail: format!("largest distance between deliveries from one pool {max_distance}, bound G*U = {block}"),
        },
    ]
}
