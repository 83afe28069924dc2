//! Experiment runner: builds a cluster for a workload, trains for a number of
//! epochs and collects a [`Report`]; plus the statistical conformity battery
//! for the sampling schemes.

mod battery;
mod report;

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

pub use battery::{run_conformity_battery, BatteryConfig, BatteryOutcome, TestResult};
pub use report::{access_histogram_csv, epochs_csv, EpochMetrics, MessageBreakdown, Report};

use crate::api::AccessCounts;
use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::model::{assign_techniques, assign_top_k, ClusterConfig, Key, ManagementTechnique, TechniqueTable};
use crate::relocation::RelocationCounters;
use crate::sampling::{ConformityLevel, SamplingCounters, SchemeKind};
use crate::stats::chi_square_gof;
use crate::transport::NetworkModel;
use crate::workloads::{
    EmbedParams, EmbedSpec, EmbedWorkload, EmbeddingDataset, MatrixDataset, MfParams, MfSpec, MfWorkload, Workload,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WorkloadSpec {
    Mf {
        #[serde(default)]
        data: MfSpec,
        #[serde(default)]
        params: MfParams,
    },
    Embed {
        #[serde(default)]
        data: EmbedSpec,
        #[serde(default)]
        params: EmbedParams,
    },
}

impl WorkloadSpec {
    pub fn mf() -> Self {
        WorkloadSpec::Mf {
            data: MfSpec::default(),
            params: MfParams::default(),
        }
    }

    pub fn embed() -> Self {
        WorkloadSpec::Embed {
            data: EmbedSpec::default(),
            params: EmbedParams::default(),
        }
    }
}

/// How keys are split between replication and relocation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TechniqueChoice {
    /// Every key relocated.
    AllRelocate,
    /// Replicate keys accessed more than the configured multiple of the mean.
    Heuristic,
    /// Replicate the `k` most accessed keys.
    TopK(usize),
}

impl TechniqueChoice {
    pub fn table(self, access_counts: &[u64], threshold_factor: f64) -> Result<TechniqueTable> {
        Ok(TechniqueTable::new(match self {
            TechniqueChoice::AllRelocate => vec![ManagementTechnique::Relocated; access_counts.len()],
            TechniqueChoice::Heuristic => assign_techniques(access_counts, threshold_factor)?,
            TechniqueChoice::TopK(k) => assign_top_k(access_counts, k),
        }))
    }
}

impl fmt::Display for TechniqueChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TechniqueChoice::AllRelocate => f.write_str("relocate"),
            TechniqueChoice::Heuristic => f.write_str("heuristic"),
            TechniqueChoice::TopK(k) => write!(f, "topk={k}"),
        }
    }
}

impl FromStr for TechniqueChoice {
    type Err = Error;

    /// `relocate`, `heuristic` or `topk=K`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "relocate" | "all-relocate" => Ok(TechniqueChoice::AllRelocate),
            "heuristic" => Ok(TechniqueChoice::Heuristic),
            _ => s
                .strip_prefix("topk=")
                .and_then(|k| k.parse().ok())
                .map(TechniqueChoice::TopK)
                .ok_or_else(|| Error::InvalidInput(format!("unknown technique {s:?}"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportChoice {
    Simulated(NetworkModel),
    Tcp,
}

impl Default for TransportChoice {
    fn default() -> Self {
        TransportChoice::Simulated(NetworkModel::default())
    }
}

/// Everything needed to reproduce one run. The cluster's key count and value
/// width are taken from the workload, and its seed from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub workload: WorkloadSpec,
    pub cluster: ClusterConfig,
    pub technique: TechniqueChoice,
    pub conformity: ConformityLevel,
    pub epochs: usize,
    pub seed: u64,
    pub transport: TransportChoice,
    pub collect_histogram: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            workload: WorkloadSpec::mf(),
            cluster: ClusterConfig::default(),
            technique: TechniqueChoice::Heuristic,
            conformity: ConformityLevel::L1,
            epochs: 1,
            seed: 0,
            transport: TransportChoice::default(),
            collect_histogram: true,
        }
    }
}

impl ExperimentSpec {
    /// Builds the workload with this spec's seed.
    pub fn build_workload(&self) -> Result<Arc<dyn Workload>> {
        let (q, w) = (self.cluster.num_nodes, self.cluster.workers_per_node);
        Ok(match &self.workload {
            WorkloadSpec::Mf { data, params } => {
                let data = MatrixDataset::generate(&MfSpec {
                    seed: self.seed,
                    ..data.clone()
                })?;
                Arc::new(MfWorkload::new(Arc::new(data), params.clone(), q, w, self.seed)?)
            }
            WorkloadSpec::Embed { data, params } => {
                let data = EmbeddingDataset::generate(&EmbedSpec {
                    seed: self.seed,
                    ..data.clone()
                })?;
                Arc::new(EmbedWorkload::new(
                    Arc::new(data),
                    params.clone(),
                    self.conformity,
                    q,
                    w,
                    self.seed,
                )?)
            }
        })
    }

    /// Reads a spec from a `.json` or TOML file. Missing fields take their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    /// Writes the generated dataset in the binary dump format.
    pub fn write_dataset(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        match &self.workload {
            WorkloadSpec::Mf { data, .. } => MatrixDataset::generate(&MfSpec {
                seed: self.seed,
                ..data.clone()
            })?
            .write_to(file),
            WorkloadSpec::Embed { data, .. } => EmbeddingDataset::generate(&EmbedSpec {
                seed: self.seed,
                ..data.clone()
            })?
            .write_to(file),
        }
    }

    fn cluster_config(&self, workload: &dyn Workload) -> Result<ClusterConfig> {
        let config = ClusterConfig {
            num_keys: workload.num_keys(),
            value_dim: workload.value_dim(),
            rng_seed: self.seed,
            ..self.cluster.clone()
        };
        config.validate()?;
        Ok(config)
    }
}

/// Runs `spec` to completion. Simulated runs are deterministic given the spec.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    let started = Instant::now();
    let workload = spec.build_workload()?;
    let config = spec.cluster_config(workload.as_ref())?;
    let access = workload.access_counts();
    let table = spec.technique.table(&access, config.replication_threshold_factor)?;
    let num_replicated = table.num_replicated();
    let mut cluster = match spec.transport {
        TransportChoice::Simulated(net) => Cluster::simulated(config, table, net)?,
        TransportChoice::Tcp => Cluster::tcp(config, table)?,
    };
    for k in 0..workload.num_keys() as u64 {
        cluster.init_value(Key(k), &workload.initial_value(Key(k)))?;
    }
    workload.setup(&cluster)?;
    cluster.start_sync();
    cluster.settle()?;
    let initial_metric = workload.evaluate(&cluster)?;

    let num_keys = workload.num_keys();
    let mut histogram = spec.collect_histogram.then(|| AccessCounts::new(num_keys));
    let mut epochs = Vec::with_capacity(spec.epochs);
    let mut ctxs = cluster.worker_contexts();
    for epoch in 0..spec.epochs {
        let before = cluster.counters();
        let t0 = cluster.now();
        let tasks: Vec<_> = ctxs.drain(..).map(|c| workload.clone().worker_epoch(c, epoch)).collect();
        let results = cluster.run(join_all(tasks));
        let mut loss_sum = 0.0;
        let mut points = 0u64;
        let mut counts = AccessCounts::new(num_keys);
        for r in results {
            let (mut ctx, part) =
                r.map_err(|e| Error::InvalidInput(format!("{} epoch {epoch} failed: {e}", workload.name())))?;
            loss_sum += part.loss_sum;
            points += part.points;
            counts.merge(&ctx.take_access_counts());
            ctxs.push(ctx);
        }
        let duration = cluster.now() - t0;
        cluster.settle()?;
        let test_metric = workload.evaluate(&cluster)?;
        if let Some(h) = &mut histogram {
            h.merge(&counts);
        }
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: if points > 0 { loss_sum / points as f64 } else { f64::NAN },
            test_metric,
            duration_secs: duration.as_secs_f64(),
            points,
            direct_accesses: counts.direct.iter().sum(),
            sampling_accesses: counts.sampling.iter().sum(),
            messages: MessageBreakdown::from(&cluster.counters().since(&before)),
        });
    }

    cluster.stop_sync();
    if !cluster.config().sync_disabled {
        cluster.sync_now();
    }
    cluster.settle()?;
    let final_metric = workload.evaluate(&cluster)?;

    let mut relocation = RelocationCounters::default();
    let mut sampling: Option<SamplingCounters> = None;
    let mut sync_rounds = 0;
    for n in cluster.nodes() {
        let r = n.relocation_stats();
        relocation.localizes += r.localizes;
        relocation.grants_received += r.grants_received;
        relocation.relinquished += r.relinquished;
        relocation.forwarded += r.forwarded;
        relocation.queued += r.queued;
        sync_rounds += n.sync_stats().rounds;
        if let Some((id, _)) = workload.sampling_target() {
            let c = n.sampling_counters(id)?;
            let s = sampling.get_or_insert_with(SamplingCounters::default);
            s.delivered += c.delivered;
            s.postponed += c.postponed;
            s.local_fallbacks += c.local_fallbacks;
            s.pools_created += c.pools_created;
        }
    }
    let sampled_chi_square = match (&histogram, dense_target(workload.as_ref())) {
        (Some(h), Some(probs)) if h.sampling.iter().any(|&c| c > 0) => {
            // Pooled keys are delivered U times each, which inflates the variance by U.
            let scheme = SchemeKind::for_level(spec.conformity, cluster.config().pool_size, cluster.config().use_frequency);
            let design = if matches!(scheme, SchemeKind::PooledReuse | SchemeKind::ReusePostponing) { cluster.config().use_frequency as f64 } else { 1.0 };
            Some(chi_square_gof(&h.sampling, &probs, design, 0.001))
        }
        _ => None,
    };
    Ok(Report {
        spec: spec.clone(),
        workload: workload.name().to_string(),
        metric: workload.metric_name().to_string(),
        num_keys,
        num_replicated,
        initial_metric,
        epochs,
        final_metric,
        sync_rounds,
        sync_frequency_hz: cluster.node(0).sync_stats().achieved_frequency_hz(),
        messages: MessageBreakdown::from(&cluster.counters()),
        relocation,
        sampling,
        sampled_chi_square,
        histogram,
        elapsed_secs: cluster.now().as_secs_f64(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Target probabilities indexed by key, for workloads that sample.
fn dense_target(workload: &dyn Workload) -> Option<Vec<f64>> {
    let (_, target) = workload.sampling_target()?;
    let mut probs = vec![0.0; workload.num_keys()];
    for (k, p) in target.keys().iter().zip(target.probs()) {
        probs[k.index()] = *p;
    }
    Some(probs)
}

/// Runs `base` once per staleness bound; `None` disables synchronization.
pub fn staleness_sweep(base: &ExperimentSpec, staleness_ms: &[Option<f64>]) -> Result<Vec<Report>> {
    staleness_ms
        .iter()
        .map(|s| {
            let mut spec = base.clone();
            match s {
                Some(ms) => {
                    spec.cluster.staleness_ms = *ms;
                    spec.cluster.sync_disabled = false;
                }
                None => spec.cluster.sync_disabled = true,
            }
            run_experiment(&spec)
        })
        .collect()
}
