//! Toy embedding task with negative sampling.
//!
//! Every entity is a key holding a `dim`-wide embedding. A positive pair
//! `(head, tail)` is scored by the dot product of the two embeddings under a
//! logistic loss; each pair also draws `n_neg` negative tails through the
//! sampling API and pushes them away from the head.

use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mf::{dot, read_u32, read_u64};
use super::{read_header, write_header, WorkerEpoch, Workload, DUMP_KIND_EMBEDDING};
use crate::api::WorkerContext;
use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::model::{derive_seed, Key, Scalar, Values};
use crate::sampling::{ConformityLevel, DistId, TargetDistribution};
use crate::transport::BoxFuture;
use crate::workloads::zipf::Zipf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedSpec {
    pub entities: usize,
    /// Positive pairs, training and held-out together.
    pub pairs: usize,
    pub zipf_exponent: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        EmbedSpec {
            entities: 2_000,
            pairs: 20_000,
            zipf_exponent: 1.1,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Distribution negatives are drawn from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeDistribution {
    /// Uniform over all entities.
    Uniform,
    /// Proportional to how often an entity appears as a training tail.
    Frequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedParams {
    pub dim: usize,
    pub n_neg: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub negatives: NegativeDistribution,
}

impl Default for EmbedParams {
    fn default() -> Self {
        EmbedParams {
            dim: 8,
            n_neg: 3,
            learning_rate: 0.05,
            init_scale: 0.1,
            negatives: NegativeDistribution::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub entities: usize,
    pub train: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// One uniformly drawn negative tail per held-out pair.
    pub test_negatives: Vec<u32>,
}

impl EmbeddingDataset {
    /// Heads and tails are drawn independently from one Zipf distribution over
    /// the entities; pairs with `head == tail` are redrawn.
    pub fn generate(spec: &EmbedSpec) -> Result<Self> {
        if spec.entities < 2 || spec.pairs == 0 {
            return Err(Error::InvalidInput("need at least two entities and one pair".into()));
        }
        if !(0.0..1.0).contains(&spec.test_fraction) {
            return Err(Error::InvalidInput("test fraction must be in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0xe3b]));
        let zipf = Zipf::new(spec.entities, spec.zipf_exponent, &mut rng)?;
        let mut pairs = Vec::with_capacity(spec.pairs);
        while pairs.len() < spec.pairs {
            let (h, t) = (zipf.sample(&mut rng), zipf.sample(&mut rng));
            if h != t {
                pairs.push((h as u32, t as u32));
            }
        }
        let n_test = (spec.pairs as f64 * spec.test_fraction).round() as usize;
        let test = pairs.split_off(spec.pairs - n_test);
        let test_negatives = (0..test.len())
            .map(|_| rng.random_range(0..spec.entities as u32))
            .collect();
        Ok(EmbeddingDataset {
            entities: spec.entities,
            train: pairs,
            test,
            test_negatives,
        })
    }

    /// Direct accesses per key in one training epoch.
    pub fn direct_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.entities];
        for &(h, t) in &self.train {
            counts[h as usize] += 1;
            counts[t as usize] += 1;
        }
        counts
    }

    pub fn negative_target(&self, kind: NegativeDistribution) -> Result<TargetDistribution> {
        match kind {
            NegativeDistribution::Uniform => {
                TargetDistribution::uniform((0..self.entities as u64).map(Key).collect())
            }
            NegativeDistribution::Frequency => {
                let mut counts = vec![0u64; self.entities];
                for &(_, t) in &self.train {
                    counts[t as usize] += 1;
                }
                let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
                TargetDistribution::from_weights(&weights)
            }
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, DUMP_KIND_EMBEDDING)?;
        for v in [self.entities as u64, self.train.len() as u64, self.test.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &(h, t) in self.train.iter().chain(&self.test) {
            w.write_all(&h.to_le_bytes())?;
            w.write_all(&t.to_le_bytes())?;
        }
        for n in &self.test_negatives {
            w.write_all(&n.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        read_header(&mut r, DUMP_KIND_EMBEDDING)?;
        let entities = read_u64(&mut r)? as usize;
        let n_train = read_u64(&mut r)? as usize;
        let n_test = read_u64(&mut r)? as usize;
        let check = |e: u32| {
            if (e as usize) < entities {
                Ok(e)
            } else {
                Err(Error::Wire(format!("entity {e} out of range {entities}")))
            }
        };
        let mut pairs = Vec::with_capacity(n_train + n_test);
        for _ in 0..n_train + n_test {
            let h = check(read_u32(&mut r)?)?;
            let t = check(read_u32(&mut r)?)?;
            pairs.push((h, t));
        }
        let test = pairs.split_off(n_train);
        let test_negatives = (0..n_test)
            .map(|_| check(read_u32(&mut r)?))
            .collect::<Result<_>>()?;
        Ok(EmbeddingDataset {
            entities,
            train: pairs,
            test,
            test_negatives,
        })
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic loss of a positive pair and its negatives:
/// `-ln s(h.t) - sum_n ln s(-h.n)`.
pub fn pair_loss(head: &[f64], tail: &[f64], negatives: &[Vec<f64>]) -> f64 {
    -log_sigmoid(dot(head, tail)) - negatives.iter().map(|n| log_sigmoid(-dot(head, n))).sum::<f64>()
}

/// Gradient of [`pair_loss`] with respect to the head, the tail and every negative.
pub fn pair_gradient(head: &[f64], tail: &[f64], negatives: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let pos = sigmoid(dot(head, tail)) - 1.0;
    let mut gh: Vec<f64> = tail.iter().map(|t| pos * t).collect();
    let gt: Vec<f64> = head.iter().map(|h| pos * h).collect();
    let mut gn = Vec::with_capacity(negatives.len());
    for n in negatives {
        let s = sigmoid(dot(head, n));
        for (g, x) in gh.iter_mut().zip(n) {
            *g += s * x;
        }
        gn.push(head.iter().map(|h| s * h).collect());
    }
    (gh, gt, gn)
}

pub struct EmbedWorkload {
    data: Arc<EmbeddingDataset>,
    params: EmbedParams,
    level: ConformityLevel,
    seed: u64,
    target: TargetDistribution,
    partition: Vec<Vec<(u32, u32)>>,
    workers_per_node: usize,
    dist: OnceLock<DistId>,
}

impl EmbedWorkload {
    pub fn new(
        data: Arc<EmbeddingDataset>,
        params: EmbedParams,
        level: ConformityLevel,
        num_nodes: usize,
        workers_per_node: usize,
        seed: u64,
    ) -> Result<Self> {
        if params.dim == 0 {
            return Err(Error::InvalidInput("embedding width must be positive".into()));
        }
        if num_nodes == 0 || workers_per_node == 0 {
            return Err(Error::InvalidInput("need at least one node and worker".into()));
        }
        let workers = num_nodes * workers_per_node;
        let mut partition = vec![Vec::new(); workers];
        for (i, &p) in data.train.iter().enumerate() {
            partition[i % workers].push(p);
        }
        let target = data.negative_target(params.negatives)?;
        Ok(EmbedWorkload {
            data,
            params,
            level,
            seed,
            target,
            partition,
            workers_per_node,
            dist: OnceLock::new(),
        })
    }

    pub fn dataset(&self) -> &EmbeddingDataset {
        &self.data
    }

    pub fn target(&self) -> &TargetDistribution {
        &self.target
    }

    /// Id of the negative-sampling distribution once registered.
    pub fn distribution(&self) -> Option<DistId> {
        self.dist.get().copied()
    }

    async fn epoch(self: Arc<Self>, mut ctx: WorkerContext, epoch: usize) -> Result<(WorkerContext, WorkerEpoch)> {
        let g = ctx.node_id() * self.workers_per_node + ctx.worker();
        let pairs = &self.partition[g];
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0xe9c, g as u64, epoch as u64]));
        order.shuffle(&mut rng);

        let d = self.params.dim;
        let lr = self.params.learning_rate;
        let n_neg = self.params.n_neg;
        let dist = match (n_neg, self.dist.get()) {
            (0, _) => None,
            (_, Some(&id)) => Some(id),
            (_, None) => return Err(Error::InvalidInput("negative distribution not registered".into())),
        };
        let to_f64 = |r: &[Scalar]| -> Vec<f64> { r.iter().map(|&x| x as f64).collect() };
        let to_delta = |g: &[f64]| -> Vec<Scalar> { g.iter().map(|x| (-lr * x) as Scalar).collect() };

        let mut next = match (dist, order.is_empty()) {
            (Some(id), false) => Some(ctx.prepare_sample(id, n_neg)?),
            _ => None,
        };
        let mut out = WorkerEpoch::default();
        for (i, &p) in order.iter().enumerate() {
            let handle = next.take();
            if let Some(&np) = order.get(i + 1) {
                let (h, t) = pairs[np];
                ctx.localize(&[Key(h as u64), Key(t as u64)])?;
                if let Some(id) = dist {
                    next = Some(ctx.prepare_sample(id, n_neg)?);
                }
            }
            let (h, t) = pairs[p];
            let keys = [Key(h as u64), Key(t as u64)];
            let vals = ctx.pull(&keys).await?;
            let (head, tail) = (to_f64(vals.row(0)), to_f64(vals.row(1)));
            let (neg_keys, negatives) = match handle {
                Some(mut hd) => {
                    let batch = ctx.pull_sample(&mut hd, None).await?;
                    let negs: Vec<Vec<f64>> = batch.values.rows().map(to_f64).collect();
                    (batch.keys, negs)
                }
                None => (Vec::new(), Vec::new()),
            };
            out.loss_sum += pair_loss(&head, &tail, &negatives);
            out.points += 1;
            let (gh, gt, gn) = pair_gradient(&head, &tail, &negatives);
            let mut deltas = Values::with_capacity(d, 2);
            deltas.push_row(&to_delta(&gh));
            deltas.push_row(&to_delta(&gt));
            ctx.push(&keys, &deltas).await?;
            if !neg_keys.is_empty() {
                let mut nd = Values::with_capacity(d, neg_keys.len());
                for g in &gn {
                    nd.push_row(&to_delta(g));
                }
                ctx.push_sampled(&neg_keys, &nd).await?;
            }
            ctx.compute().await;
        }
        Ok((ctx, out))
    }
}

impl Workload for EmbedWorkload {
    fn name(&self) -> &'static str {
        "embed"
    }

    fn metric_name(&self) -> &'static str {
        "heldout_loss"
    }

    fn num_keys(&self) -> usize {
        self.data.entities
    }

    fn value_dim(&self) -> usize {
        self.params.dim
    }

    /// Direct accesses plus the expected number of times each key is drawn as
    /// a negative in one epoch.
    fn access_counts(&self) -> Vec<u64> {
        let mut counts = self.data.direct_counts();
        let draws = (self.params.n_neg * self.data.train.len()) as f64;
        for (&k, &p) in self.target.keys().iter().zip(self.target.probs()) {
            counts[k.index()] += (draws * p).round() as u64;
        }
        counts
    }

    fn initial_value(&self, key: Key) -> Vec<Scalar> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x1417, key.0]));
        let a = self.params.init_scale;
        (0..self.params.dim)
            .map(|_| if a > 0.0 { rng.random_range(-a..=a) as Scalar } else { 0.0 })
            .collect()
    }

    fn training_points(&self) -> usize {
        self.data.train.len()
    }

    fn setup(&self, cluster: &Cluster) -> Result<()> {
        if self.params.n_neg == 0 || self.dist.get().is_some() {
            return Ok(());
        }
        let target = self.data.negative_target(self.params.negatives)?;
        let id = cluster.register_distribution(target, self.level)?;
        let _ = self.dist.set(id);
        Ok(())
    }

    fn sampling_target(&self) -> Option<(DistId, &TargetDistribution)> {
        self.dist.get().map(|&id| (id, &self.target))
    }

    fn worker_epoch(self: Arc<Self>, ctx: WorkerContext, epoch: usize) -> BoxFuture<Result<(WorkerContext, WorkerEpoch)>> {
        Box::pin(self.epoch(ctx, epoch))
    }

    /// Mean loss of the held-out pairs, each with its fixed negative.
    fn evaluate(&self, cluster: &Cluster) -> Result<f64> {
        if self.data.test.is_empty() {
            return Ok(f64::NAN);
        }
        let model = super::snapshot_model(cluster)?;
        let total: f64 = self
            .data
            .test
            .iter()
            .zip(&self.data.test_negatives)
            .map(|(&(h, t), &n)| pair_loss(&model[h as usize], &model[t as usize], &[model[n as usize].clone()]))
            .sum();
        Ok(total / self.data.test.len() as f64)
    }
}
