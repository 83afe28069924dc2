//! Worker-facing parameter API.
//!
//! A [`WorkerContext`] belongs to one worker thread of a node. Direct
//! accesses name their keys; the server picks replica or owner per key, so the
//! caller never has to know which technique manages a key.

use std::sync::Arc;

use futures::future::join_all;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_seed, Key, NodeId, Values};
use crate::node::{Node, SlotState};
use crate::sampling::{DistId, SampleBatch, SampleHandle};
use crate::transport::Cause;

/// Per-key access counts, split by how the key was requested.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounts {
    pub direct: Vec<u64>,
    pub sampling: Vec<u64>,
}

impl AccessCounts {
    pub fn new(num_keys: usize) -> Self {
        AccessCounts {
            direct: vec![0; num_keys],
            sampling: vec![0; num_keys],
        }
    }

    pub fn merge(&mut self, other: &AccessCounts) {
        if self.direct.len() < other.direct.len() {
            self.direct.resize(other.direct.len(), 0);
            self.sampling.resize(other.sampling.len(), 0);
        }
        for (a, b) in self.direct.iter_mut().zip(&other.direct) {
            *a += b;
        }
        for (a, b) in self.sampling.iter_mut().zip(&other.sampling) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.direct.iter().sum::<u64>() + self.sampling.iter().sum::<u64>()
    }
}

pub struct WorkerContext {
    node: Arc<Node>,
    worker: usize,
    rng: ChaCha8Rng,
    access: AccessCounts,
}

impl WorkerContext {
    /// `worker` is the worker's index within its node.
    pub fn new(node: Arc<Node>, worker: usize) -> Self {
        let seed = derive_seed(node.config.rng_seed, &[0x3031, node.id as u64, worker as u64]);
        let num_keys = node.config.num_keys;
        WorkerContext {
            node,
            worker,
            rng: ChaCha8Rng::seed_from_u64(seed),
            access: AccessCounts::new(num_keys),
        }
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn node_id(&self) -> NodeId {
        self.node.id
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn access_counts(&self) -> &AccessCounts {
        &self.access
    }

    pub fn take_access_counts(&mut self) -> AccessCounts {
        std::mem::replace(&mut self.access, AccessCounts::new(self.node.config.num_keys))
    }

    fn check_keys(&self, keys: &[Key]) -> Result<()> {
        keys.iter().try_for_each(|&k| self.node.config.check_key(k))
    }

    fn check_deltas(&self, keys: &[Key], deltas: &Values) -> Result<()> {
        self.check_keys(keys)?;
        if deltas.len() != keys.len() {
            return Err(Error::LengthMismatch {
                what: "keys vs update rows",
                left: keys.len(),
                right: deltas.len(),
            });
        }
        if !deltas.is_empty() && deltas.dim() != self.node.config.value_dim {
            return Err(Error::LengthMismatch {
                what: "update width vs value width",
                left: deltas.dim(),
                right: self.node.config.value_dim,
            });
        }
        Ok(())
    }

    /// Reads the current values of `keys`, one row per key.
    pub async fn pull(&mut self, keys: &[Key]) -> Result<Values> {
        self.check_keys(keys)?;
        for k in keys {
            self.access.direct[k.index()] += 1;
        }
        Ok(self.node.read_keys(keys, Cause::Direct).await)
    }

    /// Adds one update row per key. Completes when every update is applied
    /// (locally for replicated keys, at the owner for relocated ones).
    pub async fn push(&mut self, keys: &[Key], deltas: &Values) -> Result<()> {
        self.check_deltas(keys, deltas)?;
        self.node.write_keys(keys, deltas, Cause::Direct).await;
        Ok(())
    }

    /// Asks for `keys` to be moved to this node ahead of use. Replicated keys
    /// and keys already here are ignored.
    pub fn localize(&self, keys: &[Key]) -> Result<()> {
        self.check_keys(keys)?;
        for &k in keys {
            self.node.localize_key(k, Cause::Relocation, false);
        }
        Ok(())
    }

    /// Reserves `n` samples from a registered distribution.
    pub fn prepare_sample(&mut self, dist: DistId, n: usize) -> Result<SampleHandle> {
        self.node.prepare_sample(dist, n, &mut self.rng)
    }

    /// Delivers `n` samples of `handle`, or all remaining ones.
    pub async fn pull_sample(&mut self, handle: &mut SampleHandle, n: Option<usize>) -> Result<SampleBatch> {
        let batch = self.node.pull_sample(handle, n, &mut self.rng).await?;
        for k in &batch.keys {
            self.access.sampling[k.index()] += 1;
        }
        Ok(batch)
    }

    /// Pushes updates for sampled keys; same semantics as [`Self::push`], but
    /// any messages are attributed to sampling.
    pub async fn push_sampled(&mut self, keys: &[Key], deltas: &Values) -> Result<()> {
        self.check_deltas(keys, deltas)?;
        self.node.write_keys(keys, deltas, Cause::Sampling).await;
        Ok(())
    }

    /// Charges the configured per-data-point compute time in simulated runs.
    pub async fn compute(&self) {
        let cost = self.node.config.step_cost();
        if self.node.runtime.is_virtual() && !cost.is_zero() {
            self.node.runtime.sleep(cost).await;
        }
    }
}

impl Node {
    /// Reads `keys` with one latch acquisition per key, then resolves the
    /// non-local ones concurrently.
    pub(crate) async fn read_keys(&self, keys: &[Key], cause: Cause) -> Values {
        let mut out = Values::zeros(self.config.value_dim, keys.len());
        let mut slow = Vec::new();
        for (i, &k) in keys.iter().enumerate() {
            let mut slot = self.slot(k);
            match &mut slot.state {
                SlotState::Replica(r) => r.read_into(out.row_mut(i)),
                SlotState::Relocated(s) => {
                    if let Some(plan) = self.plan_read(s, out.row_mut(i)) {
                        slow.push((i, k, plan));
                    }
                }
            }
        }
        if !slow.is_empty() {
            let done = join_all(slow.into_iter().map(|(i, k, plan)| async move {
                (i, self.finish_read(k, plan, cause).await.0)
            }))
            .await;
            for (i, v) in done {
                out.row_mut(i).copy_from_slice(&v);
            }
        }
        out
    }

    /// Applies `deltas` row by row; replicated keys go to the local replica,
    /// relocated keys to their owner. Completes once every write is applied.
    pub(crate) async fn write_keys(&self, keys: &[Key], deltas: &Values, cause: Cause) {
        let mut slow = Vec::new();
        for (i, &k) in keys.iter().enumerate() {
            let delta = deltas.row(i);
            let mut slot = self.slot(k);
            match &mut slot.state {
                SlotState::Replica(r) => {
                    self.write_replica(k, r, delta);
                }
                SlotState::Relocated(s) => {
                    if let Some(plan) = self.plan_write(s, delta) {
                        slow.push((k, plan, delta.to_vec()));
                    }
                }
            }
        }
        if !slow.is_empty() {
            join_all(
                slow.into_iter()
                    .map(|(k, plan, d)| self.finish_write(k, plan, d, cause)),
            )
            .await;
        }
    }
}
