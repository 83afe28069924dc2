//! The four sampling schemes, run on a node on behalf of its workers.

use std::collections::VecDeque;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use futures::future::join_all;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ConformityLevel, DistId, PoolHistory, Registered, ReusePool, SampleBatch, SampleHandle,
    SamplingCounters, SamplingStats, SchemeKind, TargetDistribution,
};
use crate::error::{Error, Result};
use crate::model::{derive_seed, Key, Values};
use crate::node::{Node, SlotState};
use crate::relocation::OwnershipState;
use crate::transport::Cause;

/// Rejection attempts before the local scheme scans its support.
const LOCAL_REJECTION_TRIES: usize = 64;

impl Node {
    /// Registers `target` for sampling at `level`.
    pub fn register_distribution(
        self: &Arc<Self>,
        target: Arc<TargetDistribution>,
        level: ConformityLevel,
    ) -> Result<DistId> {
        let scheme =
            SchemeKind::for_level(level, self.config.pool_size, self.config.use_frequency);
        self.register_with_scheme(target, scheme, level)
    }

    /// Registers `target` with an explicit scheme.
    pub fn register_with_scheme(
        self: &Arc<Self>,
        target: Arc<TargetDistribution>,
        scheme: SchemeKind,
        level: ConformityLevel,
    ) -> Result<DistId> {
        self.register_inner(target, scheme, level, false)
    }

    /// Like [`Self::register_with_scheme`], but records the draws of every
    /// pool (see [`Self::pool_history`]).
    pub fn register_recording_pools(
        self: &Arc<Self>,
        target: Arc<TargetDistribution>,
        scheme: SchemeKind,
        level: ConformityLevel,
    ) -> Result<DistId> {
        self.register_inner(target, scheme, level, true)
    }

    fn register_inner(
        self: &Arc<Self>,
        target: Arc<TargetDistribution>,
        scheme: SchemeKind,
        level: ConformityLevel,
        record_pools: bool,
    ) -> Result<DistId> {
        for &k in target.keys() {
            self.config.check_key(k)?;
        }
        let mut dists = self.sampling.dists.write();
        let id = DistId(dists.len());
        let reuse = matches!(scheme, SchemeKind::PooledReuse | SchemeKind::ReusePostponing).then(|| {
            let seed = derive_seed(self.config.rng_seed, &[0x900d, self.id as u64, id.0 as u64]);
            let mut pool = ReusePool::new(
                self.config.pool_size,
                self.config.use_frequency,
                self.config.relocation_estimate_window,
                ChaCha8Rng::seed_from_u64(seed),
            );
            if record_pools {
                pool.record_history();
            }
            parking_lot::Mutex::new(pool)
        });
        let reg = Arc::new(Registered {
            id,
            target,
            scheme,
            level,
            reuse,
            stats: SamplingStats::default(),
        });
        dists.push(reg.clone());
        drop(dists);
        if let Some(pool) = &reg.reuse {
            let draws = pool.lock().create(&reg.target);
            self.spawn_pool_localization(reg.clone(), draws);
        }
        Ok(id)
    }

    /// Draws of every pool created so far, if recording was requested at
    /// registration.
    pub fn pool_history(&self, dist: DistId) -> Result<Option<PoolHistory>> {
        let reg = self.sampling.get(dist)?;
        Ok(reg.reuse.as_ref().and_then(|p| p.lock().history().cloned()))
    }

    pub fn sampling_counters(&self, dist: DistId) -> Result<SamplingCounters> {
        Ok(self.sampling.get(dist)?.counters())
    }

    pub fn scheme_of(&self, dist: DistId) -> Result<(SchemeKind, ConformityLevel)> {
        let reg = self.sampling.get(dist)?;
        Ok((reg.scheme, reg.level))
    }

    fn spawn_pool_localization(self: &Arc<Self>, reg: Arc<Registered>, mut keys: Vec<Key>) {
        keys.sort_unstable();
        keys.dedup();
        let node = self.clone();
        self.runtime.spawn(Box::pin(async move {
            let start = node.runtime.now();
            let waits: Vec<_> = keys
                .iter()
                .filter_map(|&k| node.localize_key(k, Cause::Sampling, true))
                .collect();
            join_all(waits).await;
            let took = node.runtime.now() - start;
            if let Some(p) = &reg.reuse {
                p.lock().record_localization(took);
            }
        }));
    }

    /// Reserves `n` samples. `rng` is the calling worker's generator.
    pub(crate) fn prepare_sample(
        self: &Arc<Self>,
        dist: DistId,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleHandle> {
        if n == 0 {
            return Err(Error::InvalidInput("sample size must be positive".into()));
        }
        let reg = self.sampling.get(dist)?;
        let pending: VecDeque<(Key, bool)> = match reg.scheme {
            SchemeKind::Independent => {
                let keys: VecDeque<(Key, bool)> =
                    (0..n).map(|_| (reg.target.sample(rng), false)).collect();
                for &(k, _) in &keys {
                    self.localize_key(k, Cause::Sampling, false);
                }
                keys
            }
            SchemeKind::PooledReuse | SchemeKind::ReusePostponing => {
                let now = self.runtime.now();
                let mut fresh = Vec::new();
                let reserved: VecDeque<(Key, bool)> = {
                    let mut pool = reg.reuse.as_ref().unwrap().lock();
                    while pool.unreserved() < n {
                        fresh.push(pool.create(&reg.target));
                    }
                    let reserved = pool.take(n, now).map(|k| (k, false)).collect();
                    if pool.refill_due(now) {
                        fresh.push(pool.create(&reg.target));
                    }
                    reserved
                };
                for draws in fresh {
                    self.spawn_pool_localization(reg.clone(), draws);
                }
                for &(k, _) in &reserved {
                    self.localize_key(k, Cause::Sampling, false);
                }
                reserved
            }
            SchemeKind::Local => VecDeque::new(),
        };
        Ok(SampleHandle {
            dist: reg,
            requested: n,
            delivered: 0,
            postponed: 0,
            pending,
        })
    }

    /// Delivers the next `n` samples of `handle` (all remaining if `None`).
    pub(crate) async fn pull_sample(
        &self,
        handle: &mut SampleHandle,
        n: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleBatch> {
        let remaining = handle.remaining();
        let n = n.unwrap_or(remaining);
        if n == 0 {
            return Err(Error::InvalidInput("pull of zero samples".into()));
        }
        if n > remaining {
            return Err(Error::ExhaustedHandle {
                requested: n,
                remaining,
            });
        }
        let batch = match handle.dist.scheme {
            SchemeKind::Independent | SchemeKind::PooledReuse => {
                let keys: Vec<Key> = handle.pending.drain(..n).map(|(k, _)| k).collect();
                let values = self.read_keys(&keys, Cause::Sampling).await;
                SampleBatch { keys, values }
            }
            SchemeKind::ReusePostponing => self.pull_postponing(handle, n).await,
            SchemeKind::Local => self.pull_local(&handle.dist, n, rng).await,
        };
        handle.delivered += n;
        handle
            .dist
            .stats
            .delivered
            .fetch_add(n as u64, Ordering::Relaxed);
        Ok(batch)
    }

    async fn pull_postponing(&self, handle: &mut SampleHandle, n: usize) -> SampleBatch {
        let dim = self.config.value_dim;
        let mut keys = Vec::with_capacity(n);
        let mut values = Values::with_capacity(dim, n);
        let mut row = vec![0.0; dim];
        while keys.len() < n {
            let (key, postponed) = handle.pending.pop_front().expect("handle underflow");
            let plan = {
                let mut slot = self.slot(key);
                match &mut slot.state {
                    SlotState::Replica(r) => {
                        r.read_into(&mut row);
                        None
                    }
                    SlotState::Relocated(s) => {
                        if !postponed && !matches!(s, OwnershipState::Owned { .. }) {
                            drop(slot);
                            handle.pending.push_back((key, true));
                            handle.postponed += 1;
                            handle.dist.stats.postponed.fetch_add(1, Ordering::Relaxed);
                            self.localize_key(key, Cause::Sampling, false);
                            continue;
                        }
                        self.plan_read(s, &mut row)
                    }
                }
            };
            if let Some(plan) = plan {
                let (v, _) = self.finish_read(key, plan, Cause::Sampling).await;
                row.copy_from_slice(&v);
            }
            keys.push(key);
            values.push_row(&row);
        }
        SampleBatch { keys, values }
    }

    /// Reads `key` into `out` if it is available here.
    fn read_if_local(&self, key: Key, out: &mut [crate::model::Scalar]) -> bool {
        let slot = self.slot(key);
        match &slot.state {
            SlotState::Replica(r) => {
                r.read_into(out);
                true
            }
            SlotState::Relocated(OwnershipState::Owned { value, .. }) => {
                out.copy_from_slice(value);
                true
            }
            SlotState::Relocated(_) => false,
        }
    }

    async fn pull_local(&self, reg: &Registered, n: usize, rng: &mut ChaCha8Rng) -> SampleBatch {
        let dim = self.config.value_dim;
        let mut keys = Vec::with_capacity(n);
        let mut values = Values::with_capacity(dim, n);
        let mut row = vec![0.0; dim];
        'draw: while keys.len() < n {
            for _ in 0..LOCAL_REJECTION_TRIES {
                let k = reg.target.sample(rng);
                if self.read_if_local(k, &mut row) {
                    keys.push(k);
                    values.push_row(&row);
                    continue 'draw;
                }
            }
            // Rare or no local mass: draw from the local part directly.
            let local: Vec<(Key, f64)> = reg
                .target
                .keys()
                .iter()
                .zip(reg.target.probs())
                .filter(|(k, p)| **p > 0.0 && self.is_local(**k))
                .map(|(k, p)| (*k, *p))
                .collect();
            let total: f64 = local.iter().map(|x| x.1).sum();
            if total > 0.0 {
                let mut x = rng.random::<f64>() * total;
                let mut pick = local[local.len() - 1].0;
                for &(k, p) in &local {
                    if x < p {
                        pick = k;
                        break;
                    }
                    x -= p;
                }
                if self.read_if_local(pick, &mut row) {
                    keys.push(pick);
                    values.push_row(&row);
                }
                continue;
            }
            reg.stats.local_fallbacks.fetch_add(1, Ordering::Relaxed);
            let k = reg.target.sample(rng);
            self.localize_key(k, Cause::Sampling, false);
            let v = self.read_keys(&[k], Cause::Sampling).await;
            keys.push(k);
            values.push_row(v.row(0));
        }
        SampleBatch { keys, values }
    }
}
