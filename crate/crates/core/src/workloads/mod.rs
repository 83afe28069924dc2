//! Desk-scale training workloads that exercise direct and sampling access.
//!
//! # Dataset files
//!
//! Datasets are generated in memory from a seed. They can also be written to
//! and read back from a little-endian binary file:
//!
//! | field            | type      |
//! |------------------|-----------|
//! | magic `MIXPSDS1` | 8 bytes   |
//! | kind             | u32 (1 = matrix, 2 = embedding) |
//!
//! A matrix continues with `rows, cols, n_train, n_test` as u64, then
//! `n_train + n_test` cells of `(row: u32, col: u32, value: f64)`, training
//! cells first. An embedding dataset continues with `entities, n_train,
//! n_test` as u64, then `n_train + n_test` pairs of `(head: u32, tail: u32)`,
//! then one negative `u32` per held-out pair.

pub mod embed;
pub mod mf;
pub mod zipf;

use std::io::{Read, Write};
use std::sync::Arc;

pub use embed::{EmbedParams, EmbedSpec, EmbedWorkload, EmbeddingDataset, NegativeDistribution};
pub use mf::{Cell, MatrixDataset, MfParams, MfSpec, MfWorkload};
pub use zipf::{zipf_weights, Zipf};

use crate::api::WorkerContext;
use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::model::{Key, Scalar};
use crate::sampling::{DistId, TargetDistribution};
use crate::transport::BoxFuture;

const DUMP_MAGIC: &[u8; 8] = b"MIXPSDS1";
pub(crate) const DUMP_KIND_MATRIX: u32 = 1;
pub(crate) const DUMP_KIND_EMBEDDING: u32 = 2;

fn write_header<W: Write>(w: &mut W, kind: u32) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&kind.to_le_bytes())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, kind: u32) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Wire("not a dataset file".into()));
    }
    let got = mf::read_u32(r)?;
    if got != kind {
        return Err(Error::Wire(format!("dataset kind {got}, expected {kind}")));
    }
    Ok(())
}

/// Loss accumulated by one worker over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WorkerEpoch {
    pub loss_sum: f64,
    pub points: u64,
}

/// A training task whose model lives in the parameter server.
pub trait Workload: Send + Sync + 'static {
    fn name(&self) -> &'static str;

    /// Name of the held-out metric returned by [`Self::evaluate`].
    fn metric_name(&self) -> &'static str;

    fn num_keys(&self) -> usize;

    fn value_dim(&self) -> usize;

    /// Expected accesses per key in one epoch, used to assign techniques.
    fn access_counts(&self) -> Vec<u64>;

    fn initial_value(&self, key: Key) -> Vec<Scalar>;

    fn training_points(&self) -> usize;

    /// Registers anything the workload needs on a freshly built cluster.
    fn setup(&self, _cluster: &Cluster) -> Result<()> {
        Ok(())
    }

    /// Registered sampling distribution, for workloads that sample.
    fn sampling_target(&self) -> Option<(DistId, &TargetDistribution)> {
        None
    }

    /// One pass of one worker over its partition of the training data.
    fn worker_epoch(
        self: Arc<Self>,
        ctx: WorkerContext,
        epoch: usize,
    ) -> BoxFuture<Result<(WorkerContext, WorkerEpoch)>>;

    /// Held-out metric of the model as seen by node 0. The cluster must be
    /// settled.
    fn evaluate(&self, cluster: &Cluster) -> Result<f64>;
}

/// Every key's current value, without messages.
pub(crate) fn snapshot_model(cluster: &Cluster) -> Result<Vec<Vec<f64>>> {
    (0..cluster.config().num_keys as u64)
        .map(|k| {
            cluster
                .snapshot(Key(k))
                .map(|v| v.into_iter().map(|x| x as f64).collect())
                .ok_or_else(|| Error::InvalidInput(format!("key {k} is in transit")))
        })
        .collect()
}
