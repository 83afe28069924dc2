//! SGD matrix factorization on synthetic Zipf-skewed data.
//!
//! Row `i` of the matrix is key `i`; column `j` is key `rows + j`. Both hold
//! a rank-`d` factor vector. Cells are partitioned to nodes by row block and
//! to workers within a node by column; each worker visits its columns in a
//! fresh random order every epoch and asks for the next column to be moved
//! to its node while it works on the current one.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{read_header, write_header, WorkerEpoch, Workload, DUMP_KIND_MATRIX};
use crate::api::WorkerContext;
use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::model::{derive_seed, Key, Scalar, Values};
use crate::transport::BoxFuture;
use crate::workloads::zipf::Zipf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfSpec {
    pub rows: usize,
    pub cols: usize,
    /// Revealed cells, training and held-out together.
    pub cells: usize,
    /// Rank of the generating factors.
    pub true_rank: usize,
    pub zipf_exponent: f64,
    /// Standard deviation of the Gaussian noise added to every rating.
    pub noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for MfSpec {
    fn default() -> Self {
        MfSpec {
            rows: 200,
            cols: 200,
            cells: 8_000,
            true_rank: 4,
            zipf_exponent: 1.1,
            noise: 0.1,
            test_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfParams {
    /// Rank of the learned factors.
    pub rank: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    /// Initial factor entries are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for MfParams {
    fn default() -> Self {
        MfParams {
            rank: 4,
            learning_rate: 0.02,
            regularization: 0.01,
            init_scale: 0.3,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixDataset {
    pub rows: usize,
    pub cols: usize,
    pub train: Vec<Cell>,
    pub test: Vec<Cell>,
}

impl MatrixDataset {
    /// Draws true factors with entries `N(0, 1/sqrt(rank))`, so that true
    /// ratings have unit variance, then reveals distinct cells whose row and
    /// column are independently Zipf distributed.
    pub fn generate(spec: &MfSpec) -> Result<Self> {
        if spec.rows == 0 || spec.cols == 0 || spec.true_rank == 0 {
            return Err(Error::InvalidInput("matrix dimensions and rank must be positive".into()));
        }
        if spec.cells == 0 || spec.cells > spec.rows * spec.cols / 2 {
            return Err(Error::InvalidInput(format!(
                "{} cells do not fit a {}x{} matrix at most half full",
                spec.cells, spec.rows, spec.cols
            )));
        }
        if !(0.0..1.0).contains(&spec.test_fraction) {
            return Err(Error::InvalidInput("test fraction must be in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x3a7]));
        let row_dist = Zipf::new(spec.rows, spec.zipf_exponent, &mut rng)?;
        let col_dist = Zipf::new(spec.cols, spec.zipf_exponent, &mut rng)?;
        let sd = (spec.true_rank as f64).powf(-0.25);
        let factor = Normal::new(0.0, sd).unwrap();
        let row_factors: Vec<f64> = (0..spec.rows * spec.true_rank).map(|_| factor.sample(&mut rng)).collect();
        let col_factors: Vec<f64> = (0..spec.cols * spec.true_rank).map(|_| factor.sample(&mut rng)).collect();
        let noise = Normal::new(0.0, spec.noise)
            .map_err(|e| Error::InvalidInput(format!("noise: {e}")))?;

        let mut seen = HashSet::with_capacity(spec.cells);
        let mut cells = Vec::with_capacity(spec.cells);
        let max_tries = spec.cells.saturating_mul(1000);
        let mut tries = 0usize;
        while cells.len() < spec.cells {
            tries += 1;
            if tries > max_tries {
                return Err(Error::InvalidInput(format!(
                    "could not place {} distinct cells; lower the skew or the cell count",
                    spec.cells
                )));
            }
            let (r, c) = (row_dist.sample(&mut rng), col_dist.sample(&mut rng));
            if !seen.insert((r as u32, c as u32)) {
                continue;
            }
            let w = &row_factors[r * spec.true_rank..(r + 1) * spec.true_rank];
            let h = &col_factors[c * spec.true_rank..(c + 1) * spec.true_rank];
            let truth: f64 = w.iter().zip(h).map(|(a, b)| a * b).sum();
            cells.push(Cell {
                row: r as u32,
                col: c as u32,
                value: truth + noise.sample(&mut rng),
            });
        }
        cells.shuffle(&mut rng);
        let n_test = (spec.cells as f64 * spec.test_fraction).round() as usize;
        let test = cells.split_off(spec.cells - n_test);
        Ok(MatrixDataset {
            rows: spec.rows,
            cols: spec.cols,
            train: cells,
            test,
        })
    }

    pub fn row_key(&self, row: u32) -> Key {
        Key(row as u64)
    }

    pub fn col_key(&self, col: u32) -> Key {
        Key((self.rows + col as usize) as u64)
    }

    pub fn num_keys(&self) -> usize {
        self.rows + self.cols
    }

    /// Direct accesses per key in one training epoch.
    pub fn access_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_keys()];
        for c in &self.train {
            counts[self.row_key(c.row).index()] += 1;
            counts[self.col_key(c.col).index()] += 1;
        }
        counts
    }

    /// Writes the dataset in the binary layout described in the module docs
    /// of [`crate::workloads`].
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, DUMP_KIND_MATRIX)?;
        for v in [self.rows as u64, self.cols as u64, self.train.len() as u64, self.test.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in self.train.iter().chain(&self.test) {
            w.write_all(&c.row.to_le_bytes())?;
            w.write_all(&c.col.to_le_bytes())?;
            w.write_all(&c.value.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        read_header(&mut r, DUMP_KIND_MATRIX)?;
        let mut head = [0u64; 4];
        for v in &mut head {
            *v = read_u64(&mut r)?;
        }
        let [rows, cols, n_train, n_test] = head.map(|v| v as usize);
        let mut cells = Vec::with_capacity(n_train + n_test);
        for _ in 0..n_train + n_test {
            let row = read_u32(&mut r)?;
            let col = read_u32(&mut r)?;
            let value = f64::from_le_bytes(read_array(&mut r)?);
            if row as usize >= rows || col as usize >= cols {
                return Err(Error::Wire(format!("cell ({row}, {col}) outside {rows}x{cols}")));
            }
            cells.push(Cell { row, col, value });
        }
        let test = cells.split_off(n_train);
        Ok(MatrixDataset {
            rows,
            cols,
            train: cells,
            test,
        })
    }
}

pub(super) fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub(super) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub(super) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

/// Squared error of one cell plus L2 regularization of both factors:
/// `(r - w.h)^2 + reg * (|w|^2 + |h|^2)`.
pub fn cell_loss(w: &[f64], h: &[f64], rating: f64, reg: f64) -> f64 {
    let e = rating - dot(w, h);
    e * e + reg * (dot(w, w) + dot(h, h))
}

/// Gradient of [`cell_loss`] with respect to `w` and `h`.
pub fn cell_gradient(w: &[f64], h: &[f64], rating: f64, reg: f64) -> (Vec<f64>, Vec<f64>) {
    let e = rating - dot(w, h);
    let gw = w.iter().zip(h).map(|(wi, hi)| -2.0 * e * hi + 2.0 * reg * wi).collect();
    let gh = w.iter().zip(h).map(|(wi, hi)| -2.0 * e * wi + 2.0 * reg * hi).collect();
    (gw, gh)
}

pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Work list of one worker: its columns, each with the training cells it holds.
type ColumnWork = Vec<(u32, Vec<Cell>)>;

pub struct MfWorkload {
    data: Arc<MatrixDataset>,
    params: MfParams,
    seed: u64,
    partition: Vec<ColumnWork>,
    row_blocks: Vec<Vec<Key>>,
    workers_per_node: usize,
}

impl MfWorkload {
    pub fn new(
        data: Arc<MatrixDataset>,
        params: MfParams,
        num_nodes: usize,
        workers_per_node: usize,
        seed: u64,
    ) -> Result<Self> {
        if params.rank == 0 {
            return Err(Error::InvalidInput("factor rank must be positive".into()));
        }
        if num_nodes == 0 || workers_per_node == 0 {
            return Err(Error::InvalidInput("need at least one node and worker".into()));
        }
        let node_of_row = |r: u32| r as usize * num_nodes / data.rows;
        let mut work: Vec<BTreeMap<u32, Vec<Cell>>> = vec![BTreeMap::new(); num_nodes * workers_per_node];
        for c in &data.train {
            let g = node_of_row(c.row) * workers_per_node + c.col as usize % workers_per_node;
            work[g].entry(c.col).or_default().push(*c);
        }
        let mut row_blocks = vec![Vec::new(); num_nodes];
        for r in 0..data.rows as u32 {
            row_blocks[node_of_row(r)].push(data.row_key(r));
        }
        Ok(MfWorkload {
            partition: work.into_iter().map(|m| m.into_iter().collect()).collect(),
            data,
            params,
            seed,
            row_blocks,
            workers_per_node,
        })
    }

    pub fn dataset(&self) -> &MatrixDataset {
        &self.data
    }

    /// Training cells assigned to worker `worker` of node `node`.
    pub fn cells_of(&self, node: usize, worker: usize) -> usize {
        self.partition[node * self.workers_per_node + worker]
            .iter()
            .map(|(_, cells)| cells.len())
            .sum()
    }

    async fn epoch(self: Arc<Self>, mut ctx: WorkerContext, epoch: usize) -> Result<(WorkerContext, WorkerEpoch)> {
        let g = ctx.node_id() * self.workers_per_node + ctx.worker();
        if epoch == 0 && ctx.worker() == 0 {
            ctx.localize(&self.row_blocks[ctx.node_id()])?;
        }
        let work = &self.partition[g];
        let mut order: Vec<usize> = (0..work.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0xc01, g as u64, epoch as u64]));
        order.shuffle(&mut rng);

        let d = self.params.rank;
        let lr = self.params.learning_rate;
        let reg = self.params.regularization;
        let mut out = WorkerEpoch::default();
        for (i, &j) in order.iter().enumerate() {
            let (col, cells) = &work[j];
            if let Some(&next) = order.get(i + 1) {
                ctx.localize(&[self.data.col_key(work[next].0)])?;
            }
            let ck = self.data.col_key(*col);
            for c in cells {
                let keys = [self.data.row_key(c.row), ck];
                let vals = ctx.pull(&keys).await?;
                let w: Vec<f64> = vals.row(0).iter().map(|&x| x as f64).collect();
                let h: Vec<f64> = vals.row(1).iter().map(|&x| x as f64).collect();
                let err = c.value - dot(&w, &h);
                out.loss_sum += err * err;
                out.points += 1;
                let (gw, gh) = cell_gradient(&w, &h, c.value, reg);
                let mut deltas = Values::with_capacity(d, 2);
                deltas.push_row(&gw.iter().map(|g| (-lr * g) as Scalar).collect::<Vec<_>>());
                deltas.push_row(&gh.iter().map(|g| (-lr * g) as Scalar).collect::<Vec<_>>());
                ctx.push(&keys, &deltas).await?;
                ctx.compute().await;
            }
        }
        Ok((ctx, out))
    }
}

impl Workload for MfWorkload {
    fn name(&self) -> &'static str {
        "mf"
    }

    fn metric_name(&self) -> &'static str {
        "rmse"
    }

    fn num_keys(&self) -> usize {
        self.data.num_keys()
    }

    fn value_dim(&self) -> usize {
        self.params.rank
    }

    fn access_counts(&self) -> Vec<u64> {
        self.data.access_counts()
    }

    fn initial_value(&self, key: Key) -> Vec<Scalar> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x1417, key.0]));
        let a = self.params.init_scale;
        (0..self.params.rank)
            .map(|_| if a > 0.0 { rng.random_range(-a..=a) as Scalar } else { 0.0 })
            .collect()
    }

    fn training_points(&self) -> usize {
        self.data.train.len()
    }

    fn worker_epoch(self: Arc<Self>, ctx: WorkerContext, epoch: usize) -> BoxFuture<Result<(WorkerContext, WorkerEpoch)>> {
        Box::pin(self.epoch(ctx, epoch))
    }

    /// Root mean squared error over the held-out cells.
    fn evaluate(&self, cluster: &Cluster) -> Result<f64> {
        if self.data.test.is_empty() {
            return Ok(f64::NAN);
        }
        let model = super::snapshot_model(cluster)?;
        let sq: f64 = self
            .data
            .test
            .iter()
            .map(|c| {
                let w = &model[self.data.row_key(c.row).index()];
                let h = &model[self.data.col_key(c.col).index()];
                (c.value - dot(w, h)).powi(2)
            })
            .sum();
        Ok((sq / self.data.test.len() as f64).sqrt())
    }
}
