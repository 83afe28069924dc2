//! Shared domain types: keys, values, cluster configuration and the static
//! per-key choice of management technique.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[cfg(not(feature = "single-precision"))]
pub type Scalar = f64;
#[cfg(feature = "single-precision")]
pub type Scalar = f32;

pub type NodeId = usize;

/// Dense parameter key in `[0, num_keys)`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key(pub u64);

impl Key {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for Key {
    fn from(i: usize) -> Self {
        Key(i as u64)
    }
}

/// One parameter row (for example an embedding vector).
pub type ParameterValue = Vec<Scalar>;

/// Additive update with the same width as a [`ParameterValue`].
pub type UpdateDelta = Vec<Scalar>;

/// A batch of values stored row-major with a fixed width.
#[derive(Clone, Debug, PartialEq)]
pub struct Values {
    dim: usize,
    data: Vec<Scalar>,
}

impl Values {
    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Values {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn zeros(dim: usize, rows: usize) -> Self {
        Values {
            dim,
            data: vec![0.0; dim * rows],
        }
    }

    pub fn from_flat(dim: usize, data: Vec<Scalar>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim));
        Values { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Scalar] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push_row(&mut self, row: &[Scalar]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Scalar]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[Scalar] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<Scalar> {
        self.data
    }
}

/// Mixes `parts` into `base` to derive independent generator seeds
/// (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in parts {
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManagementTechnique {
    Replicated,
    Relocated,
}

/// Cluster-wide configuration. Every field can be set from a config file
/// (TOML-style `key = value` lines or JSON) and overridden on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub num_nodes: usize,
    pub workers_per_node: usize,
    pub value_dim: usize,
    pub num_keys: usize,
    /// Target interval between replica synchronization rounds.
    pub staleness_ms: f64,
    /// Turns replica synchronization off entirely; replicas diverge.
    pub sync_disabled: bool,
    /// Replicate a key if its access count exceeds this multiple of the mean.
    pub replication_threshold_factor: f64,
    /// Keys per sample pool (G).
    pub pool_size: usize,
    /// Traversals per sample pool (U).
    pub use_frequency: usize,
    /// Clip replicated updates whose norm exceeds `clip_factor` times the
    /// running mean norm. `None` disables clipping.
    pub clip_factor: Option<f64>,
    /// Smoothing weight of the running mean update norm used for clipping.
    pub clip_smoothing: f64,
    /// Number of past pool localizations averaged by the relocation-time estimate.
    pub relocation_estimate_window: usize,
    /// Remember the last known owner of remote relocated keys.
    pub owner_hints: bool,
    /// Virtual compute time charged per data point in simulated runs (microseconds).
    pub step_cost_us: u64,
    pub rng_seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_nodes: 1,
            workers_per_node: 1,
            value_dim: 1,
            num_keys: 1,
            staleness_ms: 40.0,
            sync_disabled: false,
            replication_threshold_factor: 100.0,
            pool_size: 250,
            use_frequency: 16,
            clip_factor: None,
            clip_smoothing: 0.01,
            relocation_estimate_window: 8,
            owner_hints: true,
            step_cost_us: 0,
            rng_seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn new(num_nodes: usize, num_keys: usize, value_dim: usize) -> Self {
        ClusterConfig {
            num_nodes,
            num_keys,
            value_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_nodes", self.num_nodes),
            ("workers_per_node", self.workers_per_node),
            ("value_dim", self.value_dim),
            ("num_keys", self.num_keys),
            ("pool_size", self.pool_size),
            ("use_frequency", self.use_frequency),
            ("relocation_estimate_window", self.relocation_estimate_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.staleness_ms > 0.0) {
            return Err(Error::Config("staleness_ms must be positive".into()));
        }
        if !(self.replication_threshold_factor > 0.0) {
            return Err(Error::Config(
                "replication_threshold_factor must be positive".into(),
            ));
        }
        if let Some(f) = self.clip_factor {
            if !(f > 0.0) {
                return Err(Error::Config("clip_factor must be positive".into()));
            }
        }
        if !(self.clip_smoothing > 0.0 && self.clip_smoothing <= 1.0) {
            return Err(Error::Config("clip_smoothing must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// `None` when synchronization is disabled.
    pub fn staleness_interval(&self) -> Option<Duration> {
        if self.sync_disabled || !self.staleness_ms.is_finite() {
            None
        } else {
            Some(Duration::from_secs_f64(self.staleness_ms / 1000.0))
        }
    }

    pub fn step_cost(&self) -> Duration {
        Duration::from_micros(self.step_cost_us)
    }

    /// Reads a config file. `.json` files are parsed as JSON, anything else as
    /// `key = value` lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ClusterConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn check_key(&self, key: Key) -> Result<()> {
        if key.index() < self.num_keys {
            Ok(())
        } else {
            Err(Error::KeyOutOfRange {
                key,
                num_keys: self.num_keys,
            })
        }
    }
}

/// Directory authority for `key`: contiguous ranges of `ceil(num_keys / Q)` keys.
pub fn home_node_of(key: Key, config: &ClusterConfig) -> NodeId {
    let per_node = config.num_keys.div_ceil(config.num_nodes);
    key.index() / per_node
}

/// First key and one-past-last key homed at `node`.
pub fn home_range(node: NodeId, config: &ClusterConfig) -> (usize, usize) {
    let per_node = config.num_keys.div_ceil(config.num_nodes);
    let lo = (node * per_node).min(config.num_keys);
    let hi = ((node + 1) * per_node).min(config.num_keys);
    (lo, hi)
}

/// Replicate key `k` iff `access_counts[k] > threshold_factor * mean(access_counts)`.
pub fn assign_techniques(
    access_counts: &[u64],
    threshold_factor: f64,
) -> Result<Vec<ManagementTechnique>> {
    if access_counts.is_empty() {
        return Err(Error::InvalidInput("access counts are empty".into()));
    }
    if !(threshold_factor > 0.0) {
        return Err(Error::InvalidInput("threshold factor must be positive".into()));
    }
    let total: u128 = access_counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(Error::InvalidInput("all access counts are zero".into()));
    }
    let mean = total as f64 / access_counts.len() as f64;
    let threshold = threshold_factor * mean;
    Ok(access_counts
        .iter()
        .map(|&c| {
            if c as f64 > threshold {
                ManagementTechnique::Replicated
            } else {
                ManagementTechnique::Relocated
            }
        })
        .collect())
}

/// Replicate the `k` most frequently accessed keys; ties go to the lower key.
pub fn assign_top_k(access_counts: &[u64], k: usize) -> Vec<ManagementTechnique> {
    let mut order: Vec<usize> = (0..access_counts.len()).collect();
    order.sort_by(|&a, &b| access_counts[b].cmp(&access_counts[a]).then(a.cmp(&b)));
    let mut out = vec![ManagementTechnique::Relocated; access_counts.len()];
    for &i in order.iter().take(k) {
        out[i] = ManagementTechnique::Replicated;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyDescriptor {
    pub key: Key,
    pub technique: ManagementTechnique,
    pub home_node: NodeId,
}

/// Immutable technique assignment shared by all nodes of a run.
#[derive(Clone, Debug)]
pub struct TechniqueTable {
    techniques: Arc<[ManagementTechnique]>,
    replicated: Arc<[Key]>,
}

impl TechniqueTable {
    pub fn new(techniques: Vec<ManagementTechnique>) -> Self {
        let replicated: Vec<Key> = techniques
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == ManagementTechnique::Replicated)
            .map(|(i, _)| Key::from(i))
            .collect();
        TechniqueTable {
            techniques: techniques.into(),
            replicated: replicated.into(),
        }
    }

    pub fn all(technique: ManagementTechnique, num_keys: usize) -> Self {
        Self::new(vec![technique; num_keys])
    }

    #[inline]
    pub fn get(&self, key: Key) -> ManagementTechnique {
        self.techniques[key.index()]
    }

    pub fn len(&self) -> usize {
        self.techniques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.techniques.is_empty()
    }

    pub fn replicated_keys(&self) -> &[Key] {
        &self.replicated
    }

    pub fn num_replicated(&self) -> usize {
        self.replicated.len()
    }

    pub fn descriptor(&self, key: Key, config: &ClusterConfig) -> KeyDescriptor {
        KeyDescriptor {
            key,
            technique: self.get(key),
            home_node: home_node_of(key, config),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ManagementTechnique::*;

    #[test]
    fn uniform_counts_stay_relocated() {
        assert_eq!(assign_techniques(&[5, 5, 5, 5], 100.0).unwrap(), vec![Relocated; 4]);
    }

    #[test]
    fn single_hot_key_replicated() {
        let mut counts = vec![1u64; 1000];
        counts[0] = 1_000_000;
        let t = assign_techniques(&counts, 100.0).unwrap();
        assert_eq!(t[0], Replicated);
        assert!(t[1..].iter().all(|&x| x == Relocated));
    }

    #[test]
    fn single_key_equals_its_mean() {
        assert_eq!(assign_techniques(&[1], 100.0).unwrap(), vec![Relocated]);
        // boundary is strict
        assert_eq!(assign_techniques(&[2, 0], 1.0).unwrap(), vec![Replicated, Relocated]);
        assert_eq!(assign_techniques(&[1, 1], 1.0).unwrap(), vec![Relocated, Relocated]);
    }

    #[test]
    fn rejects_empty_and_zero_counts() {
        assert!(matches!(assign_techniques(&[], 100.0), Err(Error::InvalidInput(_))));
        assert!(matches!(assign_techniques(&[0, 0], 100.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn home_nodes() {
        let cfg = ClusterConfig::new(4, 100, 1);
        assert_eq!(home_node_of(Key(0), &cfg), 0);
        assert_eq!(home_node_of(Key(99), &cfg), 3);
        let single = ClusterConfig::new(1, 100, 1);
        assert_eq!(home_node_of(Key(50), &single), 0);
    }

    #[test]
    fn top_k_breaks_ties_by_key() {
        let t = assign_top_k(&[3, 7, 7, 1], 2);
        assert_eq!(t, vec![Relocated, Replicated, Replicated, Relocated]);
    }

    #[test]
    fn config_from_key_value_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let kv = dir.path().join("c.conf");
        std::fs::write(&kv, "num_nodes = 4\nnum_keys = 64\nstaleness_ms = 8\n").unwrap();
        let cfg = ClusterConfig::from_file(&kv).unwrap();
        assert_eq!((cfg.num_nodes, cfg.num_keys, cfg.pool_size), (4, 64, 250));
        assert_eq!(cfg.staleness_interval(), Some(Duration::from_millis(8)));

        let js = dir.path().join("c.json");
        std::fs::write(&js, r#"{"num_nodes": 2, "sync_disabled": true}"#).unwrap();
        let cfg = ClusterConfig::from_file(&js).unwrap();
        assert_eq!(cfg.num_nodes, 2);
        assert_eq!(cfg.staleness_interval(), None);

        std::fs::write(&kv, "num_nodes = 0\n").unwrap();
        assert!(ClusterConfig::from_file(&kv).is_err());
    }

    proptest! {
        #[test]
        fn raising_a_count_never_unreplicates(
            counts in prop::collection::vec(0u64..10_000, 1..64),
            idx in any::<prop::sample::Index>(),
            bump in 0u64..100_000,
            factor in 0.5f64..200.0,
        ) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let i = idx.index(counts.len());
            let before = assign_techniques(&counts, factor).unwrap();
            let mut raised = counts.clone();
            raised[i] += bump;
            let after = assign_techniques(&raised, factor).unwrap();
            if before[i] == Replicated {
                prop_assert_eq!(after[i], Replicated);
            }
            prop_assert_eq!(assign_techniques(&counts, factor).unwrap(), before);
        }

        #[test]
        fn home_ranges_partition_the_key_space(q in 1usize..17, n in 1usize..500) {
            let cfg = ClusterConfig::new(q, n, 1);
            let mut covered = 0;
            let mut prev_hi = 0;
            for node in 0..q {
                let (lo, hi) = home_range(node, &cfg);
                prop_assert_eq!(lo, prev_hi);
                for k in lo..hi {
                    prop_assert_eq!(home_node_of(Key::from(k), &cfg), node);
                }
                covered += hi - lo;
                prev_hi = hi;
            }
            prop_assert_eq!(covered, n);
        }
    }
}
