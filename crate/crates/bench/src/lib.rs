//! Shared setup for the benchmarks in `benches/`.

use mixps_core::{Cluster, ClusterConfig, ManagementTechnique, NetworkModel, TechniqueTable};

/// Simulated cluster with every key relocated.
pub fn relocated_cluster(nodes: usize, keys: usize, dim: usize) -> Cluster {
    let cfg = ClusterConfig::new(nodes, keys, dim);
    Cluster::simulated(cfg, TechniqueTable::all(ManagementTechnique::Relocated, keys), NetworkModel::default())
        .expect("valid config")
}
