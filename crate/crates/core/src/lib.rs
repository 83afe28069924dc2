//! Parameter server that manages each key with the technique suited to its
//! access frequency: hot keys are replicated on every node and synchronized
//! with bounded staleness, long-tail keys are relocated to the node that
//! accesses them. Sampling accesses go through a separate API that lets the
//! server trade strict distribution conformity for locality.

pub mod api;
pub mod cluster;
pub mod error;
pub mod harness;
pub mod model;
mod node;
pub mod relocation;
pub mod replication;
pub mod sampling;
pub mod stats;
pub mod transport;
pub mod workloads;

pub use api::{AccessCounts, WorkerContext};
pub use cluster::Cluster;
pub use error::{Error, Result};
pub use model::{
    assign_techniques, assign_top_k, home_node_of, ClusterConfig, Key, KeyDescriptor,
    ManagementTechnique, NodeId, ParameterValue, Scalar, TechniqueTable, UpdateDelta, Values,
};
pub use node::Node;
pub use sampling::{
    ConformityLevel, DistId, SampleBatch, SampleHandle, SchemeKind, TargetDistribution,
};
pub use transport::{Cause, Message, MessageCounts, MessageKind, NetworkModel};
