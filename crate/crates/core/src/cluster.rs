//! Assembles nodes, transport and runtime into a running cluster.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use futures::channel::oneshot;
use futures::future::join_all;
use parking_lot::Mutex;

use crate::api::WorkerContext;
use crate::error::{Error, Result};
use crate::model::{ClusterConfig, Key, ManagementTechnique, NodeId, Scalar, TechniqueTable};
use crate::node::Node;
use crate::replication::SyncControl;
use crate::sampling::{ConformityLevel, DistId, SchemeKind, TargetDistribution};
use crate::transport::sim::Simulation;
use crate::transport::tcp::{TcpNetwork, TokioRuntime};
use crate::transport::{MessageCounts, MessageHandler, NetworkModel, Runtime, Transport};

enum Backend {
    Sim(Simulation),
    Tcp {
        rt: tokio::runtime::Runtime,
        net: Arc<TcpNetwork>,
        start: Instant,
    },
}

pub struct Cluster {
    config: Arc<ClusterConfig>,
    techniques: TechniqueTable,
    nodes: Vec<Arc<Node>>,
    backend: Backend,
    control: Arc<Mutex<SyncControl>>,
    sync_loops: Vec<oneshot::Receiver<()>>,
}

impl Cluster {
    /// A cluster whose nodes run in one deterministic simulation.
    pub fn simulated(config: ClusterConfig, techniques: TechniqueTable, network: NetworkModel) -> Result<Self> {
        config.validate()?;
        check_table(&config, &techniques)?;
        let sim = Simulation::new(config.num_nodes, network, config.rng_seed);
        let config = Arc::new(config);
        let control = SyncControl::new(config.num_nodes);
        let nodes = build_nodes(&config, &techniques, sim.transport(), sim.runtime(), &control);
        for n in &nodes {
            sim.register(n.id(), Arc::downgrade(n) as Weak<dyn MessageHandler>);
        }
        Ok(Cluster {
            config,
            techniques,
            nodes,
            backend: Backend::Sim(sim),
            control,
            sync_loops: Vec::new(),
        })
    }

    /// A cluster of in-process nodes talking over loopback TCP sockets.
    pub fn tcp(config: ClusterConfig, techniques: TechniqueTable) -> Result<Self> {
        config.validate()?;
        check_table(&config, &techniques)?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(config.num_nodes.clamp(2, 8))
            .enable_all()
            .build()?;
        let q = config.num_nodes;
        let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
        let local: Vec<(NodeId, SocketAddr)> = (0..q).map(|i| (i, any)).collect();
        let net = rt.block_on(TcpNetwork::bind(q, &local))?;
        let config = Arc::new(config);
        let control = SyncControl::new(q);
        let runtime: Arc<dyn Runtime> = Arc::new(TokioRuntime::new(rt.handle().clone()));
        let transport: Arc<dyn Transport> = net.clone();
        let nodes = build_nodes(&config, &techniques, transport, runtime, &control);
        for n in &nodes {
            net.register(n.id(), Arc::downgrade(n) as Weak<dyn MessageHandler>);
        }
        let addrs: Vec<SocketAddr> = (0..q).map(|i| net.local_addr(i).unwrap()).collect();
        rt.block_on(net.connect(&addrs))?;
        Ok(Cluster {
            config,
            techniques,
            nodes,
            backend: Backend::Tcp {
                rt,
                net,
                start: Instant::now(),
            },
            control,
            sync_loops: Vec::new(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn techniques(&self) -> &TechniqueTable {
        &self.techniques
    }

    pub fn nodes(&self) -> &[Arc<Node>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Arc<Node> {
        &self.nodes[id]
    }

    pub fn simulation(&self) -> Option<&Simulation> {
        match &self.backend {
            Backend::Sim(s) => Some(s),
            Backend::Tcp { .. } => None,
        }
    }

    pub fn is_simulated(&self) -> bool {
        matches!(self.backend, Backend::Sim(_))
    }

    /// Virtual time for simulated clusters, wall-clock time since start otherwise.
    pub fn now(&self) -> Duration {
        match &self.backend {
            Backend::Sim(s) => s.now(),
            Backend::Tcp { start, .. } => start.elapsed(),
        }
    }

    pub fn counters(&self) -> MessageCounts {
        match &self.backend {
            Backend::Sim(s) => s.counters(),
            Backend::Tcp { net, .. } => net.counters(),
        }
    }

    /// Drives the cluster until `fut` completes.
    pub fn run<F, T>(&self, fut: F) -> T
    where
        F: Future<Output = T> + Send + 'static,
        T: Send + 'static,
    {
        match &self.backend {
            Backend::Sim(s) => s.block_on(fut),
            Backend::Tcp { rt, .. } => rt.block_on(fut),
        }
    }

    /// Worker contexts for every worker of every node, node-major.
    pub fn worker_contexts(&self) -> Vec<WorkerContext> {
        self.nodes
            .iter()
            .flat_map(|n| (0..self.config.workers_per_node).map(move |w| WorkerContext::new(n.clone(), w)))
            .collect()
    }

    /// Sets the initial value of `key` everywhere it is stored.
    pub fn init_value(&self, key: Key, value: &[Scalar]) -> Result<()> {
        self.config.check_key(key)?;
        if value.len() != self.config.value_dim {
            return Err(Error::LengthMismatch {
                what: "value width",
                left: value.len(),
                right: self.config.value_dim,
            });
        }
        for n in &self.nodes {
            n.init_value(key, value);
        }
        Ok(())
    }

    /// Registers `target` on every node; the id is the same on all of them.
    pub fn register_distribution(&self, target: TargetDistribution, level: ConformityLevel) -> Result<DistId> {
        let scheme = SchemeKind::for_level(level, self.config.pool_size, self.config.use_frequency);
        self.register_with_scheme(target, scheme, level)
    }

    pub fn register_with_scheme(
        &self,
        target: TargetDistribution,
        scheme: SchemeKind,
        level: ConformityLevel,
    ) -> Result<DistId> {
        self.register_on_all(target, scheme, level, false)
    }

    /// Registers with pool recording on every node (see [`Node::pool_history`]).
    pub fn register_recording_pools(
        &self,
        target: TargetDistribution,
        scheme: SchemeKind,
        level: ConformityLevel,
    ) -> Result<DistId> {
        self.register_on_all(target, scheme, level, true)
    }

    fn register_on_all(
        &self,
        target: TargetDistribution,
        scheme: SchemeKind,
        level: ConformityLevel,
        record_pools: bool,
    ) -> Result<DistId> {
        let target = Arc::new(target);
        let mut id = None;
        for n in &self.nodes {
            let got = if record_pools {
                n.register_recording_pools(target.clone(), scheme, level)?
            } else {
                n.register_with_scheme(target.clone(), scheme, level)?
            };
            debug_assert!(id.is_none_or(|i| i == got));
            id = Some(got);
        }
        Ok(id.unwrap())
    }

    /// Starts the periodic synchronization loop on every node, unless
    /// synchronization is disabled.
    pub fn start_sync(&mut self) {
        let Some(interval) = self.config.staleness_interval() else {
            return;
        };
        for n in &self.nodes {
            let (tx, rx) = oneshot::channel();
            let node = n.clone();
            n.runtime().spawn(Box::pin(async move {
                node.sync_loop(interval).await;
                let _ = tx.send(());
            }));
            self.sync_loops.push(rx);
        }
    }

    /// Stops the synchronization loops after the last started round.
    pub fn stop_sync(&mut self) {
        if self.sync_loops.is_empty() {
            return;
        }
        self.control.lock().request_stop();
        let loops = std::mem::take(&mut self.sync_loops);
        self.run(async move {
            join_all(loops).await;
        });
    }

    /// Runs one synchronization round on all nodes, outside the periodic loop.
    /// Does nothing if no key is replicated.
    pub fn sync_now(&self) {
        if self.techniques.num_replicated() == 0 {
            return;
        }
        let rounds: Vec<_> = {
            let mut c = self.control.lock();
            self.nodes.iter().map(|n| (n.clone(), c.claim_final(n.id()))).collect()
        };
        self.run(async move {
            join_all(rounds.into_iter().map(|(n, r)| async move { n.sync_round(r).await })).await;
        });
    }

    /// Waits until no relocation or remote access is in flight anywhere.
    pub fn settle(&self) -> Result<()> {
        let settled = || self.nodes.iter().all(|n| n.is_settled());
        match &self.backend {
            Backend::Sim(s) => {
                if s.run_until(settled) {
                    Ok(())
                } else {
                    Err(Error::InvalidInput("simulation ran out of events before settling".into()))
                }
            }
            Backend::Tcp { rt, .. } => {
                let deadline = Instant::now() + Duration::from_secs(30);
                while !settled() {
                    if Instant::now() > deadline {
                        return Err(Error::Io(std::io::Error::other("cluster did not settle")));
                    }
                    rt.block_on(tokio::time::sleep(Duration::from_millis(1)));
                }
                Ok(())
            }
        }
    }

    /// Node currently holding relocated `key`, if it is not in transit.
    pub fn owner_of(&self, key: Key) -> Option<NodeId> {
        if self.techniques.get(key) == ManagementTechnique::Replicated {
            return None;
        }
        self.nodes.iter().position(|n| n.peek(key).is_some())
    }

    /// Reads `key` without messages: node 0's replica for replicated keys, the
    /// owner's copy for relocated keys. Call [`Self::settle`] first so that no
    /// relocated key is in transit.
    pub fn snapshot(&self, key: Key) -> Option<Vec<Scalar>> {
        match self.techniques.get(key) {
            ManagementTechnique::Replicated => self.nodes[0].peek(key).map(|v| v.0),
            ManagementTechnique::Relocated => self.nodes.iter().find_map(|n| n.peek(key)).map(|v| v.0),
        }
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        if let Backend::Sim(s) = &self.backend {
            s.shutdown();
        }
    }
}

fn check_table(config: &ClusterConfig, techniques: &TechniqueTable) -> Result<()> {
    if techniques.len() != config.num_keys {
        return Err(Error::LengthMismatch {
            what: "technique table vs keys",
            left: techniques.len(),
            right: config.num_keys,
        });
    }
    Ok(())
}

fn build_nodes(
    config: &Arc<ClusterConfig>,
    techniques: &TechniqueTable,
    transport: Arc<dyn Transport>,
    runtime: Arc<dyn Runtime>,
    control: &Arc<Mutex<SyncControl>>,
) -> Vec<Arc<Node>> {
    (0..config.num_nodes)
        .map(|i| {
            Arc::new(Node::new(
                i,
                config.clone(),
                techniques.clone(),
                transport.clone(),
                runtime.clone(),
                control.clone(),
            ))
        })
        .collect()
}
