//! One parameter-server process: co-located workers and server state.
//!
//! Every key has one slot per node guarded by a single latch. The slot tells
//! both the management technique and, for relocated keys, whether the key is
//! currently allocated here, so a worker learns both with one acquisition.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use futures::channel::oneshot;
use parking_lot::{Mutex, MutexGuard};

use crate::model::{
    home_node_of, ClusterConfig, Key, ManagementTechnique, NodeId, Scalar, TechniqueTable,
};
use crate::relocation::{OwnershipState, RelocationStats};
use crate::replication::{ClipTracker, ReplicaSlot, ReplicationState, SyncControl};
use crate::sampling::SamplingManager;
use crate::transport::{Message, MessageHandler, MessageKind, Runtime, Transport};

pub(crate) const NO_NODE: usize = usize::MAX;

pub(crate) enum SlotState {
    Replica(ReplicaSlot),
    Relocated(OwnershipState),
}

pub(crate) struct Slot {
    pub(crate) state: SlotState,
    /// Current owner according to this node's directory. Only meaningful on
    /// the key's home node.
    pub(crate) dir_owner: NodeId,
}

pub struct Node {
    pub(crate) id: NodeId,
    pub(crate) config: Arc<ClusterConfig>,
    pub(crate) techniques: TechniqueTable,
    pub(crate) transport: Arc<dyn Transport>,
    pub(crate) runtime: Arc<dyn Runtime>,
    pub(crate) slots: Vec<Mutex<Slot>>,
    /// Last known owner of relocated keys that live elsewhere.
    pub(crate) hints: Vec<AtomicUsize>,
    pending: Mutex<HashMap<u64, oneshot::Sender<Message>>>,
    next_request: AtomicU64,
    /// Relocated keys with a localize in flight towards this node.
    pub(crate) incoming: AtomicUsize,
    pub(crate) reloc_stats: RelocationStats,
    pub(crate) replication: ReplicationState,
    pub(crate) sampling: SamplingManager,
}

impl Node {
    pub(crate) fn new(
        id: NodeId,
        config: Arc<ClusterConfig>,
        techniques: TechniqueTable,
        transport: Arc<dyn Transport>,
        runtime: Arc<dyn Runtime>,
        sync_control: Arc<Mutex<SyncControl>>,
    ) -> Self {
        let dim = config.value_dim;
        let slots = (0..config.num_keys)
            .map(|i| {
                let key = Key::from(i);
                let home = home_node_of(key, &config);
                let state = match techniques.get(key) {
                    ManagementTechnique::Replicated => SlotState::Replica(ReplicaSlot::new(dim)),
                    ManagementTechnique::Relocated if home == id => {
                        SlotState::Relocated(OwnershipState::Owned {
                            value: vec![0.0; dim],
                            version: 0,
                        })
                    }
                    ManagementTechnique::Relocated => SlotState::Relocated(OwnershipState::Remote),
                };
                Mutex::new(Slot {
                    state,
                    dir_owner: if home == id { id } else { NO_NODE },
                })
            })
            .collect();
        let hints = (0..config.num_keys).map(|_| AtomicUsize::new(NO_NODE)).collect();
        let clip = config
            .clip_factor
            .map(|f| ClipTracker::new(f, config.clip_smoothing));
        Node {
            id,
            techniques,
            transport,
            runtime,
            slots,
            hints,
            pending: Mutex::new(HashMap::new()),
            next_request: AtomicU64::new(1),
            incoming: AtomicUsize::new(0),
            reloc_stats: RelocationStats::default(),
            replication: ReplicationState::new(clip, sync_control),
            sampling: SamplingManager::default(),
            config,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn techniques(&self) -> &TechniqueTable {
        &self.techniques
    }

    pub fn runtime(&self) -> &Arc<dyn Runtime> {
        &self.runtime
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    #[inline]
    pub(crate) fn slot(&self, key: Key) -> MutexGuard<'_, Slot> {
        self.slots[key.index()].lock()
    }

    pub(crate) fn home_of(&self, key: Key) -> NodeId {
        home_node_of(key, &self.config)
    }

    pub(crate) fn send(&self, msg: Message) {
        if let Err(e) = self.transport.send(msg) {
            // Node ids come from the directory and config; a routing failure
            // here means the cluster is misconfigured.
            panic!("node {}: send failed: {e}", self.id);
        }
    }

    /// Registers a pending request and returns its id plus the receiver that
    /// completes when the matching response arrives.
    pub(crate) fn register_request(&self) -> (u64, oneshot::Receiver<Message>) {
        let id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        self.pending.lock().insert(id, tx);
        (id, rx)
    }

    fn on_response(&self, msg: Message) {
        let tx = self.pending.lock().remove(&msg.request_id);
        match tx {
            Some(tx) => {
                let _ = tx.send(msg);
            }
            None => log::warn!(
                "node {}: response for unknown request {}",
                self.id,
                msg.request_id
            ),
        }
    }

    /// No relocation or remote access of this node is in flight.
    pub fn is_settled(&self) -> bool {
        self.incoming.load(Ordering::Acquire) == 0 && self.pending.lock().is_empty()
    }

    /// Sets the value of `key` out of band, before training starts. Writes the
    /// replica for replicated keys and the owner's copy for relocated keys.
    pub fn init_value(&self, key: Key, value: &[Scalar]) {
        assert_eq!(value.len(), self.config.value_dim);
        let mut slot = self.slot(key);
        match &mut slot.state {
            SlotState::Replica(r) => r.reset(value),
            SlotState::Relocated(OwnershipState::Owned { value: v, .. }) => {
                v.copy_from_slice(value)
            }
            SlotState::Relocated(_) => {}
        }
    }

    /// Reads the locally visible value of `key` without touching the network:
    /// the replica (including unsynchronized local writes) or the owned copy.
    /// `None` if the key is relocated and not allocated here.
    pub fn peek(&self, key: Key) -> Option<(Vec<Scalar>, u64)> {
        let slot = self.slot(key);
        match &slot.state {
            SlotState::Replica(r) => Some((r.read(), r.version())),
            SlotState::Relocated(OwnershipState::Owned { value, version }) => {
                Some((value.clone(), *version))
            }
            SlotState::Relocated(_) => None,
        }
    }

    /// Whether a relocated key is currently allocated here (replicated keys are
    /// always local).
    pub fn is_local(&self, key: Key) -> bool {
        let slot = self.slot(key);
        matches!(
            slot.state,
            SlotState::Replica(_) | SlotState::Relocated(OwnershipState::Owned { .. })
        )
    }

    /// Directory entry for a key homed at this node.
    pub fn directory_owner(&self, key: Key) -> Option<NodeId> {
        (self.home_of(key) == self.id).then(|| self.slot(key).dir_owner)
    }

    pub fn relocation_stats(&self) -> crate::relocation::RelocationCounters {
        self.reloc_stats.snapshot()
    }
}

impl MessageHandler for Node {
    fn handle(&self, msg: Message) {
        match msg.kind {
            MessageKind::PullReq | MessageKind::PushReq => self.on_access_request(msg),
            MessageKind::PullResp | MessageKind::PushAck => self.on_response(msg),
            MessageKind::LocalizeReq => self.on_localize_request(msg),
            MessageKind::LocalizeForward => self.on_localize_forward(msg),
            MessageKind::LocalizeGrant => self.on_localize_grant(msg),
            MessageKind::SyncExchange => self.on_sync_exchange(msg),
        }
    }
}
