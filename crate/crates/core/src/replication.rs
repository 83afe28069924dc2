//! Replication with time-bounded staleness for hot parameters.
//!
//! Every node holds a full replica of each replicated key. Writes go to a
//! local accumulator; periodically all nodes sum their accumulated updates
//! with a recursive-doubling all-reduce and add the sum to every replica.
//! Only keys written since the last round are exchanged. Because each pairwise
//! merge adds the same two operands, all replicas end a round bitwise equal.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use futures::channel::oneshot;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::model::{Key, NodeId, Scalar};
use crate::node::{Node, SlotState};
use crate::transport::{Cause, Message, MessageKind};

const FOLD_STAGE: u64 = 0xfe;
const UNFOLD_STAGE: u64 = 0xff;

pub(crate) struct ReplicaSlot {
    value: Vec<Scalar>,
    /// Local updates taken by the running synchronization round; empty when zero.
    inflight: Vec<Scalar>,
    /// Local updates not yet taken by a round; empty when zero.
    acc: Vec<Scalar>,
    dirty: bool,
    version: u64,
}

impl ReplicaSlot {
    pub(crate) fn new(dim: usize) -> Self {
        ReplicaSlot {
            value: vec![0.0; dim],
            inflight: Vec::new(),
            acc: Vec::new(),
            dirty: false,
            version: 0,
        }
    }

    pub(crate) fn reset(&mut self, value: &[Scalar]) {
        self.value.copy_from_slice(value);
        self.inflight.clear();
        self.acc.clear();
    }

    pub(crate) fn read_into(&self, out: &mut [Scalar]) {
        out.copy_from_slice(&self.value);
        for buf in [&self.inflight, &self.acc] {
            for (o, x) in out.iter_mut().zip(buf) {
                *o += x;
            }
        }
    }

    pub(crate) fn read(&self) -> Vec<Scalar> {
        let mut out = vec![0.0; self.value.len()];
        self.read_into(&mut out);
        out
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn is_dirty(&self) -> bool {
        self.dirty
    }

    /// Adds `scale * delta` to the accumulator. Returns true if the slot just
    /// became dirty.
    fn accumulate(&mut self, delta: &[Scalar], scale: Scalar) -> bool {
        if self.acc.is_empty() {
            self.acc.resize(delta.len(), 0.0);
        }
        for (a, d) in self.acc.iter_mut().zip(delta) {
            *a += scale * d;
        }
        self.version += 1;
        !std::mem::replace(&mut self.dirty, true)
    }
}

/// Clips update norms against a running mean of recent norms on this node.
pub(crate) struct ClipTracker {
    factor: f64,
    smoothing: f64,
    mean: Mutex<Option<f64>>,
}

impl ClipTracker {
    pub(crate) fn new(factor: f64, smoothing: f64) -> Self {
        ClipTracker {
            factor,
            smoothing,
            mean: Mutex::new(None),
        }
    }

    /// Scale to apply to an update of norm `norm`, judged against the mean of
    /// previous updates. The first update initializes the mean and is not
    /// clipped.
    pub(crate) fn scale(&self, norm: f64) -> f64 {
        let mut mean = self.mean.lock();
        let scale = match *mean {
            Some(m) if norm > self.factor * m => self.factor * m / norm,
            _ => 1.0,
        };
        *mean = Some(match *mean {
            None => norm,
            Some(m) => m + self.smoothing * (norm - m),
        });
        scale
    }
}

enum Mail {
    Arrived(Message),
    Waiting(oneshot::Sender<Message>),
}

/// Round bookkeeping shared by the nodes of one cluster, used to stop all
/// synchronization loops after the same round.
#[derive(Debug)]
pub struct SyncControl {
    started: Vec<u64>,
    stop_after: Option<u64>,
}

impl SyncControl {
    pub fn new(num_nodes: usize) -> Arc<Mutex<Self>> {
        Arc::new(Mutex::new(SyncControl {
            started: vec![0; num_nodes],
            stop_after: None,
        }))
    }

    /// Lets every loop finish the most recent round any node started, then stop.
    /// Returns that round.
    pub fn request_stop(&mut self) -> u64 {
        let last = self.started.iter().copied().max().unwrap_or(0);
        self.stop_after = Some(last);
        last
    }

    /// Claims the next round number for `node`, or `None` once stopping.
    fn begin_round(&mut self, node: NodeId) -> Option<u64> {
        let next = self.started[node] + 1;
        if self.stop_after.is_some_and(|s| next > s) {
            return None;
        }
        self.started[node] = next;
        Some(next)
    }

    /// Round number for an explicit round after the loops stopped.
    pub fn claim_final(&mut self, node: NodeId) -> u64 {
        self.started[node] += 1;
        self.started[node]
    }
}

/// Synchronization activity of one node.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncStats {
    pub rounds: u64,
    /// Sum over rounds of the keys in the reduced update set.
    pub keys_exchanged: u64,
    pub first_start: Option<Duration>,
    pub last_end: Duration,
    /// Total time spent inside rounds.
    pub busy: Duration,
    pub max_round: Duration,
}

impl SyncStats {
    /// Rounds per second between the first round start and the last round end.
    pub fn achieved_frequency_hz(&self) -> Option<f64> {
        let span = self.last_end.checked_sub(self.first_start?)?.as_secs_f64();
        (self.rounds > 0 && span > 0.0).then(|| self.rounds as f64 / span)
    }
}

pub(crate) struct ReplicationState {
    clip: Option<ClipTracker>,
    dirty: Mutex<Vec<Key>>,
    mailbox: Mutex<HashMap<u64, Mail>>,
    control: Arc<Mutex<SyncControl>>,
    stats: Mutex<SyncStats>,
}

impl ReplicationState {
    pub(crate) fn new(clip: Option<ClipTracker>, control: Arc<Mutex<SyncControl>>) -> Self {
        ReplicationState {
            clip,
            dirty: Mutex::new(Vec::new()),
            mailbox: Mutex::new(HashMap::new()),
            control,
            stats: Mutex::new(SyncStats::default()),
        }
    }
}

fn tag(round: u64, stage: u64) -> u64 {
    (round << 8) | stage
}

type UpdateSet = BTreeMap<Key, Vec<Scalar>>;

fn merge(mine: &mut UpdateSet, theirs: Message) {
    let dim = theirs.value_dim().unwrap_or(0);
    let Some(payload) = theirs.payload else {
        return;
    };
    for (key, row) in theirs.keys.into_iter().zip(payload.chunks_exact(dim.max(1))) {
        match mine.get_mut(&key) {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            None => {
                mine.insert(key, row.to_vec());
            }
        }
    }
}

impl Node {
    /// Writes to the local replica, clipping if configured. Returns the scale
    /// applied to `delta`. Zero deltas are ignored.
    pub(crate) fn write_replica(&self, key: Key, slot: &mut ReplicaSlot, delta: &[Scalar]) -> Scalar {
        if delta.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        let scale = match &self.replication.clip {
            Some(clip) => {
                let norm = delta.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                clip.scale(norm) as Scalar
            }
            None => 1.0,
        };
        if slot.accumulate(delta, scale) {
            self.replication.dirty.lock().push(key);
        }
        scale
    }

    /// Writes `delta` to the local replica of a replicated key and returns the
    /// update that was applied after clipping.
    pub fn push_replica(&self, key: Key, delta: &[Scalar]) -> crate::Result<Vec<Scalar>> {
        self.config.check_key(key)?;
        let mut slot = self.slot(key);
        let SlotState::Replica(r) = &mut slot.state else {
            return Err(crate::Error::TechniqueMismatch(key));
        };
        let scale = self.write_replica(key, r, delta);
        Ok(delta.iter().map(|&x| x * scale).collect())
    }

    /// Whether the local replica of `key` holds updates not yet synchronized.
    pub fn replica_dirty(&self, key: Key) -> bool {
        match &self.slot(key).state {
            SlotState::Replica(r) => r.is_dirty() || !r.inflight.is_empty(),
            SlotState::Relocated(_) => false,
        }
    }

    pub fn sync_stats(&self) -> SyncStats {
        self.replication.stats.lock().clone()
    }

    pub(crate) fn on_sync_exchange(&self, msg: Message) {
        let mut mb = self.replication.mailbox.lock();
        match mb.remove(&msg.aux) {
            Some(Mail::Waiting(tx)) => {
                let _ = tx.send(msg);
            }
            Some(Mail::Arrived(_)) => panic!("node {}: duplicate sync exchange {}", self.id, msg.aux),
            None => {
                mb.insert(msg.aux, Mail::Arrived(msg));
            }
        }
    }

    async fn receive_exchange(&self, tag: u64) -> Message {
        let rx = {
            let mut mb = self.replication.mailbox.lock();
            if let Some(Mail::Arrived(m)) = mb.remove(&tag) {
                return m;
            }
            let (tx, rx) = oneshot::channel();
            mb.insert(tag, Mail::Waiting(tx));
            rx
        };
        rx.await.expect("sync mailbox dropped")
    }

    fn send_exchange(&self, to: NodeId, tag: u64, set: &UpdateSet) {
        let mut msg = Message::new(MessageKind::SyncExchange, Cause::Sync, self.id, to).with_aux(tag);
        if !set.is_empty() {
            msg.keys = set.keys().copied().collect();
            msg.payload = Some(set.values().flatten().copied().collect());
        }
        self.send(msg);
    }

    /// Runs one synchronization round. All nodes must run the same round.
    pub(crate) async fn sync_round(&self, round: u64) {
        let start = self.runtime.now();
        let keys = std::mem::take(&mut *self.replication.dirty.lock());
        let mut set = UpdateSet::new();
        for key in keys {
            let mut slot = self.slot(key);
            let SlotState::Replica(r) = &mut slot.state else {
                unreachable!()
            };
            debug_assert!(r.inflight.is_empty());
            r.inflight = std::mem::take(&mut r.acc);
            r.dirty = false;
            set.insert(key, r.inflight.clone());
        }

        let q = self.config.num_nodes;
        let p = 1usize << (usize::BITS - 1 - q.leading_zeros());
        let id = self.id;
        if id >= p {
            self.send_exchange(id - p, tag(round, FOLD_STAGE), &set);
            set.clear();
            merge(&mut set, self.receive_exchange(tag(round, UNFOLD_STAGE)).await);
        } else {
            if id + p < q {
                merge(&mut set, self.receive_exchange(tag(round, FOLD_STAGE)).await);
            }
            let mut stage = 0;
            while (1usize << stage) < p {
                let partner = id ^ (1 << stage);
                self.send_exchange(partner, tag(round, stage as u64), &set);
                merge(&mut set, self.receive_exchange(tag(round, stage as u64)).await);
                stage += 1;
            }
            if id + p < q {
                self.send_exchange(id + p, tag(round, UNFOLD_STAGE), &set);
            }
        }

        let exchanged = set.len() as u64;
        for (key, sum) in set {
            let mut slot = self.slot(key);
            let SlotState::Replica(r) = &mut slot.state else {
                unreachable!()
            };
            for (v, s) in r.value.iter_mut().zip(&sum) {
                *v += s;
            }
            r.inflight.clear();
        }

        let end = self.runtime.now();
        let mut st = self.replication.stats.lock();
        st.rounds += 1;
        st.keys_exchanged += exchanged;
        st.first_start.get_or_insert(start);
        st.last_end = end;
        st.busy += end - start;
        st.max_round = st.max_round.max(end - start);
    }

    /// Starts rounds at least `interval` apart until the shared control says
    /// stop. A round that overruns is followed immediately by the next one.
    /// Returns at once if there are no replicated keys.
    pub(crate) async fn sync_loop(self: Arc<Self>, interval: Duration) {
        if self.techniques.num_replicated() == 0 {
            return;
        }
        loop {
            let Some(round) = self.replication.control.lock().begin_round(self.id) else {
                break;
            };
            let start = self.runtime.now();
            self.sync_round(round).await;
            let elapsed = self.runtime.now() - start;
            if elapsed < interval {
                self.runtime.sleep(interval - elapsed).await;
            }
        }
    }
}
