//! Message layer between nodes.
//!
//! Two implementations share the same contract (exactly-once delivery, FIFO per
//! ordered sender/receiver pair): a deterministic discrete-event simulation with
//! virtual time ([`sim`]) and TCP sockets ([`tcp`]). Both drive the node logic
//! through [`MessageHandler::handle`], which never blocks.

pub mod sim;
pub mod tcp;
pub mod wire;

use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Key, NodeId, Scalar};

pub type BoxFuture<T> = Pin<Box<dyn Future<Output = T> + Send + 'static>>;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    PullReq = 0,
    PullResp = 1,
    PushReq = 2,
    PushAck = 3,
    LocalizeReq = 4,
    LocalizeForward = 5,
    LocalizeGrant = 6,
    SyncExchange = 7,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::PullReq,
        MessageKind::PullResp,
        MessageKind::PushReq,
        MessageKind::PushAck,
        MessageKind::LocalizeReq,
        MessageKind::LocalizeForward,
        MessageKind::LocalizeGrant,
        MessageKind::SyncExchange,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::PullReq => "pull_req",
            MessageKind::PullResp => "pull_resp",
            MessageKind::PushReq => "push_req",
            MessageKind::PushAck => "push_ack",
            MessageKind::LocalizeReq => "localize_req",
            MessageKind::LocalizeForward => "localize_forward",
            MessageKind::LocalizeGrant => "localize_grant",
            MessageKind::SyncExchange => "sync_exchange",
        }
    }
}

/// Why a message was sent. Follow-up messages (forwards, responses, grants)
/// inherit the cause of the request that triggered them.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Cause {
    /// Remote pull/push on behalf of a direct access.
    Direct = 0,
    /// Anything issued by a sampling scheme.
    Sampling = 1,
    /// Replica synchronization.
    Sync = 2,
    /// Localize requests issued by the application.
    Relocation = 3,
}

impl Cause {
    pub const ALL: [Cause; 4] = [Cause::Direct, Cause::Sampling, Cause::Sync, Cause::Relocation];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Cause::Direct => "direct",
            Cause::Sampling => "sampling",
            Cause::Sync => "sync",
            Cause::Relocation => "relocation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub cause: Cause,
    pub sender: NodeId,
    pub receiver: NodeId,
    /// Node that issued the original request; forwarded requests are answered
    /// directly to it.
    pub origin: NodeId,
    pub request_id: u64,
    /// Kind-specific word: the key version for grants and responses, the
    /// round/stage tag for sync exchanges.
    pub aux: u64,
    pub keys: Vec<Key>,
    /// Row-major values, `keys.len()` rows of equal width, when present.
    pub payload: Option<Vec<Scalar>>,
}

impl Message {
    pub fn new(kind: MessageKind, cause: Cause, sender: NodeId, receiver: NodeId) -> Self {
        Message {
            kind,
            cause,
            sender,
            receiver,
            origin: sender,
            request_id: 0,
            aux: 0,
            keys: Vec::new(),
            payload: None,
        }
    }

    pub fn with_keys(mut self, keys: Vec<Key>) -> Self {
        self.keys = keys;
        self
    }

    pub fn with_payload(mut self, payload: Vec<Scalar>) -> Self {
        self.payload = Some(payload);
        self
    }

    pub fn with_request(mut self, origin: NodeId, request_id: u64) -> Self {
        self.origin = origin;
        self.request_id = request_id;
        self
    }

    pub fn with_aux(mut self, aux: u64) -> Self {
        self.aux = aux;
        self
    }

    /// Width of each payload row, if there is a payload with at least one key.
    pub fn value_dim(&self) -> Option<usize> {
        match &self.payload {
            Some(p) if !self.keys.is_empty() => Some(p.len() / self.keys.len()),
            _ => None,
        }
    }
}

/// Receives delivered messages for one node. Implementations must not block.
pub trait MessageHandler: Send + Sync {
    fn handle(&self, msg: Message);
}

pub trait Transport: Send + Sync {
    fn send(&self, msg: Message) -> Result<()>;
    fn counters(&self) -> MessageCounts;
    fn num_nodes(&self) -> usize;
}

/// Clock, timers and task spawning, in virtual or wall-clock time.
pub trait Runtime: Send + Sync {
    /// Time since the runtime started.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration) -> BoxFuture<()>;
    fn spawn(&self, fut: BoxFuture<()>);
    /// True when time only advances through simulated events.
    fn is_virtual(&self) -> bool;
}

/// Snapshot of message counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub by_kind: [u64; 8],
    pub by_cause: [u64; 4],
}

impl MessageCounts {
    pub fn total(&self) -> u64 {
        self.by_kind.iter().sum()
    }

    pub fn kind(&self, k: MessageKind) -> u64 {
        self.by_kind[k as usize]
    }

    pub fn cause(&self, c: Cause) -> u64 {
        self.by_cause[c as usize]
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &MessageCounts) -> MessageCounts {
        let mut out = self.clone();
        for (a, b) in out.by_kind.iter_mut().zip(earlier.by_kind) {
            *a -= b;
        }
        for (a, b) in out.by_cause.iter_mut().zip(earlier.by_cause) {
            *a -= b;
        }
        out
    }
}

/// Lock-free counters shared by the transport implementations.
#[derive(Debug, Default)]
pub struct AtomicCounts {
    by_kind: [AtomicU64; 8],
    by_cause: [AtomicU64; 4],
}

impl AtomicCounts {
    pub fn record(&self, msg: &Message) {
        self.by_kind[msg.kind as usize].fetch_add(1, Ordering::Relaxed);
        self.by_cause[msg.cause as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MessageCounts {
        MessageCounts {
            by_kind: std::array::from_fn(|i| self.by_kind[i].load(Ordering::Relaxed)),
            by_cause: std::array::from_fn(|i| self.by_cause[i].load(Ordering::Relaxed)),
        }
    }
}

/// Latency of simulated links: `base` plus uniform jitter in `[0, jitter]`,
/// drawn per message from the simulation's seeded generator.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub base_latency: Duration,
    pub jitter: Duration,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            base_latency: Duration::from_micros(100),
            jitter: Duration::from_micros(50),
        }
    }
}

impl NetworkModel {
    pub fn fixed(latency: Duration) -> Self {
        NetworkModel {
            base_latency: latency,
            jitter: Duration::ZERO,
        }
    }
}
