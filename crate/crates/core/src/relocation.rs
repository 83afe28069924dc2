//! Per-key relocation for long-tail parameters.
//!
//! Each relocated key is allocated at exactly one node at a time. Its home node
//! keeps a directory entry with the current owner and serializes ownership
//! changes: a localize request goes to the home node, which updates the
//! directory and forwards the request to the previous owner, which hands the
//! value to the requester (three messages). While a key is in transit to a
//! node, operations on it there are queued and replayed in arrival order once
//! the value arrives, so no update is lost or applied twice.
//!
//! Remote accesses to a key that is not local go to the home node, which
//! forwards them to the owner; the owner answers the requester directly.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use futures::channel::oneshot;
use serde::{Deserialize, Serialize};

use crate::model::{Key, NodeId, Scalar};
use crate::node::{Node, Slot, SlotState, NO_NODE};
use crate::transport::{Cause, Message, MessageKind};

pub(crate) enum OwnershipState {
    Owned { value: Vec<Scalar>, version: u64 },
    /// A localize for this key is in flight towards this node.
    Incoming(Box<IncomingKey>),
    Remote,
}

#[derive(Default)]
pub(crate) struct IncomingKey {
    queue: VecDeque<PendingOp>,
    watchers: Vec<oneshot::Sender<()>>,
}

enum PendingOp {
    Read(oneshot::Sender<LocalOutcome>),
    Write(Vec<Scalar>, oneshot::Sender<LocalOutcome>),
    /// A remote pull or push to answer once the value is here.
    Serve(Message),
    /// Hand the key on to `to` as soon as it arrives.
    Relinquish { to: NodeId, cause: Cause },
}

pub(crate) enum LocalOutcome {
    Read(Vec<Scalar>, u64),
    Written(u64),
    /// The key left again before the queued operation ran.
    Moved,
}

#[derive(Default)]
pub(crate) struct RelocationStats {
    localizes: AtomicU64,
    grants_received: AtomicU64,
    relinquished: AtomicU64,
    forwarded: AtomicU64,
    queued: AtomicU64,
}

/// Relocation activity of one node.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelocationCounters {
    /// Localize operations this node started.
    pub localizes: u64,
    /// Keys that arrived at this node.
    pub grants_received: u64,
    /// Keys this node handed on.
    pub relinquished: u64,
    /// Requests this node forwarded towards the owner.
    pub forwarded: u64,
    /// Operations that waited for an incoming key.
    pub queued: u64,
}

impl RelocationStats {
    pub(crate) fn snapshot(&self) -> RelocationCounters {
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        RelocationCounters {
            localizes: l(&self.localizes),
            grants_received: l(&self.grants_received),
            relinquished: l(&self.relinquished),
            forwarded: l(&self.forwarded),
            queued: l(&self.queued),
        }
    }
}

fn bump(a: &AtomicU64) {
    a.fetch_add(1, Ordering::Relaxed);
}

fn add_into(dst: &mut [Scalar], delta: &[Scalar]) {
    for (d, x) in dst.iter_mut().zip(delta) {
        *d += x;
    }
}

/// How a worker's access to a relocated key proceeds after inspecting the slot.
pub(crate) enum AccessPlan {
    Wait(oneshot::Receiver<LocalOutcome>),
    Remote,
}

impl Node {
    /// Starts moving `key` to this node. Returns a receiver that fires when the
    /// key has arrived, or `None` if it is already here or not relocated.
    pub(crate) fn localize_key(&self, key: Key, cause: Cause, watch: bool) -> Option<oneshot::Receiver<()>> {
        let msg;
        let rx;
        {
            let mut guard = self.slot(key);
            let slot = &mut *guard;
            let SlotState::Relocated(state) = &mut slot.state else {
                return None;
            };
            match state {
                OwnershipState::Owned { .. } => return None,
                OwnershipState::Incoming(inc) => {
                    if !watch {
                        return None;
                    }
                    let (tx, r) = oneshot::channel();
                    inc.watchers.push(tx);
                    return Some(r);
                }
                OwnershipState::Remote => {
                    let mut inc = Box::<IncomingKey>::default();
                    rx = watch.then(|| {
                        let (tx, r) = oneshot::channel();
                        inc.watchers.push(tx);
                        r
                    });
                    *state = OwnershipState::Incoming(inc);
                    self.incoming.fetch_add(1, Ordering::AcqRel);
                    bump(&self.reloc_stats.localizes);
                    let home = self.home_of(key);
                    msg = if home == self.id {
                        let previous = std::mem::replace(&mut slot.dir_owner, self.id);
                        Message::new(MessageKind::LocalizeForward, cause, self.id, previous)
                    } else {
                        Message::new(MessageKind::LocalizeReq, cause, self.id, home)
                    }
                    .with_keys(vec![key]);
                }
            }
        }
        self.send(msg);
        rx
    }

    /// Inspects a relocated key for a read. Copies the value into `out` and
    /// returns `None` if it is local.
    pub(crate) fn plan_read(&self, state: &mut OwnershipState, out: &mut [Scalar]) -> Option<AccessPlan> {
        match state {
            OwnershipState::Owned { value, .. } => {
                out.copy_from_slice(value);
                None
            }
            OwnershipState::Incoming(inc) => {
                bump(&self.reloc_stats.queued);
                let (tx, rx) = oneshot::channel();
                inc.queue.push_back(PendingOp::Read(tx));
                Some(AccessPlan::Wait(rx))
            }
            OwnershipState::Remote => Some(AccessPlan::Remote),
        }
    }

    /// Inspects a relocated key for a write, applying it if the key is local.
    pub(crate) fn plan_write(&self, state: &mut OwnershipState, delta: &[Scalar]) -> Option<AccessPlan> {
        match state {
            OwnershipState::Owned { value, version } => {
                add_into(value, delta);
                *version += 1;
                None
            }
            OwnershipState::Incoming(inc) => {
                bump(&self.reloc_stats.queued);
                let (tx, rx) = oneshot::channel();
                inc.queue.push_back(PendingOp::Write(delta.to_vec(), tx));
                Some(AccessPlan::Wait(rx))
            }
            OwnershipState::Remote => Some(AccessPlan::Remote),
        }
    }

    /// Finishes a read that could not be served locally at planning time.
    pub(crate) async fn finish_read(&self, key: Key, plan: AccessPlan, cause: Cause) -> (Vec<Scalar>, u64) {
        if let AccessPlan::Wait(rx) = plan {
            match rx.await {
                Ok(LocalOutcome::Read(v, version)) => return (v, version),
                Ok(LocalOutcome::Moved) => {}
                _ => unreachable!("queued read answered with a write outcome"),
            }
        }
        let resp = self.remote_request(key, MessageKind::PullReq, None, cause).await;
        (resp.payload.expect("pull response without payload"), resp.aux)
    }

    /// Finishes a write that could not be applied locally at planning time.
    /// Returns the key's version after the write.
    pub(crate) async fn finish_write(&self, key: Key, plan: AccessPlan, delta: Vec<Scalar>, cause: Cause) -> u64 {
        if let AccessPlan::Wait(rx) = plan {
            match rx.await {
                Ok(LocalOutcome::Written(version)) => return version,
                Ok(LocalOutcome::Moved) => {}
                _ => unreachable!("queued write answered with a read outcome"),
            }
        }
        self.remote_request(key, MessageKind::PushReq, Some(delta), cause)
            .await
            .aux
    }

    fn route_target(&self, key: Key) -> NodeId {
        if self.config.owner_hints {
            let hint = self.hints[key.index()].load(Ordering::Relaxed);
            if hint != NO_NODE && hint != self.id {
                return hint;
            }
        }
        let home = self.home_of(key);
        if home == self.id {
            let owner = self.slot(key).dir_owner;
            if owner != self.id {
                return owner;
            }
        }
        home
    }

    async fn remote_request(&self, key: Key, kind: MessageKind, payload: Option<Vec<Scalar>>, cause: Cause) -> Message {
        let target = self.route_target(key);
        let (id, rx) = self.register_request();
        let mut msg = Message::new(kind, cause, self.id, target)
            .with_request(self.id, id)
            .with_keys(vec![key]);
        msg.payload = payload;
        self.send(msg);
        let resp = rx.await.expect("pending request dropped");
        if self.config.owner_hints {
            self.hints[key.index()].store(resp.sender, Ordering::Relaxed);
        }
        resp
    }

    pub(crate) fn on_access_request(&self, msg: Message) {
        let key = msg.keys[0];
        let mut out = Vec::with_capacity(1);
        {
            let mut slot = self.slot(key);
            self.serve_or_route(&mut slot, msg, &mut out);
        }
        for m in out {
            self.send(m);
        }
    }

    fn serve_or_route(&self, slot: &mut Slot, mut msg: Message, out: &mut Vec<Message>) {
        let key = msg.keys[0];
        let SlotState::Relocated(state) = &mut slot.state else {
            panic!("node {}: remote access to replicated key {key:?}", self.id);
        };
        match state {
            OwnershipState::Owned { value, version } => {
                let reply_kind = if msg.kind == MessageKind::PushReq {
                    add_into(value, msg.payload.as_deref().expect("push without payload"));
                    *version += 1;
                    MessageKind::PushAck
                } else {
                    MessageKind::PullResp
                };
                let mut reply = Message::new(reply_kind, msg.cause, self.id, msg.origin)
                    .with_request(msg.origin, msg.request_id)
                    .with_keys(vec![key])
                    .with_aux(*version);
                if reply_kind == MessageKind::PullResp {
                    reply.payload = Some(value.clone());
                }
                out.push(reply);
            }
            OwnershipState::Incoming(inc) => inc.queue.push_back(PendingOp::Serve(msg)),
            OwnershipState::Remote => {
                let home = self.home_of(key);
                let to = if home == self.id { slot.dir_owner } else { home };
                bump(&self.reloc_stats.forwarded);
                msg.sender = self.id;
                msg.receiver = to;
                out.push(msg);
            }
        }
    }

    fn relinquish(&self, key: Key, state: &mut OwnershipState, to: NodeId, cause: Cause, out: &mut Vec<Message>) {
        match state {
            OwnershipState::Owned { .. } => {
                let OwnershipState::Owned { value, version } =
                    std::mem::replace(state, OwnershipState::Remote)
                else {
                    unreachable!()
                };
                bump(&self.reloc_stats.relinquished);
                if self.config.owner_hints {
                    self.hints[key.index()].store(to, Ordering::Relaxed);
                }
                out.push(
                    Message::new(MessageKind::LocalizeGrant, cause, self.id, to)
                        .with_keys(vec![key])
                        .with_aux(version)
                        .with_payload(value),
                );
            }
            OwnershipState::Incoming(inc) => inc.queue.push_back(PendingOp::Relinquish { to, cause }),
            OwnershipState::Remote => {
                panic!("node {}: asked to hand on {key:?}, which it does not hold", self.id)
            }
        }
    }

    pub(crate) fn on_localize_request(&self, msg: Message) {
        let key = msg.keys[0];
        let requester = msg.origin;
        let mut out = Vec::with_capacity(1);
        {
            let mut guard = self.slot(key);
            let slot = &mut *guard;
            let previous = std::mem::replace(&mut slot.dir_owner, requester);
            debug_assert_ne!(previous, requester, "duplicate localize for {key:?}");
            if previous == self.id {
                let SlotState::Relocated(state) = &mut slot.state else {
                    panic!("localize of replicated key {key:?}");
                };
                self.relinquish(key, state, requester, msg.cause, &mut out);
            } else {
                out.push(
                    Message::new(MessageKind::LocalizeForward, msg.cause, self.id, previous)
                        .with_request(requester, 0)
                        .with_keys(vec![key]),
                );
            }
        }
        for m in out {
            self.send(m);
        }
    }

    pub(crate) fn on_localize_forward(&self, msg: Message) {
        let key = msg.keys[0];
        let mut out = Vec::with_capacity(1);
        {
            let mut slot = self.slot(key);
            let SlotState::Relocated(state) = &mut slot.state else {
                panic!("localize of replicated key {key:?}");
            };
            self.relinquish(key, state, msg.origin, msg.cause, &mut out);
        }
        for m in out {
            self.send(m);
        }
    }

    pub(crate) fn on_localize_grant(&self, msg: Message) {
        let key = msg.keys[0];
        let version = msg.aux + 1;
        let value = msg.payload.expect("grant without value");
        let mut out = Vec::new();
        {
            let mut guard = self.slot(key);
            let slot = &mut *guard;
            let SlotState::Relocated(state) = &mut slot.state else {
                panic!("grant for replicated key {key:?}");
            };
            let OwnershipState::Incoming(inc) =
                std::mem::replace(state, OwnershipState::Owned { value, version })
            else {
                panic!("node {}: unexpected grant for {key:?}", self.id);
            };
            self.incoming.fetch_sub(1, Ordering::AcqRel);
            bump(&self.reloc_stats.grants_received);
            let IncomingKey { queue, watchers } = *inc;
            for w in watchers {
                let _ = w.send(());
            }
            for op in queue {
                let SlotState::Relocated(state) = &mut slot.state else {
                    unreachable!()
                };
                match op {
                    PendingOp::Read(tx) => {
                        let outcome = match state {
                            OwnershipState::Owned { value, version } => {
                                LocalOutcome::Read(value.clone(), *version)
                            }
                            _ => LocalOutcome::Moved,
                        };
                        let _ = tx.send(outcome);
                    }
                    PendingOp::Write(delta, tx) => {
                        let outcome = match state {
                            OwnershipState::Owned { value, version } => {
                                add_into(value, &delta);
                                *version += 1;
                                LocalOutcome::Written(*version)
                            }
                            _ => LocalOutcome::Moved,
                        };
                        let _ = tx.send(outcome);
                    }
                    PendingOp::Serve(m) => self.serve_or_route(slot, m, &mut out),
                    PendingOp::Relinquish { to, cause } => {
                        self.relinquish(key, state, to, cause, &mut out)
                    }
                }
            }
        }
        for m in out {
            self.send(m);
        }
    }
}
