//! Deterministic discrete-event simulation.
//!
//! A single-threaded executor runs every node task (workers, sync loops, pool
//! fillers) against a virtual clock. Events are ordered by `(time, sequence)`,
//! ready tasks are polled in wake order, and link latencies come from a seeded
//! generator, so a run is a pure function of its inputs and seed.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::task::{Context, Poll, Wake, Waker};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    AtomicCounts, BoxFuture, Cause, Message, MessageCounts, MessageHandler, MessageKind,
    NetworkModel, Runtime, Transport,
};
use crate::error::{Error, Result};
use crate::model::{Key, NodeId};

/// One delivered message, recorded when tracing is on.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub sent_at: Duration,
    pub deliver_at: Duration,
    pub kind: MessageKind,
    pub cause: Cause,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub aux: u64,
    pub keys: Vec<Key>,
}

enum SimEvent {
    Deliver(Message),
    Wake(Waker),
}

struct Scheduled {
    at: Duration,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct SimState {
    now: Duration,
    seq: u64,
    events: BinaryHeap<Scheduled>,
    /// Latest scheduled delivery per (sender, receiver), for FIFO links.
    last_delivery: Vec<Duration>,
    rng: ChaCha8Rng,
    trace: Option<Vec<TraceEntry>>,
}

struct TaskWaker {
    id: usize,
    queued: AtomicBool,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref()
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if !self.queued.swap(true, Ordering::AcqRel) {
            self.ready.lock().push_back(self.id);
        }
    }
}

struct TaskSlot {
    fut: Option<BoxFuture<()>>,
    waker: Arc<TaskWaker>,
}

#[derive(Default)]
struct Tasks {
    slots: Vec<Option<TaskSlot>>,
    free: Vec<usize>,
}

pub struct SimCore {
    num_nodes: usize,
    network: NetworkModel,
    state: Mutex<SimState>,
    ready: Arc<Mutex<VecDeque<usize>>>,
    tasks: Mutex<Tasks>,
    handlers: RwLock<Vec<Option<Weak<dyn MessageHandler>>>>,
    in_flight: AtomicUsize,
    counts: AtomicCounts,
}

impl SimCore {
    fn now(&self) -> Duration {
        self.state.lock().now
    }

    fn schedule(&self, at: Duration, event: SimEvent) {
        let mut st = self.state.lock();
        let seq = st.seq;
        st.seq += 1;
        st.events.push(Scheduled { at, seq, event });
    }

    fn spawn_boxed(&self, fut: BoxFuture<()>) {
        let mut tasks = self.tasks.lock();
        let id = match tasks.free.pop() {
            Some(id) => id,
            None => {
                tasks.slots.push(None);
                tasks.slots.len() - 1
            }
        };
        let waker = Arc::new(TaskWaker {
            id,
            queued: AtomicBool::new(true),
            ready: self.ready.clone(),
        });
        tasks.slots[id] = Some(TaskSlot {
            fut: Some(fut),
            waker,
        });
        drop(tasks);
        self.ready.lock().push_back(id);
    }

    fn poll_task(&self, id: usize) {
        let (mut fut, waker) = {
            let mut tasks = self.tasks.lock();
            let Some(slot) = tasks.slots.get_mut(id).and_then(|s| s.as_mut()) else {
                return;
            };
            let Some(fut) = slot.fut.take() else {
                return;
            };
            (fut, slot.waker.clone())
        };
        waker.queued.store(false, Ordering::Release);
        let w = Waker::from(waker);
        let mut cx = Context::from_waker(&w);
        let done = fut.as_mut().poll(&mut cx).is_ready();
        let mut tasks = self.tasks.lock();
        if done {
            tasks.slots[id] = None;
            tasks.free.push(id);
        } else if let Some(slot) = tasks.slots[id].as_mut() {
            slot.fut = Some(fut);
        }
    }

    fn run_ready(&self) {
        loop {
            let next = self.ready.lock().pop_front();
            match next {
                Some(id) => self.poll_task(id),
                None => break,
            }
        }
    }

    /// Processes the earliest event. Returns false if there is none.
    fn step_event(&self) -> bool {
        let ev = {
            let mut st = self.state.lock();
            match st.events.pop() {
                Some(ev) => {
                    debug_assert!(ev.at >= st.now);
                    st.now = ev.at;
                    ev
                }
                None => return false,
            }
        };
        match ev.event {
            SimEvent::Wake(w) => w.wake(),
            SimEvent::Deliver(msg) => {
                self.in_flight.fetch_sub(1, Ordering::AcqRel);
                let handler = self.handlers.read()[msg.receiver]
                    .as_ref()
                    .and_then(Weak::upgrade);
                if let Some(h) = handler {
                    h.handle(msg);
                } else {
                    log::warn!("dropping message for unregistered node {}", msg.receiver);
                }
            }
        }
        true
    }
}

impl Transport for SimCore {
    fn send(&self, msg: Message) -> Result<()> {
        if msg.receiver >= self.num_nodes || msg.sender >= self.num_nodes {
            return Err(Error::UnknownNode(msg.receiver.max(msg.sender)));
        }
        self.counts.record(&msg);
        let mut st = self.state.lock();
        let jitter = if self.network.jitter.is_zero() {
            Duration::ZERO
        } else {
            let nanos = self.network.jitter.as_nanos() as u64;
            Duration::from_nanos(st.rng.random_range(0..=nanos))
        };
        let pair = msg.sender * self.num_nodes + msg.receiver;
        let at = (st.now + self.network.base_latency + jitter).max(st.last_delivery[pair]);
        st.last_delivery[pair] = at;
        let now = st.now;
        if let Some(trace) = st.trace.as_mut() {
            trace.push(TraceEntry {
                sent_at: now,
                deliver_at: at,
                kind: msg.kind,
                cause: msg.cause,
                sender: msg.sender,
                receiver: msg.receiver,
                aux: msg.aux,
                keys: msg.keys.clone(),
            });
        }
        let seq = st.seq;
        st.seq += 1;
        st.events.push(Scheduled {
            at,
            seq,
            event: SimEvent::Deliver(msg),
        });
        self.in_flight.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    fn counters(&self) -> MessageCounts {
        self.counts.snapshot()
    }

    fn num_nodes(&self) -> usize {
        self.num_nodes
    }
}

struct Sleep {
    core: Arc<SimCore>,
    deadline: Duration,
    scheduled: bool,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.core.now() >= self.deadline {
            return Poll::Ready(());
        }
        if !self.scheduled {
            self.core.schedule(self.deadline, SimEvent::Wake(cx.waker().clone()));
            self.scheduled = true;
        }
        Poll::Pending
    }
}

/// Runtime handle for tasks running inside the simulation.
#[derive(Clone)]
pub struct SimRuntime(Arc<SimCore>);

impl Runtime for SimRuntime {
    fn now(&self) -> Duration {
        self.0.now()
    }

    fn sleep(&self, d: Duration) -> BoxFuture<()> {
        let deadline = self.0.now() + d;
        Box::pin(Sleep {
            core: self.0.clone(),
            deadline,
            scheduled: false,
        })
    }

    fn spawn(&self, fut: BoxFuture<()>) {
        self.0.spawn_boxed(fut)
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

/// Owner of a simulated cluster's clock, network and task set.
pub struct Simulation {
    core: Arc<SimCore>,
}

impl Simulation {
    pub fn new(num_nodes: usize, network: NetworkModel, seed: u64) -> Self {
        let core = Arc::new(SimCore {
            num_nodes,
            network,
            state: Mutex::new(SimState {
                now: Duration::ZERO,
                seq: 0,
                events: BinaryHeap::new(),
                last_delivery: vec![Duration::ZERO; num_nodes * num_nodes],
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_11a7),
                trace: None,
            }),
            ready: Arc::new(Mutex::new(VecDeque::new())),
            tasks: Mutex::new(Tasks::default()),
            handlers: RwLock::new(vec![None; num_nodes]),
            in_flight: AtomicUsize::new(0),
            counts: AtomicCounts::default(),
        });
        Simulation { core }
    }

    pub fn runtime(&self) -> Arc<dyn Runtime> {
        Arc::new(SimRuntime(self.core.clone()))
    }

    pub fn transport(&self) -> Arc<dyn Transport> {
        self.core.clone()
    }

    pub fn register(&self, node: NodeId, handler: Weak<dyn MessageHandler>) {
        self.core.handlers.write()[node] = Some(handler);
    }

    pub fn now(&self) -> Duration {
        self.core.now()
    }

    pub fn counters(&self) -> MessageCounts {
        self.core.counts.snapshot()
    }

    pub fn enable_trace(&self) {
        let mut st = self.core.state.lock();
        if st.trace.is_none() {
            st.trace = Some(Vec::new());
        }
    }

    pub fn take_trace(&self) -> Vec<TraceEntry> {
        self.core
            .state
            .lock()
            .trace
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    /// Messages sent but not yet delivered.
    pub fn in_flight(&self) -> usize {
        self.core.in_flight.load(Ordering::Acquire)
    }

    pub fn spawn<F>(&self, fut: F)
    where
        F: Future<Output = ()> + Send + 'static,
    {
        self.core.spawn_boxed(Box::pin(fut))
    }

    /// Runs the simulation until `fut` completes. Other tasks keep their state
    /// and continue in the next call.
    ///
    /// Panics if `fut` can no longer make progress (no events remain).
    pub fn block_on<F, T>(&self, fut: F) -> T
    where
        F: Future<Output = T> + Send + 'static,
        T: Send + 'static,
    {
        let out = Arc::new(Mutex::new(None));
        let slot = out.clone();
        self.spawn(async move {
            let v = fut.await;
            *slot.lock() = Some(v);
        });
        loop {
            self.core.run_ready();
            if let Some(v) = out.lock().take() {
                return v;
            }
            if !self.core.step_event() {
                panic!("simulation stalled: awaited future cannot complete");
            }
        }
    }

    /// Runs until no message is in flight and no task is ready to run.
    pub fn run_until_quiescent(&self) {
        loop {
            self.core.run_ready();
            if self.in_flight() == 0 {
                return;
            }
            if !self.core.step_event() {
                return;
            }
        }
    }

    /// Runs until `done` returns true (checked whenever no task is ready).
    /// Returns false if events ran out first.
    pub fn run_until(&self, mut done: impl FnMut() -> bool) -> bool {
        loop {
            self.core.run_ready();
            if done() {
                return true;
            }
            if !self.core.step_event() {
                return false;
            }
        }
    }

    /// Drops every pending task and event. Tasks own handles to the nodes,
    /// so this breaks the reference cycle between nodes and the simulation.
    pub fn shutdown(&self) {
        let tasks = std::mem::take(&mut *self.core.tasks.lock());
        let events = std::mem::take(&mut self.core.state.lock().events);
        self.core.ready.lock().clear();
        drop(tasks);
        drop(events);
        self.core.ready.lock().clear();
    }

    /// Advances virtual time by `d`, processing every event due until then.
    pub fn run_for(&self, d: Duration) {
        let until = self.now() + d;
        loop {
            self.core.run_ready();
            let next = self.core.state.lock().events.peek().map(|e| e.at);
            match next {
                Some(at) if at <= until => {
                    self.core.step_event();
                }
                _ => break,
            }
        }
        let mut st = self.core.state.lock();
        if st.now < until {
            st.now = until;
        }
    }
}
