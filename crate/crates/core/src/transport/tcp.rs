//! TCP transport: one listening port per node and one connection per ordered
//! node pair, each drained by a single writer task so per-pair order is kept.
//! Frames use the layout in [`super::wire`].

use std::net::SocketAddr;
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use super::{wire, AtomicCounts, BoxFuture, Message, MessageCounts, MessageHandler, Runtime, Transport};
use crate::error::{Error, Result};
use crate::model::NodeId;

type Handlers = Arc<RwLock<Vec<Option<Weak<dyn MessageHandler>>>>>;

pub struct TcpNetwork {
    num_nodes: usize,
    local: Vec<NodeId>,
    listen_addrs: Vec<(NodeId, SocketAddr)>,
    /// Outbound frame queues indexed by `sender * num_nodes + receiver`.
    links: RwLock<Vec<Option<mpsc::UnboundedSender<Vec<u8>>>>>,
    handlers: Handlers,
    counts: AtomicCounts,
}

impl TcpNetwork {
    /// Binds a listener for every local node and starts accepting peers.
    /// Must be called inside a tokio runtime.
    pub async fn bind(num_nodes: usize, local: &[(NodeId, SocketAddr)]) -> Result<Arc<Self>> {
        let handlers: Handlers = Arc::new(RwLock::new(vec![None; num_nodes]));
        let mut listen_addrs = Vec::with_capacity(local.len());
        for &(node, addr) in local {
            if node >= num_nodes {
                return Err(Error::UnknownNode(node));
            }
            let listener = TcpListener::bind(addr).await?;
            listen_addrs.push((node, listener.local_addr()?));
            tokio::spawn(accept_loop(listener, node, handlers.clone()));
        }
        Ok(Arc::new(TcpNetwork {
            num_nodes,
            local: local.iter().map(|l| l.0).collect(),
            listen_addrs,
            links: RwLock::new(vec![None; num_nodes * num_nodes]),
            handlers,
            counts: AtomicCounts::default(),
        }))
    }

    pub fn local_addr(&self, node: NodeId) -> Option<SocketAddr> {
        self.listen_addrs.iter().find(|l| l.0 == node).map(|l| l.1)
    }

    pub fn register(&self, node: NodeId, handler: Weak<dyn MessageHandler>) {
        self.handlers.write()[node] = Some(handler);
    }

    /// Opens a connection from every local node to every node in `peers`
    /// (indexed by node id). Handlers should be registered first.
    pub async fn connect(&self, peers: &[SocketAddr]) -> Result<()> {
        if peers.len() != self.num_nodes {
            return Err(Error::LengthMismatch {
                what: "peer addresses vs nodes",
                left: peers.len(),
                right: self.num_nodes,
            });
        }
        for &sender in &self.local {
            for (receiver, addr) in peers.iter().enumerate() {
                let mut stream = connect_with_retry(*addr).await?;
                stream.set_nodelay(true)?;
                stream.write_all(&(sender as u32).to_le_bytes()).await?;
                let (tx, rx) = mpsc::unbounded_channel();
                tokio::spawn(write_loop(stream, rx));
                self.links.write()[sender * self.num_nodes + receiver] = Some(tx);
            }
        }
        Ok(())
    }
}

async fn connect_with_retry(addr: SocketAddr) -> Result<TcpStream> {
    let mut last = None;
    for _ in 0..50 {
        match TcpStream::connect(addr).await {
            Ok(s) => return Ok(s),
            Err(e) => {
                last = Some(e);
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
        }
    }
    Err(last.unwrap().into())
}

async fn write_loop(mut stream: TcpStream, mut rx: mpsc::UnboundedReceiver<Vec<u8>>) {
    while let Some(frame) = rx.recv().await {
        if let Err(e) = stream.write_all(&frame).await {
            log::error!("tcp write failed: {e}");
            return;
        }
    }
}

async fn accept_loop(listener: TcpListener, node: NodeId, handlers: Handlers) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                let _ = stream.set_nodelay(true);
                tokio::spawn(read_loop(stream, node, handlers.clone()));
            }
            Err(e) => {
                log::error!("accept on node {node} failed: {e}");
                return;
            }
        }
    }
}

async fn read_loop(mut stream: TcpStream, node: NodeId, handlers: Handlers) {
    let mut hello = [0u8; 4];
    if stream.read_exact(&mut hello).await.is_err() {
        return;
    }
    let mut len_buf = [0u8; 4];
    let mut body = Vec::new();
    loop {
        if stream.read_exact(&mut len_buf).await.is_err() {
            return;
        }
        body.resize(u32::from_le_bytes(len_buf) as usize, 0);
        if stream.read_exact(&mut body).await.is_err() {
            return;
        }
        let msg = match wire::decode(&body) {
            Ok(m) => m,
            Err(e) => {
                log::error!("node {node}: dropping connection after bad frame: {e}");
                return;
            }
        };
        let handler = handlers.read()[node].as_ref().and_then(Weak::upgrade);
        match handler {
            Some(h) => h.handle(msg),
            None => log::warn!("node {node}: no handler registered"),
        }
    }
}

impl Transport for TcpNetwork {
    fn send(&self, msg: Message) -> Result<()> {
        if msg.receiver >= self.num_nodes || msg.sender >= self.num_nodes {
            return Err(Error::UnknownNode(msg.receiver.max(msg.sender)));
        }
        let mut frame = Vec::new();
        wire::encode(&msg, &mut frame)?;
        let links = self.links.read();
        let link = links[msg.sender * self.num_nodes + msg.receiver]
            .as_ref()
            .ok_or(Error::UnknownNode(msg.receiver))?;
        self.counts.record(&msg);
        link.send(frame)
            .map_err(|_| Error::Io(std::io::Error::other("connection closed")))
    }

    fn counters(&self) -> MessageCounts {
        self.counts.snapshot()
    }

    fn num_nodes(&self) -> usize {
        self.num_nodes
    }
}

/// Wall-clock runtime on top of a tokio runtime handle.
pub struct TokioRuntime {
    handle: tokio::runtime::Handle,
    start: Instant,
}

impl TokioRuntime {
    pub fn new(handle: tokio::runtime::Handle) -> Self {
        TokioRuntime {
            handle,
            start: Instant::now(),
        }
    }
}

impl Runtime for TokioRuntime {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) -> BoxFuture<()> {
        Box::pin(tokio::time::sleep(d))
    }

    fn spawn(&self, fut: BoxFuture<()>) {
        self.handle.spawn(fut);
    }

    fn is_virtual(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{Cause, MessageKind};
    use parking_lot::Mutex;

    struct Collect(Mutex<Vec<Message>>);

    impl MessageHandler for Collect {
        fn handle(&self, msg: Message) {
            self.0.lock().push(msg);
        }
    }

    #[test]
    fn per_pair_fifo_over_sockets() {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async {
            let any: SocketAddr = "127.0.0.1:0".parse().unwrap();
            let net = TcpNetwork::bind(2, &[(0, any), (1, any)]).await.unwrap();
            let sinks: Vec<Arc<Collect>> =
                (0..2).map(|_| Arc::new(Collect(Mutex::new(Vec::new())))).collect();
            for (i, s) in sinks.iter().enumerate() {
                net.register(i, Arc::downgrade(s) as Weak<dyn MessageHandler>);
            }
            let addrs = [net.local_addr(0).unwrap(), net.local_addr(1).unwrap()];
            net.connect(&addrs).await.unwrap();
            for i in 0..500u64 {
                let msg = Message::new(MessageKind::PushReq, Cause::Direct, 0, 1)
                    .with_request(0, i)
                    .with_keys(vec![crate::model::Key(i)])
                    .with_payload(vec![i as crate::model::Scalar]);
                net.send(msg).unwrap();
            }
            for _ in 0..200 {
                if sinks[1].0.lock().len() == 500 {
                    break;
                }
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
            let got = sinks[1].0.lock();
            let ids: Vec<u64> = got.iter().map(|m| m.request_id).collect();
            assert_eq!(ids, (0..500).collect::<Vec<_>>());
            assert!(sinks[0].0.lock().is_empty());
            assert_eq!(net.counters().kind(MessageKind::PushReq), 500);
            assert!(matches!(
                net.send(Message::new(MessageKind::PullReq, Cause::Direct, 0, 7)),
                Err(Error::UnknownNode(7))
            ));
        });
    }
}
