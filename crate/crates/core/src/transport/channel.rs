//! Message channels over TCP or an in-process loopback.
//!
//! A [`Connection`] splits into a [`FrameSource`] and a [`FrameSink`]. Both
//! halves take `&mut self`, so at most one context reads and one context
//! writes a channel at a time; sharing a sink between threads requires an
//! explicit lock around it.

use std::collections::{HashMap, VecDeque};
use std::io::{BufReader, Write};
use std::net::{Shutdown as NetShutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU16, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::transport::codec::{decode, encode, read_frame};
use crate::transport::message::{Endpoint, Message};

pub trait FrameSink: Send {
    fn send(&mut self, message: &Message) -> Result<()>;
}

pub trait FrameSource: Send {
    /// Blocks until a full frame arrives or the channel closes.
    fn receive(&mut self) -> Result<Message>;
}

/// Tears down a connection or listener from any thread, waking blocked
/// readers.
pub trait Shutdown: Send + Sync {
    fn shutdown(&self);
}

pub struct Connection {
    pub source: Box<dyn FrameSource>,
    pub sink: Box<dyn FrameSink>,
    pub peer: String,
    closer: Arc<dyn Shutdown>,
}

impl Connection {
    pub fn closer(&self) -> Arc<dyn Shutdown> {
        self.closer.clone()
    }

    pub fn split(self) -> (Box<dyn FrameSource>, Box<dyn FrameSink>, Arc<dyn Shutdown>) {
        (self.source, self.sink, self.closer)
    }

    pub fn send(&mut self, message: &Message) -> Result<()> {
        self.sink.send(message)
    }

    pub fn receive(&mut self) -> Result<Message> {
        self.source.receive()
    }
}

pub trait Listener: Send {
    /// The bound endpoint, with the real port if port 0 was requested.
    fn local_endpoint(&self) -> Endpoint;
    /// Next inbound connection; `ChannelClosed` once shut down.
    fn accept(&mut self) -> Result<Connection>;
    fn closer(&self) -> Arc<dyn Shutdown>;
}

pub trait Network: Send + Sync {
    fn listen(&self, endpoint: &Endpoint) -> Result<Box<dyn Listener>>;
    fn connect(&self, endpoint: &Endpoint) -> Result<Connection>;
}

/// Exponential reconnect schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub cap: Duration,
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(100),
            cap: Duration::from_secs(5),
            max_attempts: 5,
        }
    }
}

impl Backoff {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }

    pub fn connect(&self, network: &dyn Network, endpoint: &Endpoint) -> Result<Connection> {
        let mut attempt = 1;
        loop {
            match network.connect(endpoint) {
                Ok(c) => return Ok(c),
                Err(e) if attempt >= self.max_attempts => return Err(e),
                Err(e) => {
                    log::debug!("event=connect_retry endpoint={endpoint} attempt={attempt} error={e}");
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// TCP

struct TcpSink {
    stream: TcpStream,
}

impl FrameSink for TcpSink {
    fn send(&mut self, message: &Message) -> Result<()> {
        let frame = encode(message)?;
        self.stream
            .write_all(&frame)
            .and_then(|_| self.stream.flush())
            .map_err(|e| Error::io("writing frame", e))
    }
}

struct TcpSource {
    reader: BufReader<TcpStream>,
}

impl FrameSource for TcpSource {
    fn receive(&mut self) -> Result<Message> {
        read_frame(&mut self.reader)
    }
}

struct TcpCloser {
    stream: TcpStream,
}

impl Shutdown for TcpCloser {
    fn shutdown(&self) {
        let _ = self.stream.shutdown(NetShutdown::Both);
    }
}

fn tcp_connection(stream: TcpStream) -> Result<Connection> {
    let _ = stream.set_nodelay(true);
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "?".into());
    let clone = |s: &TcpStream| s.try_clone().map_err(|e| Error::io("cloning socket", e));
    Ok(Connection {
        source: Box::new(TcpSource {
            reader: BufReader::with_capacity(1 << 16, clone(&stream)?),
        }),
        closer: Arc::new(TcpCloser {
            stream: clone(&stream)?,
        }),
        sink: Box::new(TcpSink { stream }),
        peer,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TcpNetwork;

struct TcpAcceptor {
    listener: TcpListener,
    local: Endpoint,
    stopped: Arc<AtomicBool>,
}

struct FlagCloser(Arc<AtomicBool>);

impl Shutdown for FlagCloser {
    fn shutdown(&self) {
        self.0.store(true, Ordering::SeqCst);
    }
}

impl Listener for TcpAcceptor {
    fn local_endpoint(&self) -> Endpoint {
        self.local.clone()
    }

    fn accept(&mut self) -> Result<Connection> {
        loop {
            if self.stopped.load(Ordering::SeqCst) {
                return Err(Error::ChannelClosed);
            }
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream
                        .set_nonblocking(false)
                        .map_err(|e| Error::io("configuring socket", e))?;
                    return tcp_connection(stream);
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(Error::io("accepting", e)),
            }
        }
    }

    fn closer(&self) -> Arc<dyn Shutdown> {
        Arc::new(FlagCloser(self.stopped.clone()))
    }
}

impl Network for TcpNetwork {
    fn listen(&self, endpoint: &Endpoint) -> Result<Box<dyn Listener>> {
        let listener = TcpListener::bind((endpoint.host.as_str(), endpoint.port))
            .map_err(|e| Error::io(format!("binding {endpoint}"), e))?;
        // Non-blocking accept lets shutdown() stop the accept loop.
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::io("configuring listener", e))?;
        let port = listener
            .local_addr()
            .map_err(|e| Error::io("reading bound address", e))?
            .port();
        Ok(Box::new(TcpAcceptor {
            listener,
            local: Endpoint::new(endpoint.host.clone(), port)?,
            stopped: Arc::new(AtomicBool::new(false)),
        }))
    }

    fn connect(&self, endpoint: &Endpoint) -> Result<Connection> {
        let addrs: Vec<_> = (endpoint.host.as_str(), endpoint.port)
            .to_socket_addrs()
            .map_err(|e| Error::io(format!("resolving {endpoint}"), e))?
            .collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, Duration::from_secs(5)) {
                Ok(stream) => return tcp_connection(stream),
                Err(e) => last = Some(e),
            }
        }
        Err(Error::io(
            format!("connecting to {endpoint}"),
            last.unwrap_or_else(|| std::io::Error::other("no addresses")),
        ))
    }
}

// ---------------------------------------------------------------------------
// Loopback

/// Blocking FIFO that can be closed from either end.
struct Queue<T> {
    state: Mutex<(VecDeque<T>, bool)>,
    ready: Condvar,
}

impl<T> Queue<T> {
    fn new() -> Arc<Self> {
        Arc::new(Queue {
            state: Mutex::new((VecDeque::new(), false)),
            ready: Condvar::new(),
        })
    }

    fn push(&self, item: T) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        if state.1 {
            return Err(Error::ChannelClosed);
        }
        state.0.push_back(item);
        self.ready.notify_one();
        Ok(())
    }

    /// Pops the next item; once closed, drains what is left then reports
    /// `ChannelClosed`.
    fn pop(&self) -> Result<T> {
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(item) = state.0.pop_front() {
                return Ok(item);
            }
            if state.1 {
                return Err(Error::ChannelClosed);
            }
            state = self.ready.wait(state).unwrap();
        }
    }

    fn close(&self) {
        self.state.lock().unwrap().1 = true;
        self.ready.notify_all();
    }
}

struct PipeSink {
    out: Arc<Queue<Vec<u8>>>,
}

impl FrameSink for PipeSink {
    fn send(&mut self, message: &Message) -> Result<()> {
        self.out.push(encode(message)?)
    }
}

impl Drop for PipeSink {
    fn drop(&mut self) {
        self.out.close();
    }
}

struct PipeSource {
    inbound: Arc<Queue<Vec<u8>>>,
}

impl FrameSource for PipeSource {
    fn receive(&mut self) -> Result<Message> {
        decode(&self.inbound.pop()?)
    }
}

struct PipeCloser {
    pipes: [Arc<Queue<Vec<u8>>>; 2],
}

impl Shutdown for PipeCloser {
    fn shutdown(&self) {
        for p in &self.pipes {
            p.close();
        }
    }
}

fn pipe_pair(a_name: &str, b_name: &str) -> (Connection, Connection) {
    let ab = Queue::new();
    let ba = Queue::new();
    let closer: Arc<dyn Shutdown> = Arc::new(PipeCloser {
        pipes: [ab.clone(), ba.clone()],
    });
    let a = Connection {
        source: Box::new(PipeSource { inbound: ba.clone() }),
        sink: Box::new(PipeSink { out: ab.clone() }),
        peer: b_name.to_owned(),
        closer: closer.clone(),
    };
    let b = Connection {
        source: Box::new(PipeSource { inbound: ab }),
        sink: Box::new(PipeSink { out: ba }),
        peer: a_name.to_owned(),
        closer,
    };
    (a, b)
}

/// In-process network: endpoints are names in a shared registry, frames are
/// encoded bytes moved through queues.
#[derive(Clone, Default)]
pub struct LoopbackNetwork {
    listeners: Arc<Mutex<HashMap<Endpoint, Arc<Queue<Connection>>>>>,
    next_port: Arc<AtomicU16>,
}

impl LoopbackNetwork {
    pub fn new() -> Self {
        LoopbackNetwork {
            listeners: Arc::default(),
            next_port: Arc::new(AtomicU16::new(40000)),
        }
    }
}

struct LoopbackListener {
    local: Endpoint,
    backlog: Arc<Queue<Connection>>,
    registry: Arc<Mutex<HashMap<Endpoint, Arc<Queue<Connection>>>>>,
}

struct LoopbackListenerCloser {
    local: Endpoint,
    backlog: Arc<Queue<Connection>>,
    registry: Arc<Mutex<HashMap<Endpoint, Arc<Queue<Connection>>>>>,
}

impl Shutdown for LoopbackListenerCloser {
    fn shutdown(&self) {
        self.registry.lock().unwrap().remove(&self.local);
        self.backlog.close();
    }
}

impl Listener for LoopbackListener {
    fn local_endpoint(&self) -> Endpoint {
        self.local.clone()
    }

    fn accept(&mut self) -> Result<Connection> {
        self.backlog.pop()
    }

    fn closer(&self) -> Arc<dyn Shutdown> {
        Arc::new(LoopbackListenerCloser {
            local: self.local.clone(),
            backlog: self.backlog.clone(),
            registry: self.registry.clone(),
        })
    }
}

impl Network for LoopbackNetwork {
    fn listen(&self, endpoint: &Endpoint) -> Result<Box<dyn Listener>> {
        let mut registry = self.listeners.lock().unwrap();
        let local = if endpoint.port == 0 {
            loop {
                let port = self.next_port.fetch_add(1, Ordering::SeqCst).max(1);
                let candidate = Endpoint::new(endpoint.host.clone(), port)?;
                if !registry.contains_key(&candidate) {
                    break candidate;
                }
            }
        } else {
            endpoint.clone()
        };
        if registry.contains_key(&local) {
            return Err(Error::io(
                format!("binding {local}"),
                std::io::Error::from(std::io::ErrorKind::AddrInUse),
            ));
        }
        let backlog = Queue::new();
        registry.insert(local.clone(), backlog.clone());
        Ok(Box::new(LoopbackListener {
            local,
            backlog,
            registry: self.listeners.clone(),
        }))
    }

    fn connect(&self, endpoint: &Endpoint) -> Result<Connection> {
        let backlog = self.listeners.lock().unwrap().get(endpoint).cloned().ok_or_else(|| {
            Error::io(
                format!("connecting to {endpoint}"),
                std::io::Error::from(std::io::ErrorKind::ConnectionRefused),
            )
        })?;
        let (ours, theirs) = pipe_pair("loopback-peer", &endpoint.to_string());
        backlog.push(theirs)?;
        Ok(ours)
    }
}

/// Waits until `pred` holds or `timeout` elapses, polling every few
/// milliseconds.
pub fn wait_until(timeout: Duration, mut pred: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if pred() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(5));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::message::Body;

    fn hb(seq: u32) -> Message {
        Message::new(
            0,
            "p",
            Body::Heartbeat {
                raw_speed: seq as f64 + 1.0,
                load_factor: 0.0,
            },
        )
    }

    fn exercise(network: &dyn Network, host: &str) {
        let mut listener = network.listen(&Endpoint::bind_any(host)).unwrap();
        let local = listener.local_endpoint();
        assert_ne!(local.port, 0);
        let sender = thread::spawn({
            let mut conn = network.connect(&local).unwrap();
            move || {
                for i in 0..200 {
                    conn.send(&hb(i)).unwrap();
                }
            }
        });
        let mut inbound = listener.accept().unwrap();
        for i in 0..200 {
            assert_eq!(inbound.receive().unwrap(), hb(i));
        }
        sender.join().unwrap();
        // the sending side has been dropped
        assert!(matches!(
            inbound.receive(),
            Err(Error::ChannelClosed) | Err(Error::Io { .. })
        ));
        listener.closer().shutdown();
        assert!(matches!(listener.accept(), Err(Error::ChannelClosed)));
    }

    #[test]
    fn loopback_preserves_order_and_reports_close() {
        exercise(&LoopbackNetwork::new(), "mem");
    }

    #[test]
    fn tcp_preserves_order_and_reports_close() {
        exercise(&TcpNetwork, "127.0.0.1");
    }

    #[test]
    fn shutdown_wakes_blocked_reader() {
        let net = LoopbackNetwork::new();
        let mut listener = net.listen(&Endpoint::bind_any("mem")).unwrap();
        let conn = net.connect(&listener.local_endpoint()).unwrap();
        let _server_side = listener.accept().unwrap();
        let closer = conn.closer();
        let (mut source, _sink, _) = conn.split();
        let reader = thread::spawn(move || source.receive());
        thread::sleep(Duration::from_millis(20));
        closer.shutdown();
        assert!(matches!(reader.join().unwrap(), Err(Error::ChannelClosed)));
    }

    #[test]
    fn connect_to_missing_endpoint_fails() {
        let net = LoopbackNetwork::new();
        let ep = Endpoint::new("mem", 9).unwrap();
        assert!(matches!(net.connect(&ep), Err(Error::Io { .. })));
        let quick = Backoff {
            base: Duration::from_millis(1),
            cap: Duration::from_millis(2),
            max_attempts: 3,
        };
        assert!(quick.connect(&net, &ep).is_err());
    }

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        let delays: Vec<_> = (1..=7).map(|i| b.delay(i).as_millis()).collect();
        assert_eq!(delays, vec![100, 200, 400, 800, 1600, 3200, 5000]);
    }
}
