use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use crate::client::JobRequest;
use crate::coordinator::{dispatch, Coordinator, CoordinatorConfig, Outbox, COORDINATOR_SENDER};
use crate::error::{Error, Result};
use crate::scheduler::{PerformanceSample, ProviderId};
use crate::transport::{Body, Endpoint, FrameSink, Listener, Message, Network, Shutdown};

struct Link {
    endpoint: Endpoint,
    sink: Box<dyn FrameSink>,
}

struct Shared {
    state: RwLock<Coordinator>,
    epoch: Instant,
    network: Arc<dyn Network>,
    /// Outbound connections to providers. Each sink sits behind its own lock,
    /// so concurrent dispatches never write one channel at the same time.
    links: Mutex<HashMap<ProviderId, Arc<Mutex<Link>>>>,
    closers: Mutex<Vec<Arc<dyn Shutdown>>>,
    stopping: AtomicBool,
}

impl Shared {
    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }
}

pub struct CoordinatorHandle {
    endpoint: Endpoint,
    shared: Arc<Shared>,
    listener_closer: Arc<dyn Shutdown>,
    accept_thread: Option<JoinHandle<()>>,
}

impl CoordinatorHandle {
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Read access to the live coordinator state.
    pub fn with_state<T>(&self, f: impl FnOnce(&Coordinator, f64) -> T) -> T {
        let state = self.shared.state.read().unwrap();
        f(&state, self.shared.now())
    }

    pub fn stop(&mut self) {
        self.shared.stopping.store(true, Ordering::SeqCst);
        self.listener_closer.shutdown();
        for c in self.shared.closers.lock().unwrap().drain(..) {
            c.shutdown();
        }
        self.shared.links.lock().unwrap().clear();
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for CoordinatorHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `listen` and serves until stopped.
pub fn spawn(network: Arc<dyn Network>, listen: &Endpoint, config: CoordinatorConfig) -> Result<CoordinatorHandle> {
    let coordinator = Coordinator::new(config)?;
    let mut listener = network.listen(listen)?;
    let endpoint = listener.local_endpoint();
    let listener_closer = listener.closer();
    let shared = Arc::new(Shared {
        state: RwLock::new(coordinator),
        epoch: Instant::now(),
        network,
        links: Mutex::new(HashMap::new()),
        closers: Mutex::new(Vec::new()),
        stopping: AtomicBool::new(false),
    });
    log::info!("event=coordinator_listening endpoint={endpoint}");
    let accept_shared = shared.clone();
    let accept_thread = thread::Builder::new()
        .name("coordinator-accept".into())
        .spawn(move || accept_loop(accept_shared, listener.as_mut()))
        .map_err(|e| Error::io("spawning accept thread", e))?;
    Ok(CoordinatorHandle {
        endpoint,
        shared,
        listener_closer,
        accept_thread: Some(accept_thread),
    })
}

fn accept_loop(shared: Arc<Shared>, listener: &mut dyn Listener) {
    loop {
        let conn = match listener.accept() {
            Ok(c) => c,
            Err(Error::ChannelClosed) => break,
            Err(e) => {
                if shared.stopping.load(Ordering::SeqCst) {
                    break;
                }
                log::warn!("event=accept_failed error={e}");
                continue;
            }
        };
        let peer = conn.peer.clone();
        shared.closers.lock().unwrap().push(conn.closer());
        let (mut source, mut sink, _) = conn.split();
        let conn_shared = shared.clone();
        let spawned = thread::Builder::new()
            .name(format!("coordinator-conn-{peer}"))
            .spawn(move || loop {
                match source.receive() {
                    Ok(msg) => handle(&conn_shared, msg, sink.as_mut()),
                    Err(Error::ChannelClosed) => break,
                    Err(e) => {
                        if !conn_shared.stopping.load(Ordering::SeqCst) {
                            log::debug!("event=connection_error peer={peer} error={e}");
                        }
                        break;
                    }
                }
            });
        if let Err(e) = spawned {
            log::error!("event=spawn_failed error={e}");
        }
    }
}

fn reply(sink: &mut dyn FrameSink, message: Message) {
    if let Err(e) = sink.send(&message) {
        log::warn!("event=reply_failed job_id={} error={e}", message.job_id);
    }
}

fn handle(shared: &Arc<Shared>, msg: Message, sink: &mut dyn FrameSink) {
    let job_id = msg.job_id;
    match msg.body {
        Body::Register { endpoint, services } => {
            let id = ProviderId::new(msg.sender);
            let result = shared
                .state
                .write()
                .unwrap()
                .register_provider(id.clone(), endpoint.clone(), services);
            match result {
                Ok(()) => {
                    log::info!("event=register provider={id} endpoint={endpoint}");
                    // A changed endpoint invalidates any cached link.
                    shared.links.lock().unwrap().remove(&id);
                    let cfg = shared.state.read().unwrap().config().clone();
                    reply(
                        sink,
                        Message::new(
                            0,
                            COORDINATOR_SENDER,
                            Body::RegisterAck {
                                heartbeat_interval: cfg.heartbeat_interval,
                                staleness_window: cfg.staleness_window,
                            },
                        ),
                    );
                }
                Err(e) => {
                    log::warn!("event=register_rejected provider={id} error={e}");
                    reply(sink, Message::error(0, COORDINATOR_SENDER, &e));
                }
            }
        }
        Body::Heartbeat { raw_speed, load_factor } => {
            let now = shared.now();
            let outcome = PerformanceSample::new(msg.sender.clone().into(), now, raw_speed, load_factor)
                .and_then(|s| shared.state.write().unwrap().ingest_heartbeat(s));
            match outcome {
                Ok(()) => log::debug!(
                    "event=heartbeat provider={} speed={raw_speed} load={load_factor}",
                    msg.sender
                ),
                Err(e) => log::warn!("event=heartbeat_dropped provider={} error={e}", msg.sender),
            }
        }
        body @ Body::JobRequest { .. } => {
            let request = match JobRequest::from_message(Message {
                job_id,
                sender: msg.sender,
                body,
            }) {
                Ok(r) => r,
                Err(e) => return reply(sink, Message::error(job_id, COORDINATOR_SENDER, &e)),
            };
            run_job(shared, &request, sink);
        }
        Body::StatusQuery => {
            let providers = shared.state.read().unwrap().status(shared.now());
            reply(
                sink,
                Message::new(0, COORDINATOR_SENDER, Body::StatusReport { providers }),
            );
        }
        Body::Error { code, detail } => {
            log::warn!(
                "event=peer_error job_id={job_id} sender={} code={code} detail={detail:?}",
                msg.sender
            );
        }
        other => {
            let e = Error::InvalidMessage(format!("coordinator does not accept {:?}", other.kind()));
            reply(sink, Message::error(job_id, COORDINATOR_SENDER, &e));
        }
    }
}

fn run_job(shared: &Arc<Shared>, request: &JobRequest, sink: &mut dyn FrameSink) {
    let job_id = request.job_id;
    let now = shared.now();
    let snapshot = shared.state.read().unwrap().clone();
    let record = match snapshot.plan_job(request, now) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("event=plan_failed job_id={job_id} error={e}");
            return reply(sink, Message::error(job_id, COORDINATOR_SENDER, &e));
        }
    };
    log::info!(
        "event=planned job_id={job_id} policy={} load={} plan={:?}",
        request.policy,
        record.total_load,
        record.plan.allotments()
    );
    let mut outbox = NetOutbox { shared, client: sink };
    match dispatch(&snapshot, request, record, &mut outbox) {
        Ok(outcome) => {
            let mut state = shared.state.write().unwrap();
            for (id, rtt) in &outcome.round_trips {
                state.record_round_trip(id, *rtt);
            }
            log::info!(
                "event=dispatched job_id={job_id} providers={}",
                outcome.record.participants().len()
            );
        }
        Err(e) => log::warn!("event=job_failed job_id={job_id} error={e}"),
    }
}

struct NetOutbox<'a> {
    shared: &'a Arc<Shared>,
    client: &'a mut dyn FrameSink,
}

impl NetOutbox<'_> {
    fn link(&self, provider: &ProviderId) -> Option<Arc<Mutex<Link>>> {
        self.shared.links.lock().unwrap().get(provider).cloned()
    }

    fn open(&self, provider: &ProviderId, endpoint: &Endpoint) -> Result<f64> {
        let backoff = self.shared.state.read().unwrap().config().dispatch_backoff;
        let started = Instant::now();
        let conn = backoff.connect(self.shared.network.as_ref(), endpoint)?;
        let rtt = started.elapsed().as_secs_f64();
        self.shared.closers.lock().unwrap().push(conn.closer());
        let (_, sink, _) = conn.split();
        self.shared.links.lock().unwrap().insert(
            provider.clone(),
            Arc::new(Mutex::new(Link {
                endpoint: endpoint.clone(),
                sink,
            })),
        );
        Ok(rtt)
    }
}

impl Outbox for NetOutbox<'_> {
    fn reach(&mut self, provider: &ProviderId, endpoint: &Endpoint) -> Result<Option<f64>> {
        if let Some(link) = self.link(provider) {
            if link.lock().unwrap().endpoint == *endpoint {
                return Ok(None);
            }
        }
        self.open(provider, endpoint).map(Some)
    }

    fn deliver(&mut self, provider: &ProviderId, message: Message) -> Result<()> {
        let link = self
            .link(provider)
            .ok_or_else(|| Error::UnknownProvider(provider.to_string()))?;
        let first_try = link.lock().unwrap().sink.send(&message);
        if first_try.is_ok() {
            return first_try;
        }
        // Stale cached connection: reconnect once and resend.
        let endpoint = link.lock().unwrap().endpoint.clone();
        self.shared.links.lock().unwrap().remove(provider);
        self.open(provider, &endpoint)?;
        let link = self
            .link(provider)
            .ok_or_else(|| Error::UnknownProvider(provider.to_string()))?;
        let mut guard = link.lock().unwrap();
        guard.sink.send(&message)
    }

    fn reply(&mut self, message: Message) -> Result<()> {
        self.client.send(&message)
    }
}
