//! The service-provider daemon.
//!
//! Three duties run side by side: an accept loop feeding sub-requests and
//! operands in, a single worker executing sub-requests in arrival order, and
//! a heartbeat thread. The only state they share besides the queues is the
//! busy-time accumulator.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::client::MATMUL;
use crate::coordinator::secs;
use crate::error::{Error, Result};
use crate::matmul::{multiply_block, seeded_pair, Matrix, RowRange};
use crate::perf_model::PerformanceValue;
use crate::scheduler::ProviderId;
use crate::transport::{Backoff, Body, Connection, Endpoint, FrameSink, Message, Network, Shutdown};

/// Side of the square block used by the calibration benchmark. Reported
/// speeds are rows per second of a `CALIBRATION_BLOCK`-wide product.
pub const CALIBRATION_BLOCK: usize = 64;
const CALIBRATION_RUNS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub id: ProviderId,
    pub coordinator: Endpoint,
    pub listen: Endpoint,
    pub heartbeat_interval: f64,
    /// Fixed speed that replaces the benchmark.
    pub calibration: Option<f64>,
    /// Per-row compute time multiplier, at least 1.
    pub slowdown: f64,
    pub operand_timeout: f64,
    pub services: Vec<String>,
    pub backoff: Backoff,
}

impl ProviderConfig {
    pub fn new(id: impl Into<ProviderId>, coordinator: Endpoint, listen: Endpoint) -> Self {
        ProviderConfig {
            id: id.into(),
            coordinator,
            listen,
            heartbeat_interval: 2.0,
            calibration: None,
            slowdown: 1.0,
            operand_timeout: 30.0,
            services: vec![MATMUL.to_owned()],
            backoff: Backoff::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.as_str().is_empty() {
            return Err(Error::InvalidArgument("provider id is empty".into()));
        }
        if !(self.heartbeat_interval.is_finite() && self.heartbeat_interval > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "heartbeat interval must be positive, got {}",
                self.heartbeat_interval
            )));
        }
        if !(self.slowdown.is_finite() && self.slowdown >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "slowdown must be at least 1, got {}",
                self.slowdown
            )));
        }
        if !(self.operand_timeout.is_finite() && self.operand_timeout > 0.0) {
            return Err(Error::InvalidArgument("operand timeout must be positive".into()));
        }
        if let Some(c) = self.calibration {
            PerformanceValue::new(c)?;
        }
        Ok(())
    }
}

/// Median wall time of one calibration-block product, in seconds.
pub fn benchmark_block() -> f64 {
    let (a, b) = seeded_pair(CALIBRATION_BLOCK, 0).expect("calibration block is non-empty");
    // Untimed run to fault in pages and warm the caches.
    std::hint::black_box(multiply_block(&a, &b).expect("conformable"));
    let mut times: Vec<f64> = (0..CALIBRATION_RUNS)
        .map(|_| {
            let t = Instant::now();
            let c = multiply_block(&a, &b).expect("conformable");
            std::hint::black_box(c);
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    (times[mid - 1] + times[mid]) / 2.0
}

/// Rows per second on the calibration block, divided by the slowdown.
/// Returns the override untouched when one is set.
pub fn calibrate(config: &ProviderConfig) -> Result<PerformanceValue> {
    if let Some(c) = config.calibration {
        return PerformanceValue::new(c);
    }
    let median = benchmark_block().max(1e-9);
    PerformanceValue::new(CALIBRATION_BLOCK as f64 / median / config.slowdown)
}

/// Busy time accumulated since the last heartbeat.
#[derive(Debug)]
pub struct BusyMeter {
    inner: Mutex<BusyState>,
}

#[derive(Debug)]
struct BusyState {
    window_start: Instant,
    busy: Duration,
    running_since: Option<Instant>,
}

impl BusyMeter {
    pub fn new() -> Self {
        BusyMeter {
            inner: Mutex::new(BusyState {
                window_start: Instant::now(),
                busy: Duration::ZERO,
                running_since: None,
            }),
        }
    }

    pub fn start(&self) {
        self.inner.lock().unwrap().running_since = Some(Instant::now());
    }

    pub fn stop(&self) {
        let mut s = self.inner.lock().unwrap();
        if let Some(t) = s.running_since.take() {
            s.busy += t.elapsed();
        }
    }

    /// Busy fraction of the window that ends now; opens a new window.
    pub fn take_fraction(&self) -> f64 {
        let now = Instant::now();
        let mut s = self.inner.lock().unwrap();
        let mut busy = s.busy;
        if let Some(t) = s.running_since {
            busy += now - t;
            s.running_since = Some(now);
        }
        let window = now - s.window_start;
        s.window_start = now;
        s.busy = Duration::ZERO;
        if window.is_zero() {
            return 0.0;
        }
        (busy.as_secs_f64() / window.as_secs_f64()).clamp(0.0, 1.0)
    }
}

impl Default for BusyMeter {
    fn default() -> Self {
        Self::new()
    }
}

/// Flag plus condvar so sleeping threads wake promptly on stop.
struct StopSignal {
    stopped: Mutex<bool>,
    cv: Condvar,
}

impl StopSignal {
    fn raise(&self) {
        *self.stopped.lock().unwrap() = true;
        self.cv.notify_all();
    }

    fn is_raised(&self) -> bool {
        *self.stopped.lock().unwrap()
    }

    /// Sleeps up to `d`; true if stop was raised.
    fn wait(&self, d: Duration) -> bool {
        let guard = self.stopped.lock().unwrap();
        let (guard, _) = self.cv.wait_timeout_while(guard, d, |s| !*s).unwrap();
        *guard
    }
}

#[derive(Debug, Clone)]
struct SubRequest {
    job_id: u64,
    range: RowRange,
    first_rows: u64,
    client: Endpoint,
    block: Matrix,
}

/// Operands by job id. Jobs that already ran (or gave up) are remembered so
/// a late operand is not kept forever.
#[derive(Default)]
struct Operands {
    by_job: HashMap<u64, Arc<Matrix>>,
    done: VecDeque<u64>,
}

const DONE_MEMORY: usize = 1024;

impl Operands {
    fn finish(&mut self, job_id: u64) {
        self.by_job.remove(&job_id);
        if self.done.len() == DONE_MEMORY {
            self.done.pop_front();
        }
        self.done.push_back(job_id);
    }
}

struct Shared {
    config: ProviderConfig,
    calibration: f64,
    endpoint: Endpoint,
    network: Arc<dyn Network>,
    busy: BusyMeter,
    operands: Mutex<Operands>,
    operand_cv: Condvar,
    stop: StopSignal,
    stopping: AtomicBool,
    closers: Mutex<Vec<Arc<dyn Shutdown>>>,
}

pub struct ProviderHandle {
    shared: Arc<Shared>,
    listener_closer: Arc<dyn Shutdown>,
    threads: Vec<JoinHandle<()>>,
}

impl ProviderHandle {
    /// Where this provider accepts sub-requests and operands.
    pub fn endpoint(&self) -> &Endpoint {
        &self.shared.endpoint
    }

    pub fn id(&self) -> &ProviderId {
        &self.shared.config.id
    }

    pub fn calibration(&self) -> f64 {
        self.shared.calibration
    }

    pub fn stop(&mut self) {
        self.shared.stopping.store(true, Ordering::SeqCst);
        self.shared.stop.raise();
        self.listener_closer.shutdown();
        for c in self.shared.closers.lock().unwrap().drain(..) {
            c.shutdown();
        }
        self.shared.operand_cv.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the provider is stopped from elsewhere.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ProviderHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Calibrates, binds, registers and starts all duties. Fails if the first
/// registration does not succeed.
pub fn spawn(network: Arc<dyn Network>, config: ProviderConfig) -> Result<ProviderHandle> {
    config.validate()?;
    let calibration = calibrate(&config)?.get();
    let mut listener = network.listen(&config.listen)?;
    let endpoint = listener.local_endpoint();
    let listener_closer = listener.closer();
    log::info!(
        "event=provider_start provider={} endpoint={endpoint} calibration={calibration}",
        config.id
    );

    let shared = Arc::new(Shared {
        config,
        calibration,
        endpoint,
        network,
        busy: BusyMeter::new(),
        operands: Mutex::new(Operands::default()),
        operand_cv: Condvar::new(),
        stop: StopSignal {
            stopped: Mutex::new(false),
            cv: Condvar::new(),
        },
        stopping: AtomicBool::new(false),
        closers: Mutex::new(Vec::new()),
    });

    let link = match register(&shared, &shared.config.backoff) {
        Ok(link) => link,
        Err(e) => {
            listener_closer.shutdown();
            return Err(e);
        }
    };

    let (jobs_tx, jobs_rx) = mpsc::channel::<SubRequest>();
    let mut threads = Vec::new();
    let spawn_named = |name: &str, f: Box<dyn FnOnce() + Send>| {
        thread::Builder::new()
            .name(format!("{name}-{}", shared.config.id))
            .spawn(f)
            .map_err(|e| Error::io("spawning provider thread", e))
    };

    let s = shared.clone();
    threads.push(spawn_named(
        "provider-accept",
        Box::new(move || accept_loop(&s, listener.as_mut(), jobs_tx)),
    )?);
    let s = shared.clone();
    threads.push(spawn_named(
        "provider-worker",
        Box::new(move || worker_loop(&s, jobs_rx)),
    )?);
    let s = shared.clone();
    threads.push(spawn_named(
        "provider-heartbeat",
        Box::new(move || heartbeat_loop(&s, link)),
    )?);

    Ok(ProviderHandle {
        shared,
        listener_closer,
        threads,
    })
}

/// Connects to the coordinator, registers and waits for the ack. The
/// connection is kept for heartbeats.
fn register(shared: &Shared, backoff: &Backoff) -> Result<Connection> {
    let cfg = &shared.config;
    let mut conn = backoff.connect(shared.network.as_ref(), &cfg.coordinator)?;
    conn.send(&Message::new(
        0,
        cfg.id.as_str(),
        Body::Register {
            endpoint: shared.endpoint.clone(),
            services: cfg.services.clone(),
        },
    ))?;
    loop {
        let reply = conn.receive()?;
        match reply.body {
            Body::RegisterAck {
                heartbeat_interval,
                staleness_window,
            } => {
                log::info!(
                    "event=registered provider={} heartbeat={heartbeat_interval} staleness={staleness_window}",
                    cfg.id
                );
                if cfg.heartbeat_interval > staleness_window {
                    log::warn!(
                        "event=heartbeat_too_slow provider={} interval={} staleness={staleness_window}",
                        cfg.id,
                        cfg.heartbeat_interval
                    );
                }
                shared.closers.lock().unwrap().push(conn.closer());
                return Ok(conn);
            }
            Body::Error { code, detail } => return Err(Error::RegistrationRejected(format!("{code}: {detail}"))),
            _ => continue,
        }
    }
}

fn heartbeat_loop(shared: &Shared, link: Connection) {
    let interval = secs(shared.config.heartbeat_interval);
    let once = Backoff {
        max_attempts: 1,
        ..shared.config.backoff
    };
    let mut link = Some(link);
    loop {
        if link.is_none() {
            match register(shared, &once) {
                Ok(c) => link = Some(c),
                Err(e) => log::warn!("event=reregister_failed provider={} error={e}", shared.config.id),
            }
        }
        if let Some(conn) = link.as_mut() {
            let load_factor = shared.busy.take_fraction();
            let beat = Message::new(
                0,
                shared.config.id.as_str(),
                Body::Heartbeat {
                    raw_speed: shared.calibration,
                    load_factor,
                },
            );
            if let Err(e) = conn.send(&beat) {
                log::warn!("event=heartbeat_failed provider={} error={e}", shared.config.id);
                link = None;
            }
        }
        if shared.stop.wait(interval) {
            break;
        }
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: &mut dyn crate::transport::Listener, jobs: mpsc::Sender<SubRequest>) {
    while let Ok(conn) = listener.accept() {
        shared.closers.lock().unwrap().push(conn.closer());
        let s = shared.clone();
        let jobs = jobs.clone();
        let (mut source, _sink, _) = conn.split();
        let spawned = thread::Builder::new()
            .name(format!("provider-conn-{}", shared.config.id))
            .spawn(move || {
                while let Ok(msg) = source.receive() {
                    handle_inbound(&s, msg, &jobs);
                }
            });
        if let Err(e) = spawned {
            log::error!("event=spawn_failed error={e}");
        }
    }
}

fn handle_inbound(shared: &Shared, msg: Message, jobs: &mpsc::Sender<SubRequest>) {
    let job_id = msg.job_id;
    match msg.body {
        Body::SubRequest {
            workload,
            range,
            first_rows,
            client,
            block,
        } => {
            if !shared.config.services.contains(&workload) {
                let e = Error::InvalidMessage(format!("workload {workload:?} not offered"));
                report_error(shared, job_id, &client, &e);
                return;
            }
            log::debug!("event=sub_request job_id={job_id} range={range}");
            let _ = jobs.send(SubRequest {
                job_id,
                range,
                first_rows,
                client,
                block,
            });
        }
        Body::BroadcastOperand { operand } => {
            let mut ops = shared.operands.lock().unwrap();
            if ops.done.contains(&job_id) {
                log::debug!("event=late_operand job_id={job_id}");
                return;
            }
            ops.by_job.insert(job_id, Arc::new(operand));
            drop(ops);
            shared.operand_cv.notify_all();
            log::debug!("event=operand job_id={job_id}");
        }
        Body::Error { code, detail } => {
            log::warn!("event=peer_error job_id={job_id} code={code} detail={detail:?}");
        }
        other => log::debug!("event=ignored job_id={job_id} kind={:?}", other.kind()),
    }
}

fn worker_loop(shared: &Shared, jobs: mpsc::Receiver<SubRequest>) {
    loop {
        match jobs.recv_timeout(Duration::from_millis(50)) {
            Ok(sub) => execute(shared, sub),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if shared.stop.is_raised() {
                    break;
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
}

fn execute(shared: &Shared, sub: SubRequest) {
    let job_id = sub.job_id;
    if sub.range.is_empty() {
        shared.operands.lock().unwrap().finish(job_id);
        return;
    }
    if sub.range.end as u64 > sub.first_rows || sub.block.rows() != sub.range.len() {
        let e = Error::InvalidMessage(format!(
            "range {} does not fit a {}-row operand with a {}-row block",
            sub.range,
            sub.first_rows,
            sub.block.rows()
        ));
        report_error(shared, job_id, &sub.client, &e);
        return;
    }

    let operand = {
        let ops = shared.operands.lock().unwrap();
        let timeout = secs(shared.config.operand_timeout);
        let (mut ops, _) = shared
            .operand_cv
            .wait_timeout_while(ops, timeout, |o| {
                !o.by_job.contains_key(&job_id) && !shared.stopping.load(Ordering::SeqCst)
            })
            .unwrap();
        let found = ops.by_job.get(&job_id).cloned();
        ops.finish(job_id);
        found
    };
    let Some(operand) = operand else {
        if !shared.stopping.load(Ordering::SeqCst) {
            report_error(shared, job_id, &sub.client, &Error::OperandTimeout(job_id));
        }
        return;
    };

    shared.busy.start();
    let started = Instant::now();
    let product = multiply_block(&sub.block, &operand);
    if product.is_ok() {
        // Pad to `slowdown` times the real compute time.
        let target = started.elapsed().mul_f64(shared.config.slowdown);
        while started.elapsed() < target {
            std::hint::spin_loop();
        }
    }
    let compute_seconds = started.elapsed().as_secs_f64();
    shared.busy.stop();

    let block = match product {
        Ok(b) => b,
        Err(e) => return report_error(shared, job_id, &sub.client, &e),
    };
    log::debug!(
        "event=computed job_id={job_id} range={} seconds={compute_seconds:.6}",
        sub.range
    );
    let result = Message::new(
        job_id,
        shared.config.id.as_str(),
        Body::PartialResult {
            range: sub.range,
            compute_seconds,
            block,
        },
    );
    if let Err(e) = send_once(shared, &sub.client, &result) {
        log::warn!("event=result_undeliverable job_id={job_id} error={e}");
    }
}

fn send_once(shared: &Shared, to: &Endpoint, message: &Message) -> Result<()> {
    let conn = shared.config.backoff.connect(shared.network.as_ref(), to)?;
    let (_, mut sink, _): (_, Box<dyn FrameSink>, _) = conn.split();
    sink.send(message)
}

/// Tells both the client and the coordinator that a job step failed.
fn report_error(shared: &Shared, job_id: u64, client: &Endpoint, error: &Error) {
    log::warn!("event=sub_request_failed job_id={job_id} error={error}");
    let msg = Message::error(job_id, shared.config.id.as_str(), error);
    for to in [client, &shared.config.coordinator] {
        if let Err(e) = send_once(shared, to, &msg) {
            log::warn!("event=error_undeliverable job_id={job_id} to={to} error={e}");
        }
    }
}
