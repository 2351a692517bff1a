//! The thin client: asks the coordinator for a plan, broadcasts the second
//! operand straight to the chosen providers and assembles their partial
//! results.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::coordinator::secs;
use crate::error::{Error, Result};
use crate::matmul::{Matrix, RowRange};
use crate::perf_model::{predicted_speedup, virtual_machine_count, OverheadModel, SpeedupModel};
use crate::provider::CALIBRATION_BLOCK;
use crate::scheduler::{ProviderId, ScopePlan};
use crate::sim::RunMeasurement;
use crate::transport::{Backoff, Body, Endpoint, Message, Network, Participant, Policy};

pub const MATMUL: &str = "matmul";

/// A job as the coordinator sees it. The first operand travels with the
/// request so the coordinator can hand each provider its row block.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRequest {
    pub job_id: u64,
    pub workload: String,
    pub policy: Policy,
    pub reply: Endpoint,
    pub first: Matrix,
    pub second_cols: u32,
}

impl JobRequest {
    /// Total load in rows of the first operand.
    pub fn work_units(&self) -> u64 {
        self.first.rows() as u64
    }

    pub fn to_message(&self, sender: &str) -> Message {
        Message::new(
            self.job_id,
            sender,
            Body::JobRequest {
                workload: self.workload.clone(),
                policy: self.policy,
                reply: self.reply.clone(),
                first: self.first.clone(),
                second_cols: self.second_cols,
            },
        )
    }

    pub fn from_message(message: Message) -> Result<Self> {
        message.validate()?;
        match message.body {
            Body::JobRequest {
                workload,
                policy,
                reply,
                first,
                second_cols,
            } => {
                if second_cols == 0 {
                    return Err(Error::InvalidMessage("second operand has no columns".into()));
                }
                Ok(JobRequest {
                    job_id: message.job_id,
                    workload,
                    policy,
                    reply,
                    first,
                    second_cols,
                })
            }
            other => Err(Error::InvalidMessage(format!(
                "expected JobRequest, got {:?}",
                other.kind()
            ))),
        }
    }
}

/// Partial results collected so far for one job.
#[derive(Debug, Clone)]
pub struct AssemblyBuffer {
    expected: BTreeSet<RowRange>,
    received: BTreeMap<RowRange, Matrix>,
    cols: usize,
    deadline: Instant,
}

impl AssemblyBuffer {
    pub fn new(expected: impl IntoIterator<Item = RowRange>, cols: usize, deadline: Instant) -> Self {
        AssemblyBuffer {
            expected: expected.into_iter().filter(|r| !r.is_empty()).collect(),
            received: BTreeMap::new(),
            cols,
            deadline,
        }
    }

    pub fn deadline(&self) -> Instant {
        self.deadline
    }

    pub fn insert(&mut self, range: RowRange, block: Matrix) -> Result<()> {
        if self.received.keys().any(|r| r.overlaps(&range)) {
            return Err(Error::DuplicateRange(range.to_string()));
        }
        if !self.expected.contains(&range) {
            return Err(Error::UnexpectedRange(range.to_string()));
        }
        if block.rows() != range.len() || block.cols() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "block for {range} is {}x{}, expected {}x{}",
                block.rows(),
                block.cols(),
                range.len(),
                self.cols
            )));
        }
        self.received.insert(range, block);
        Ok(())
    }

    pub fn missing(&self) -> usize {
        self.expected.len() - self.received.len()
    }

    pub fn is_complete(&self) -> bool {
        self.missing() == 0
    }

    /// Stacks the blocks in ascending row order.
    pub fn assemble(&self) -> Result<Matrix> {
        if !self.is_complete() {
            return Err(Error::Incomplete(self.missing()));
        }
        Matrix::vstack(self.received.values())
    }
}

/// Wall-clock account of one live job. Times are seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub job_id: u64,
    pub policy: Policy,
    pub load_rows: u64,
    /// Columns of the first operand times columns of the second, the
    /// per-row multiply-add count.
    pub row_cost: f64,
    pub total: f64,
    pub predicted_finish: f64,
    pub participants: Vec<Participant>,
    /// Arrival of each partial result, relative to submission.
    pub receive_times: Vec<(ProviderId, f64)>,
    /// Pure compute duration each provider stamped on its result.
    pub compute_times: Vec<(ProviderId, f64)>,
}

impl TimingReport {
    pub fn plan(&self) -> Result<ScopePlan> {
        ScopePlan::from_allotments(
            self.load_rows,
            self.participants
                .iter()
                .map(|p| (p.provider.clone(), p.range.len() as u64))
                .collect(),
        )
    }

    pub fn compute_max(&self) -> f64 {
        self.compute_times.iter().fold(0.0, |m, (_, t)| m.max(*t))
    }

    pub fn overhead(&self) -> f64 {
        self.total - self.compute_max()
    }

    /// This run in the sweep CSV schema, with `run_id` set to the job id.
    ///
    /// `standalone_speed` is the reference machine in calibration units
    /// (rows per second on a 64-wide block); `overhead_slope` is seconds per
    /// row.
    pub fn measurement(&self, standalone_speed: f64, overhead_slope: f64) -> Result<RunMeasurement> {
        let block_cost = (CALIBRATION_BLOCK * CALIBRATION_BLOCK) as f64;
        let t_standalone = self.load_rows as f64 * self.row_cost / block_cost / standalone_speed;
        let p_total: f64 = self.participants.iter().map(|p| p.performance).sum();
        let n_h = virtual_machine_count(p_total, standalone_speed)?;
        let model = SpeedupModel::new(
            t_standalone,
            n_h,
            OverheadModel::new(overhead_slope)?,
            self.load_rows as f64,
        )?;
        Ok(RunMeasurement {
            run_id: self.job_id,
            policy: self.policy.as_str().to_owned(),
            load_rows: self.load_rows,
            n_providers: self.participants.len(),
            n_h,
            t_standalone_s: t_standalone,
            t_total_s: self.total,
            t_compute_max_s: self.compute_max(),
            t_overhead_s: self.overhead(),
            speedup_measured: t_standalone / self.total,
            speedup_formula: predicted_speedup(&model),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub coordinator: Endpoint,
    /// Host the client listens on for partial results.
    pub listen_host: String,
    pub sender: String,
    pub backoff: Backoff,
}

impl ClientConfig {
    pub fn new(coordinator: Endpoint) -> Self {
        ClientConfig {
            coordinator,
            listen_host: "127.0.0.1".into(),
            sender: "client".into(),
            backoff: Backoff::default(),
        }
    }
}

pub fn new_job_id() -> u64 {
    rand::thread_rng().gen_range(1..=u64::MAX)
}

/// Runs `first × second` on the cluster.
pub fn submit(
    network: Arc<dyn Network>,
    config: &ClientConfig,
    first: &Matrix,
    second: &Matrix,
    policy: Policy,
) -> Result<(Matrix, TimingReport)> {
    if first.cols() != second.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} times {}x{}",
            first.rows(),
            first.cols(),
            second.rows(),
            second.cols()
        )));
    }
    let second_cols =
        u32::try_from(second.cols()).map_err(|_| Error::InvalidArgument("second operand too wide".into()))?;
    let job_id = new_job_id();

    let mut listener = network.listen(&Endpoint::bind_any(config.listen_host.clone()))?;
    let reply = listener.local_endpoint();
    let listener_closer = listener.closer();
    let (tx, rx) = mpsc::channel::<Message>();
    let acceptor = thread::Builder::new()
        .name("client-accept".into())
        .spawn(move || {
            while let Ok(conn) = listener.accept() {
                let tx = tx.clone();
                let (mut source, _sink, _) = conn.split();
                let _ = thread::Builder::new().name("client-conn".into()).spawn(move || {
                    while let Ok(msg) = source.receive() {
                        if tx.send(msg).is_err() {
                            break;
                        }
                    }
                });
            }
        })
        .map_err(|e| Error::io("spawning client acceptor", e))?;

    let result = run_job(
        network.as_ref(),
        config,
        JobRequest {
            job_id,
            workload: MATMUL.into(),
            policy,
            reply,
            first: first.clone(),
            second_cols,
        },
        second,
        &rx,
    );
    listener_closer.shutdown();
    let _ = acceptor.join();
    result
}

fn run_job(
    network: &dyn Network,
    config: &ClientConfig,
    request: JobRequest,
    second: &Matrix,
    arrivals: &mpsc::Receiver<Message>,
) -> Result<(Matrix, TimingReport)> {
    let job_id = request.job_id;
    let started = Instant::now();

    let mut coordinator = config.backoff.connect(network, &config.coordinator)?;
    coordinator.send(&request.to_message(&config.sender))?;
    log::info!("event=job_submitted job_id={job_id} policy={}", request.policy);
    let (predicted_finish, participants) = loop {
        let msg = coordinator.receive()?;
        match msg.body {
            Body::JobAccepted {
                predicted_finish,
                participants,
            } if msg.job_id == job_id => break (predicted_finish, participants),
            Body::Error { code, detail } => {
                return Err(Error::JobFailed {
                    job_id,
                    detail: format!("{code}: {detail}"),
                })
            }
            other => log::debug!("event=ignored job_id={} kind={:?}", msg.job_id, other.kind()),
        }
    };
    drop(coordinator);

    let deadline = started + secs(10.0 * predicted_finish) + Duration::from_secs(30);
    let mut buffer = AssemblyBuffer::new(participants.iter().map(|p| p.range), second.cols(), deadline);

    let operand = Message::new(
        job_id,
        config.sender.as_str(),
        Body::BroadcastOperand {
            operand: second.clone(),
        },
    );
    for p in &participants {
        let mut conn = config.backoff.connect(network, &p.endpoint)?;
        conn.send(&operand)?;
        log::debug!("event=operand_sent job_id={job_id} provider={}", p.provider);
    }

    let owner: BTreeMap<RowRange, ProviderId> = participants.iter().map(|p| (p.range, p.provider.clone())).collect();
    let mut receive_times = Vec::new();
    let mut compute_times = Vec::new();
    while !buffer.is_complete() {
        let now = Instant::now();
        if now >= deadline {
            return Err(Error::AssemblyTimeout(buffer.missing()));
        }
        let msg = match arrivals.recv_timeout(deadline - now) {
            Ok(m) => m,
            Err(mpsc::RecvTimeoutError::Timeout) => return Err(Error::AssemblyTimeout(buffer.missing())),
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(Error::ChannelClosed),
        };
        if msg.job_id != job_id {
            continue;
        }
        match msg.body {
            Body::PartialResult {
                range,
                compute_seconds,
                block,
            } => {
                let at = started.elapsed().as_secs_f64();
                buffer.insert(range, block)?;
                let provider = owner
                    .get(&range)
                    .cloned()
                    .unwrap_or_else(|| ProviderId::new(msg.sender));
                log::debug!("event=partial_received job_id={job_id} provider={provider} range={range}");
                receive_times.push((provider.clone(), at));
                compute_times.push((provider, compute_seconds));
            }
            Body::Error { code, detail } => {
                return Err(Error::JobFailed {
                    job_id,
                    detail: format!("{} reported {code}: {detail}", msg.sender),
                })
            }
            other => log::debug!("event=ignored job_id={job_id} kind={:?}", other.kind()),
        }
    }
    let product = buffer.assemble()?;
    let total = started.elapsed().as_secs_f64();
    log::info!("event=job_complete job_id={job_id} seconds={total:.6}");
    Ok((
        product,
        TimingReport {
            job_id,
            policy: request.policy,
            load_rows: request.work_units(),
            row_cost: request.first.cols() as f64 * f64::from(request.second_cols),
            total,
            predicted_finish,
            participants,
            receive_times,
            compute_times,
        },
    ))
}
