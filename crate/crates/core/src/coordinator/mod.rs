//! The coordinator: provider registry, performance table, job planning and
//! dispatch.
//!
//! [`Coordinator`] is the pure state machine (every method takes the current
//! time explicitly); [`server`] wires it to a network.

pub mod server;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::JobRequest;
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::matmul::plan_ranges;
use crate::provider::CALIBRATION_BLOCK;
use crate::scheduler::{
    compute_scope_lengths, equal_scope_lengths, homogenize_performance, predicted_finish_times,
    weighted_effective_speed, EwmaParams, PerformanceSample, ProviderId, ScopePlan,
};
use crate::transport::{Backoff, Body, Endpoint, Message, Participant, Policy, ProviderStatus};

pub use server::{spawn, CoordinatorHandle};

pub const COORDINATOR_SENDER: &str = "coordinator";

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorConfig {
    pub heartbeat_interval: f64,
    pub staleness_window: f64,
    pub ewma: EwmaParams,
    pub history_bound: usize,
    pub snapshot_path: Option<PathBuf>,
    /// Reconnect schedule used when reaching providers at dispatch time.
    pub dispatch_backoff: Backoff,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig::with_heartbeat_interval(2.0)
    }
}

impl CoordinatorConfig {
    /// Defaults with the staleness window tied to three heartbeat intervals.
    pub fn with_heartbeat_interval(seconds: f64) -> Self {
        CoordinatorConfig {
            heartbeat_interval: seconds,
            staleness_window: 3.0 * seconds,
            ewma: EwmaParams::default(),
            history_bound: 64,
            snapshot_path: None,
            dispatch_backoff: Backoff::default(),
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "heartbeat_interval",
        "staleness_window",
        "half_life",
        "epsilon_floor",
        "history_bound",
        "snapshot_path",
    ];

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.deny_unknown(Self::KEYS)?;
        let hb = kv.get::<f64>("heartbeat_interval")?.unwrap_or(2.0);
        let mut cfg = CoordinatorConfig::with_heartbeat_interval(hb);
        if let Some(w) = kv.get("staleness_window")? {
            cfg.staleness_window = w;
        }
        if let Some(h) = kv.get("half_life")? {
            cfg.ewma.half_life = h;
        }
        if let Some(e) = kv.get("epsilon_floor")? {
            cfg.ewma.epsilon_floor = e;
        }
        if let Some(b) = kv.get("history_bound")? {
            cfg.history_bound = b;
        }
        cfg.snapshot_path = kv.raw("snapshot_path").map(PathBuf::from);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("heartbeat_interval", self.heartbeat_interval)?;
        positive("staleness_window", self.staleness_window)?;
        positive("half_life", self.ewma.half_life)?;
        positive("epsilon_floor", self.ewma.epsilon_floor)?;
        if self.history_bound == 0 {
            return Err(Error::Config("history_bound must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub endpoint: Endpoint,
    pub services: BTreeSet<String>,
    /// Ordered by `reported_at`, oldest first; at most `history_bound` long.
    pub history: Vec<PerformanceSample>,
    pub last_seen: Option<f64>,
    /// Last measured connect time to the provider, in seconds. Informational.
    pub round_trip: Option<f64>,
}

/// What the coordinator knows about its providers.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceTable {
    entries: BTreeMap<ProviderId, TableEntry>,
    bound: usize,
}

impl PerformanceTable {
    pub fn new(bound: usize) -> Self {
        PerformanceTable {
            entries: BTreeMap::new(),
            bound: bound.max(1),
        }
    }

    pub fn register(&mut self, id: ProviderId, endpoint: Endpoint, services: BTreeSet<String>) -> Result<()> {
        if id.as_str().is_empty() {
            return Err(Error::RegistrationRejected("empty provider id".into()));
        }
        if endpoint.host.is_empty() || endpoint.port == 0 {
            return Err(Error::RegistrationRejected(format!("endpoint {endpoint}")));
        }
        match self.entries.get_mut(&id) {
            Some(entry) => {
                entry.endpoint = endpoint;
                entry.services = services;
            }
            None => {
                self.entries.insert(
                    id,
                    TableEntry {
                        endpoint,
                        services,
                        history: Vec::new(),
                        last_seen: None,
                        round_trip: None,
                    },
                );
            }
        }
        Ok(())
    }

    pub fn ingest(&mut self, sample: PerformanceSample) -> Result<()> {
        let entry = self
            .entries
            .get_mut(&sample.provider)
            .ok_or_else(|| Error::UnknownProvider(sample.provider.to_string()))?;
        let at = entry.history.partition_point(|s| s.reported_at <= sample.reported_at);
        entry.history.insert(at, sample);
        if entry.history.len() > self.bound {
            let excess = entry.history.len() - self.bound;
            entry.history.drain(..excess);
        }
        entry.last_seen = entry.history.last().map(|s| s.reported_at);
        Ok(())
    }

    pub fn get(&self, id: &ProviderId) -> Option<&TableEntry> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&ProviderId, &TableEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn set_round_trip(&mut self, id: &ProviderId, seconds: f64) {
        if let Some(e) = self.entries.get_mut(id) {
            e.round_trip = Some(seconds);
        }
    }
}

/// A planned job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub job_id: u64,
    pub client: Endpoint,
    pub workload: String,
    pub total_load: u64,
    pub policy: Policy,
    pub plan: ScopePlan,
    /// Homogenized performance of every planned provider.
    pub performances: BTreeMap<ProviderId, f64>,
    pub endpoints: BTreeMap<ProviderId, Endpoint>,
    pub dispatched_at: f64,
    /// Predicted compute time of the slowest provider, in seconds.
    pub predicted_finish: f64,
}

impl JobRecord {
    pub fn participants(&self) -> Vec<Participant> {
        plan_ranges(&self.plan)
            .into_iter()
            .map(|(provider, range)| Participant {
                endpoint: self.endpoints[&provider].clone(),
                performance: self.performances[&provider],
                provider,
                range,
            })
            .collect()
    }

    pub fn accepted_message(&self) -> Message {
        Message::new(
            self.job_id,
            COORDINATOR_SENDER,
            Body::JobAccepted {
                predicted_finish: self.predicted_finish,
                participants: self.participants(),
            },
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotEntry {
    id: ProviderId,
    host: String,
    port: u16,
    services: Vec<String>,
}

/// Coordinator state. All mutation goes through `&mut self`.
#[derive(Debug, Clone)]
pub struct Coordinator {
    config: CoordinatorConfig,
    table: PerformanceTable,
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig) -> Result<Self> {
        config.validate()?;
        let mut coordinator = Coordinator {
            table: PerformanceTable::new(config.history_bound),
            config,
        };
        if let Some(path) = coordinator.config.snapshot_path.clone() {
            if path.exists() {
                coordinator.restore(&path)?;
            }
        }
        Ok(coordinator)
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn table(&self) -> &PerformanceTable {
        &self.table
    }

    pub fn register_provider(
        &mut self,
        id: ProviderId,
        endpoint: Endpoint,
        services: impl IntoIterator<Item = String>,
    ) -> Result<()> {
        self.table.register(id, endpoint, services.into_iter().collect())?;
        if let Some(path) = &self.config.snapshot_path {
            if let Err(e) = self.write_snapshot(path) {
                log::warn!("event=snapshot_failed path={} error={e}", path.display());
            }
        }
        Ok(())
    }

    pub fn ingest_heartbeat(&mut self, sample: PerformanceSample) -> Result<()> {
        self.table.ingest(sample)
    }

    pub fn record_round_trip(&mut self, id: &ProviderId, seconds: f64) {
        self.table.set_round_trip(id, seconds);
    }

    fn is_fresh(&self, entry: &TableEntry, now: f64) -> bool {
        entry.last_seen.is_some_and(|t| now - t <= self.config.staleness_window)
    }

    /// Homogenized performance of every fresh provider offering `workload`,
    /// minus `excluded` and minus providers below the epsilon floor.
    pub fn eligible(&self, workload: &str, now: f64, excluded: &BTreeSet<ProviderId>) -> BTreeMap<ProviderId, f64> {
        let mut out = BTreeMap::new();
        for (id, entry) in self.table.entries() {
            if excluded.contains(id) || !entry.services.contains(workload) || !self.is_fresh(entry, now) {
                continue;
            }
            match weighted_effective_speed(&entry.history, now, self.config.ewma.half_life) {
                Ok(v) if v >= self.config.ewma.epsilon_floor => {
                    out.insert(id.clone(), v);
                }
                _ => {}
            }
        }
        out
    }

    pub fn plan_job(&self, request: &JobRequest, now: f64) -> Result<JobRecord> {
        self.plan_job_excluding(request, now, &BTreeSet::new())
    }

    pub fn plan_job_excluding(
        &self,
        request: &JobRequest,
        now: f64,
        excluded: &BTreeSet<ProviderId>,
    ) -> Result<JobRecord> {
        let performances = self.eligible(&request.workload, now, excluded);
        if performances.is_empty() {
            return Err(Error::NoProviders(request.workload.clone()));
        }
        let total_load = request.work_units();
        let plan = match request.policy {
            Policy::Homogenized => compute_scope_lengths(total_load, &performances)?,
            Policy::EqualSplit => {
                let ids: Vec<_> = performances.keys().cloned().collect();
                equal_scope_lengths(total_load, &ids)?
            }
        };
        // Performances are rows/s on the calibration block; scale by the
        // per-row cost of this job relative to that block.
        let row_cost = (request.first.cols() as f64 * f64::from(request.second_cols))
            / (CALIBRATION_BLOCK * CALIBRATION_BLOCK) as f64;
        let predicted_finish = predicted_finish_times(&plan, &performances)?
            .values()
            .fold(0.0f64, |m, &t| m.max(t))
            * row_cost;
        let endpoints = performances
            .keys()
            .map(|id| (id.clone(), self.table.entries[id].endpoint.clone()))
            .collect();
        Ok(JobRecord {
            job_id: request.job_id,
            client: request.reply.clone(),
            workload: request.workload.clone(),
            total_load,
            policy: request.policy,
            plan,
            performances,
            endpoints,
            dispatched_at: now,
            predicted_finish,
        })
    }

    /// The operator view of the table.
    pub fn status(&self, now: f64) -> Vec<ProviderStatus> {
        self.table
            .entries()
            .map(|(id, entry)| ProviderStatus {
                provider: id.clone(),
                endpoint: entry.endpoint.clone(),
                services: entry.services.iter().cloned().collect(),
                performance: homogenize_performance(&entry.history, now, &self.config.ewma)
                    .ok()
                    .map(|h| h.value.get()),
                last_seen_age: entry.last_seen.map(|t| (now - t).max(0.0)),
                round_trip: entry.round_trip,
                fresh: self.is_fresh(entry, now),
            })
            .collect()
    }

    fn write_snapshot(&self, path: &Path) -> Result<()> {
        let entries: Vec<SnapshotEntry> = self
            .table
            .entries()
            .map(|(id, e)| SnapshotEntry {
                id: id.clone(),
                host: e.endpoint.host.clone(),
                port: e.endpoint.port,
                services: e.services.iter().cloned().collect(),
            })
            .collect();
        let json =
            serde_json::to_vec_pretty(&entries).map_err(|e| Error::Config(format!("serializing snapshot: {e}")))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    fn restore(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let entries: Vec<SnapshotEntry> =
            serde_json::from_slice(&text).map_err(|e| Error::Config(format!("snapshot {}: {e}", path.display())))?;
        for e in entries {
            self.table
                .register(e.id, Endpoint::new(e.host, e.port)?, e.services.into_iter().collect())?;
        }
        Ok(())
    }
}

/// Side effects of dispatching, abstracted so dispatch can be exercised
/// without a network.
pub trait Outbox {
    /// Makes sure the provider can be sent to; returns the connect time in
    /// seconds if a new connection was made.
    fn reach(&mut self, provider: &ProviderId, endpoint: &Endpoint) -> Result<Option<f64>>;
    fn deliver(&mut self, provider: &ProviderId, message: Message) -> Result<()>;
    /// Sends to the requesting client.
    fn reply(&mut self, message: Message) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    pub record: JobRecord,
    pub round_trips: Vec<(ProviderId, f64)>,
}

/// Sends one `SUB_REQUEST` per provider with a non-zero allotment, then
/// `JOB_ACCEPTED` to the client.
///
/// Providers that cannot be reached are excluded and the job is replanned
/// once over the rest; a second failure fails the job and the client gets an
/// `ERROR` instead.
pub fn dispatch(
    coordinator: &Coordinator,
    request: &JobRequest,
    record: JobRecord,
    outbox: &mut dyn Outbox,
) -> Result<DispatchOutcome> {
    let job_id = record.job_id;
    let mut round_trips = Vec::new();
    let mut excluded = BTreeSet::new();
    let mut record = record;
    let result = (|| {
        for attempt in 0..2 {
            let participants = record.participants();
            if participants.is_empty() {
                return Err(Error::JobFailed {
                    job_id,
                    detail: "plan assigns no work".into(),
                });
            }
            let mut unreachable = Vec::new();
            for p in &participants {
                match outbox.reach(&p.provider, &p.endpoint) {
                    Ok(Some(rtt)) => round_trips.push((p.provider.clone(), rtt)),
                    Ok(None) => {}
                    Err(e) => {
                        log::warn!(
                            "event=provider_unreachable job_id={job_id} provider={} error={e}",
                            p.provider
                        );
                        unreachable.push(p.provider.clone());
                    }
                }
            }
            if unreachable.is_empty() {
                for p in &participants {
                    let block = request.first.row_block(p.range)?;
                    let msg = Message::new(
                        job_id,
                        COORDINATOR_SENDER,
                        Body::SubRequest {
                            workload: request.workload.clone(),
                            range: p.range,
                            first_rows: request.first.rows() as u64,
                            client: request.reply.clone(),
                            block,
                        },
                    );
                    outbox.deliver(&p.provider, msg).map_err(|e| Error::JobFailed {
                        job_id,
                        detail: format!("sending to {}: {e}", p.provider),
                    })?;
                }
                return Ok(());
            }
            if attempt == 1 {
                break;
            }
            excluded.extend(unreachable);
            record = coordinator
                .plan_job_excluding(request, record.dispatched_at, &excluded)
                .map_err(|e| Error::JobFailed {
                    job_id,
                    detail: format!("replanning without unreachable providers: {e}"),
                })?;
        }
        Err(Error::JobFailed {
            job_id,
            detail: "providers unreachable after replanning".into(),
        })
    })();

    match result {
        Ok(()) => {
            outbox.reply(record.accepted_message())?;
            Ok(DispatchOutcome { record, round_trips })
        }
        Err(e) => {
            let _ = outbox.reply(Message::error(job_id, COORDINATOR_SENDER, &e));
            Err(e)
        }
    }
}

/// Seconds as a `Duration`, saturating on nonsense input.
pub(crate) fn secs(s: f64) -> Duration {
    Duration::try_from_secs_f64(s.max(0.0)).unwrap_or(Duration::MAX)
}

#[cfg(test)]
mod tests;
