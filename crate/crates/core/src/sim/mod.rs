//! Virtual-clock simulator for equal-split versus homogenized runs.
//!
//! Work model: an `L`-row square product costs `L³` units and a speed `P` is
//! rows per time unit at the reference size `L_ref`, so `r` rows of an
//! `L`-row job take `r·L²/(P·L_ref²)`. The standalone machine takes
//! `L³/(P_S·L_ref²)`. Overhead `M·L` is charged once on the critical path.

mod report;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::perf_model::{predicted_speedup, virtual_machine_count, OverheadModel, PerformanceValue, SpeedupModel};
use crate::scheduler::{compute_scope_lengths, equal_scope_lengths, ProviderId, ScopePlan};
use crate::transport::Policy;

pub use report::{
    compare_live, fmt_g9, read_measurements, write_comparisons, write_measurements, Comparison, RunMeasurement,
    CSV_HEADER,
};

pub const DEFAULT_REFERENCE_ROWS: f64 = 800.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub speeds: Vec<f64>,
    pub standalone_speed: f64,
    /// `M`, time units per row.
    pub overhead_slope: f64,
    /// Fixed delay added to every provider that gets work.
    pub latency: f64,
    pub loads: Vec<u64>,
    pub policies: Vec<Policy>,
    /// Jitter amplitude `a`: each provider runs at `speed·u`, `u ~ U[1−a, 1+a]`.
    pub noise: f64,
    pub seed: u64,
    pub reference_rows: f64,
}

impl SimScenario {
    pub const KEYS: &'static [&'static str] = &[
        "speeds",
        "standalone_speed",
        "overhead_slope",
        "latency",
        "loads",
        "policies",
        "noise",
        "seed",
        "reference_rows",
    ];

    /// A scenario with both policies, no latency and no noise.
    pub fn new(speeds: Vec<f64>, standalone_speed: f64, overhead_slope: f64, loads: Vec<u64>) -> Self {
        SimScenario {
            speeds,
            standalone_speed,
            overhead_slope,
            latency: 0.0,
            loads,
            policies: vec![Policy::Homogenized, Policy::EqualSplit],
            noise: 0.0,
            seed: 0,
            reference_rows: DEFAULT_REFERENCE_ROWS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.speeds.is_empty() {
            return Err(Error::EmptyProviderSet);
        }
        for &s in &self.speeds {
            PerformanceValue::new(s)?;
        }
        PerformanceValue::new(self.standalone_speed)?;
        OverheadModel::new(self.overhead_slope)?;
        if !(self.latency.is_finite() && self.latency >= 0.0) {
            return Err(Error::InvalidArgument(format!("latency {}", self.latency)));
        }
        if self.loads.is_empty() || self.loads.contains(&0) {
            return Err(Error::InvalidArgument(
                "loads must be a non-empty list of positive row counts".into(),
            ));
        }
        if self.policies.is_empty() {
            return Err(Error::InvalidArgument("no policies".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::InvalidArgument(format!(
                "noise must be in [0, 1), got {}",
                self.noise
            )));
        }
        if !(self.reference_rows.is_finite() && self.reference_rows > 0.0) {
            return Err(Error::InvalidArgument("reference_rows must be positive".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.deny_unknown(Self::KEYS)?;
        let speeds = kv
            .list("speeds")?
            .ok_or_else(|| Error::Config("missing key speeds".into()))?;
        let standalone_speed = kv
            .get("standalone_speed")?
            .ok_or_else(|| Error::Config("missing key standalone_speed".into()))?;
        let loads = kv
            .list("loads")?
            .ok_or_else(|| Error::Config("missing key loads".into()))?;
        let mut s = SimScenario::new(
            speeds,
            standalone_speed,
            kv.get("overhead_slope")?.unwrap_or(0.0),
            loads,
        );
        if let Some(v) = kv.get("latency")? {
            s.latency = v;
        }
        if let Some(v) = kv.list("policies")? {
            s.policies = v;
        }
        if let Some(v) = kv.get("noise")? {
            s.noise = v;
        }
        if let Some(v) = kv.get("seed")? {
            s.seed = v;
        }
        if let Some(v) = kv.get("reference_rows")? {
            s.reference_rows = v;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    /// Time for `rows` rows of an `load`-row job at speed `speed`.
    pub fn row_time(&self, rows: u64, load: u64, speed: f64) -> f64 {
        let l = load as f64;
        rows as f64 * l * l / (speed * self.reference_rows * self.reference_rows)
    }

    pub fn standalone_time(&self, load: u64) -> f64 {
        self.row_time(load, load, self.standalone_speed)
    }

    pub fn overhead(&self, load: u64) -> f64 {
        self.overhead_slope * load as f64
    }

    /// The prediction for the first `n` providers at load `load`.
    pub fn formula(&self, load: u64, n: usize) -> Result<(f64, f64)> {
        let speeds = self
            .speeds
            .get(..n)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::InvalidArgument(format!("scenario has no {n}-provider prefix")))?;
        let n_h = virtual_machine_count(speeds.iter().sum(), self.standalone_speed)?;
        let model = SpeedupModel::new(
            self.standalone_time(load),
            n_h,
            OverheadModel::new(self.overhead_slope)?,
            load as f64,
        )?;
        Ok((n_h, predicted_speedup(&model)))
    }
}

/// Speeds shaped like a small mixed office fleet in which the sixth and
/// ninth machines are much slower than the rest. `P_S` equals the first
/// machine. Time units are abstract.
pub fn paper_replication_scenario() -> SimScenario {
    const UNIT: f64 = 0.0072;
    let relative = [1.0, 0.9, 1.2, 0.8, 1.1, 0.35, 1.0, 0.9, 0.25];
    SimScenario::new(
        relative.iter().map(|r| r * UNIT).collect(),
        UNIT,
        20.0,
        vec![200, 400, 600, 800, 1000],
    )
}

/// Stable provider names that sort in speed-list order.
pub fn provider_ids(n: usize) -> Vec<ProviderId> {
    let width = n.to_string().len();
    (1..=n).map(|i| ProviderId::new(format!("p{i:0width$}"))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderRun {
    pub provider: ProviderId,
    pub rows: u64,
    /// Speed after jitter.
    pub speed: f64,
    /// Compute time including latency; 0 for an empty allotment.
    pub compute: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub run_id: u64,
    pub policy: Policy,
    pub load_rows: u64,
    pub n_providers: usize,
    pub n_h: f64,
    pub t_standalone: f64,
    pub t_total: f64,
    pub t_compute_max: f64,
    pub t_overhead: f64,
    pub speedup_measured: f64,
    pub speedup_formula: f64,
    pub plan: ScopePlan,
    pub providers: Vec<ProviderRun>,
}

impl SimRun {
    /// Finish time of the earliest provider that had work.
    pub fn compute_min_positive(&self) -> f64 {
        self.providers
            .iter()
            .filter(|p| p.rows > 0)
            .map(|p| p.compute)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn measurement(&self) -> RunMeasurement {
        RunMeasurement {
            run_id: self.run_id,
            policy: self.policy.as_str().to_owned(),
            load_rows: self.load_rows,
            n_providers: self.n_providers,
            n_h: self.n_h,
            t_standalone_s: self.t_standalone,
            t_total_s: self.t_total,
            t_compute_max_s: self.t_compute_max,
            t_overhead_s: self.t_overhead,
            speedup_measured: self.speedup_measured,
            speedup_formula: self.speedup_formula,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub runs: Vec<SimRun>,
}

impl SimOutcome {
    pub fn find(&self, policy: Policy, load: u64, n: usize) -> Option<&SimRun> {
        self.runs
            .iter()
            .find(|r| r.policy == policy && r.load_rows == load && r.n_providers == n)
    }

    pub fn measurements(&self) -> Vec<RunMeasurement> {
        self.runs.iter().map(SimRun::measurement).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        write_measurements(&self.measurements(), true)
    }

    /// One line per provider per run.
    pub fn to_detail_csv(&self) -> Result<String> {
        let mut w = report::csv_writer();
        w.write_record([
            "run_id",
            "policy",
            "load_rows",
            "n_providers",
            "provider",
            "rows",
            "speed",
            "t_compute_s",
        ])?;
        for run in &self.runs {
            for p in &run.providers {
                w.write_record([
                    run.run_id.to_string(),
                    run.policy.as_str().to_owned(),
                    run.load_rows.to_string(),
                    run.n_providers.to_string(),
                    p.provider.to_string(),
                    p.rows.to_string(),
                    fmt_g9(p.speed),
                    fmt_g9(p.compute),
                ])?;
            }
        }
        report::finish(w)
    }
}

/// Runs one (policy, load, provider prefix) cell with the given jitter
/// factors.
pub fn run_cell(scenario: &SimScenario, policy: Policy, load: u64, n: usize, jitter: &[f64]) -> Result<SimRun> {
    let ids = provider_ids(scenario.speeds.len());
    let ids = &ids[..n];
    let nominal: BTreeMap<ProviderId, f64> = ids.iter().cloned().zip(scenario.speeds[..n].iter().copied()).collect();
    let plan = match policy {
        Policy::Homogenized => compute_scope_lengths(load, &nominal)?,
        Policy::EqualSplit => equal_scope_lengths(load, ids)?,
    };
    let providers: Vec<ProviderRun> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let rows = plan.allotment(id).unwrap_or(0);
            let speed = scenario.speeds[i] * jitter.get(i).copied().unwrap_or(1.0);
            let compute = if rows == 0 {
                0.0
            } else {
                scenario.row_time(rows, load, speed) + scenario.latency
            };
            ProviderRun {
                provider: id.clone(),
                rows,
                speed,
                compute,
            }
        })
        .collect();
    let t_compute_max = providers.iter().fold(0.0f64, |m, p| m.max(p.compute));
    let t_overhead = scenario.overhead(load);
    let t_total = t_compute_max + t_overhead;
    let t_standalone = scenario.standalone_time(load);
    let (n_h, speedup_formula) = scenario.formula(load, n)?;
    Ok(SimRun {
        run_id: 0,
        policy,
        load_rows: load,
        n_providers: n,
        n_h,
        t_standalone,
        t_total,
        t_compute_max,
        t_overhead,
        speedup_measured: t_standalone / t_total,
        speedup_formula,
        plan,
        providers,
    })
}

/// Every (policy, load, provider prefix) cell in that nesting order, run
/// ids from 1. Jitter draws come from one seeded stream consumed in the
/// same order, so the outcome depends only on the scenario.
pub fn simulate(scenario: &SimScenario) -> Result<SimOutcome> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let a = scenario.noise;
    let mut runs = Vec::new();
    for &policy in &scenario.policies {
        for &load in &scenario.loads {
            for n in 1..=scenario.speeds.len() {
                let jitter: Vec<f64> = if a > 0.0 {
                    (0..n).map(|_| rng.gen_range(1.0 - a..=1.0 + a)).collect()
                } else {
                    Vec::new()
                };
                let mut run = run_cell(scenario, policy, load, n, &jitter)?;
                run.run_id = runs.len() as u64 + 1;
                runs.push(run);
            }
        }
    }
    Ok(SimOutcome { runs })
}

/// The sweep as CSV text with a header row.
pub fn sweep(scenario: &SimScenario) -> Result<String> {
    simulate(scenario)?.to_csv()
}

#[cfg(test)]
mod tests;
