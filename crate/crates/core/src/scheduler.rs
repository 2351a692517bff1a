//! Turns heartbeat history into homogenized performance numbers and total
//! loads into integer scope lengths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf_model::PerformanceValue;

/// Samples older than this many half-lives carry no weight.
pub const HALF_LIFE_CUTOFF: f64 = 64.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProviderId(String);

impl ProviderId {
    pub fn new(id: impl Into<String>) -> Self {
        ProviderId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ProviderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ProviderId {
    fn from(s: &str) -> Self {
        ProviderId(s.to_owned())
    }
}

impl From<String> for ProviderId {
    fn from(s: String) -> Self {
        ProviderId(s)
    }
}

/// One heartbeat as seen by the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceSample {
    pub provider: ProviderId,
    /// Monotonic seconds on the coordinator's clock.
    pub reported_at: f64,
    pub raw_speed: PerformanceValue,
    /// Fraction of the last interval spent busy, in `[0, 1]`.
    pub load_factor: f64,
}

impl PerformanceSample {
    pub fn new(provider: ProviderId, reported_at: f64, raw_speed: f64, load_factor: f64) -> Result<Self> {
        let raw_speed = PerformanceValue::new(raw_speed)?;
        if !(0.0..=1.0).contains(&load_factor) {
            return Err(Error::InvalidSample(format!(
                "load factor {load_factor} outside [0, 1]"
            )));
        }
        if !reported_at.is_finite() {
            return Err(Error::InvalidSample(format!("timestamp {reported_at}")));
        }
        Ok(PerformanceSample {
            provider,
            reported_at,
            raw_speed,
            load_factor,
        })
    }

    pub fn effective_speed(&self) -> f64 {
        self.raw_speed.get() * (1.0 - self.load_factor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomogenizedPerformance {
    pub provider: ProviderId,
    pub value: PerformanceValue,
    pub computed_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EwmaParams {
    pub half_life: f64,
    pub epsilon_floor: f64,
}

impl Default for EwmaParams {
    fn default() -> Self {
        EwmaParams {
            half_life: 30.0,
            epsilon_floor: 1e-6,
        }
    }
}

/// Exponentially weighted mean of effective speed, weights halving every
/// `half_life` seconds of sample age. Not clamped.
///
/// When every sample is past the cutoff the newest one is used on its own.
pub fn weighted_effective_speed(history: &[PerformanceSample], now: f64, half_life: f64) -> Result<f64> {
    let newest = history.last().ok_or(Error::NoSamples)?;
    if !(half_life.is_finite() && half_life > 0.0) {
        return Err(Error::InvalidArgument(format!("half-life {half_life}")));
    }
    if history.windows(2).any(|w| w[1].reported_at < w[0].reported_at) {
        return Err(Error::InvalidSample("timestamps must be non-decreasing".into()));
    }
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    for sample in history {
        let age = (now - sample.reported_at).max(0.0) / half_life;
        if age > HALF_LIFE_CUTOFF {
            continue;
        }
        let w = 0.5f64.powf(age);
        weighted += w * sample.effective_speed();
        total_weight += w;
    }
    if total_weight == 0.0 {
        return Ok(newest.effective_speed());
    }
    Ok(weighted / total_weight)
}

/// The homogenized performance of one provider, clamped below by
/// `params.epsilon_floor`.
pub fn homogenize_performance(
    history: &[PerformanceSample],
    now: f64,
    params: &EwmaParams,
) -> Result<HomogenizedPerformance> {
    let value = weighted_effective_speed(history, now, params.half_life)?;
    let provider = history[0].provider.clone();
    Ok(HomogenizedPerformance {
        provider,
        value: PerformanceValue::new(value.max(params.epsilon_floor))?,
        computed_at: now,
    })
}

/// Integer allotments ("scope lengths") for one job, in dispatch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopePlan {
    total_load: u64,
    allotments: Vec<(ProviderId, u64)>,
}

impl ScopePlan {
    /// Builds a plan from explicit allotments; they must sum to `total_load`
    /// and name each provider once.
    pub fn from_allotments(total_load: u64, allotments: Vec<(ProviderId, u64)>) -> Result<Self> {
        let sum: u64 = allotments.iter().map(|(_, a)| a).sum();
        if sum != total_load {
            return Err(Error::PlanMismatch(format!(
                "allotments sum to {sum}, expected {total_load}"
            )));
        }
        let ids: BTreeSet<_> = allotments.iter().map(|(id, _)| id).collect();
        if ids.len() != allotments.len() {
            return Err(Error::PlanMismatch("duplicate provider in plan".into()));
        }
        Ok(ScopePlan { total_load, allotments })
    }

    pub fn total_load(&self) -> u64 {
        self.total_load
    }

    pub fn allotments(&self) -> &[(ProviderId, u64)] {
        &self.allotments
    }

    pub fn allotment(&self, id: &ProviderId) -> Option<u64> {
        self.allotments.iter().find(|(p, _)| p == id).map(|(_, a)| *a)
    }

    pub fn providers(&self) -> impl Iterator<Item = &ProviderId> {
        self.allotments.iter().map(|(p, _)| p)
    }

    pub fn len(&self) -> usize {
        self.allotments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allotments.is_empty()
    }
}

fn check_performances(performances: &BTreeMap<ProviderId, f64>) -> Result<f64> {
    if performances.is_empty() {
        return Err(Error::EmptyProviderSet);
    }
    let mut total = 0.0;
    for &p in performances.values() {
        total += PerformanceValue::new(p)?.get();
    }
    Ok(total)
}

/// Largest-remainder apportionment of `total_load` in proportion to the
/// given performances.
///
/// Every provider first receives the floor of its fair share
/// `total_load * P_i / P_T`; the leftover units go to the largest fractional
/// remainders. Ties are broken by descending performance, then ascending
/// provider id. The plan lists providers in ascending id order.
pub fn compute_scope_lengths(total_load: u64, performances: &BTreeMap<ProviderId, f64>) -> Result<ScopePlan> {
    let total_perf = check_performances(performances)?;
    let load = total_load as f64;

    struct Share<'a> {
        id: &'a ProviderId,
        perf: f64,
        floor: u64,
        remainder: f64,
    }

    let mut shares: Vec<Share<'_>> = performances
        .iter()
        .map(|(id, &perf)| {
            let fair = load * (perf / total_perf);
            let floor = (fair.floor().max(0.0) as u64).min(total_load);
            Share {
                id,
                perf,
                floor,
                remainder: fair - floor as f64,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&shares[a], &shares[b]);
        sb.remainder
            .total_cmp(&sa.remainder)
            .then(sb.perf.total_cmp(&sa.perf))
            .then(sa.id.cmp(sb.id))
    });

    let assigned: u64 = shares.iter().map(|s| s.floor).sum();
    if assigned <= total_load {
        let leftover = (total_load - assigned) as usize;
        // leftover < provider count except under pathological float error
        for &i in order.iter().cycle().take(leftover) {
            shares[i].floor += 1;
        }
    } else {
        let mut excess = assigned - total_load;
        for &i in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if shares[i].floor > 0 {
                shares[i].floor -= 1;
                excess -= 1;
            }
        }
    }

    ScopePlan::from_allotments(total_load, shares.iter().map(|s| (s.id.clone(), s.floor)).collect())
}

/// The non-homogenized baseline: equal allotments, earlier providers absorb
/// the remainder.
pub fn equal_scope_lengths(total_load: u64, providers: &[ProviderId]) -> Result<ScopePlan> {
    if providers.is_empty() {
        return Err(Error::EmptyProviderSet);
    }
    let n = providers.len() as u64;
    let base = total_load / n;
    let extra = total_load % n;
    ScopePlan::from_allotments(
        total_load,
        providers
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), base + u64::from((i as u64) < extra)))
            .collect(),
    )
}

/// Pure compute time `allotment / P_i` per provider.
pub fn predicted_finish_times(
    plan: &ScopePlan,
    performances: &BTreeMap<ProviderId, f64>,
) -> Result<BTreeMap<ProviderId, f64>> {
    check_performances(performances)?;
    let planned: BTreeSet<_> = plan.providers().collect();
    let known: BTreeSet<_> = performances.keys().collect();
    if planned != known {
        return Err(Error::PlanMismatch(
            "plan and performance map cover different providers".into(),
        ));
    }
    Ok(plan
        .allotments()
        .iter()
        .map(|(id, a)| (id.clone(), *a as f64 / performances[id]))
        .collect())
}
