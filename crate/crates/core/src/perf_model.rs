//! Closed-form speedup model for a homogenized cluster.
//!
//! Symbols follow the usual master/worker analysis:
//!
//! * `P_i`: performance of provider `i` (work-units per second),
//! * `P_T = Σ P_i`: total cluster performance,
//! * `P_S`: performance of the standalone reference machine,
//! * `N_H = P_T / P_S`: the cluster expressed in standalone-machine equivalents,
//! * `O(L) = M · L`: distribution overhead, linear in the load `L` (rows),
//! * `T_NH = T / N_H + O(L)` and `S_NH = T / T_NH`.
//!
//! With `M = 0` the speedup collapses to `N_H`.

use crate::error::{Error, Result};

/// A strictly positive, finite performance number in work-units per second.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PerformanceValue(f64);

impl PerformanceValue {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(PerformanceValue(value))
        } else {
            Err(Error::DegeneratePerformance(value))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Overhead slope `M`, in seconds per load-unit (row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadModel {
    slope_m: f64,
}

impl OverheadModel {
    pub fn new(slope_m: f64) -> Result<Self> {
        if slope_m.is_finite() && slope_m >= 0.0 {
            Ok(OverheadModel { slope_m })
        } else {
            Err(Error::InvalidOverhead(slope_m))
        }
    }

    pub fn none() -> Self {
        OverheadModel { slope_m: 0.0 }
    }

    pub fn slope(&self) -> f64 {
        self.slope_m
    }
}

/// The inputs of the speedup prediction: `T`, `N_H`, `M` and `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupModel {
    standalone_time: f64,
    virtual_count: f64,
    overhead: OverheadModel,
    load: f64,
}

impl SpeedupModel {
    pub fn new(standalone_time: f64, virtual_count: f64, overhead: OverheadModel, load: f64) -> Result<Self> {
        if !(standalone_time.is_finite() && standalone_time > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "standalone time must be positive, got {standalone_time}"
            )));
        }
        if !(virtual_count.is_finite() && virtual_count > 0.0) {
            return Err(Error::DegeneratePerformance(virtual_count));
        }
        if !(load.is_finite() && load >= 0.0) {
            return Err(Error::InvalidLoad(load));
        }
        Ok(SpeedupModel {
            standalone_time,
            virtual_count,
            overhead,
            load,
        })
    }

    pub fn standalone_time(&self) -> f64 {
        self.standalone_time
    }

    pub fn virtual_count(&self) -> f64 {
        self.virtual_count
    }

    pub fn overhead_model(&self) -> OverheadModel {
        self.overhead
    }

    pub fn load(&self) -> f64 {
        self.load
    }
}

/// `P_T`: the sum of all provider performances.
pub fn total_performance(values: &[PerformanceValue]) -> Result<PerformanceValue> {
    if values.is_empty() {
        return Err(Error::EmptyProviderSet);
    }
    PerformanceValue::new(values.iter().map(|v| v.0).sum())
}

/// `N_H = P_T / P_S`.
pub fn virtual_machine_count(p_total: f64, p_standalone: f64) -> Result<f64> {
    if !(p_standalone.is_finite() && p_standalone > 0.0) {
        return Err(Error::DegeneratePerformance(p_standalone));
    }
    if !(p_total.is_finite() && p_total > 0.0) {
        return Err(Error::DegeneratePerformance(p_total));
    }
    Ok(p_total / p_standalone)
}

/// `O(L) = M · L`.
pub fn overhead(load: f64, model: &OverheadModel) -> Result<f64> {
    if !(load.is_finite() && load >= 0.0) {
        return Err(Error::InvalidLoad(load));
    }
    Ok(model.slope_m * load)
}

/// `T_NH = T / N_H + O(L)`.
pub fn predicted_time(model: &SpeedupModel) -> f64 {
    model.standalone_time / model.virtual_count + model.overhead.slope_m * model.load
}

/// `S_NH = T / T_NH`.
pub fn predicted_speedup(model: &SpeedupModel) -> f64 {
    model.standalone_time / predicted_time(model)
}
