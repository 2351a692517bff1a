//! C ABI over the homogen scheduler, speedup model, simulator and matrix
//! kernel.
//!
//! Every fallible function returns a [`HomogenStatus`] and writes its result
//! through an out-pointer. On failure, [`homogen_last_error`] describes the
//! most recent error on the calling thread. Handles are opaque and must be
//! released with their matching `_free` function. Strings returned to the
//! caller are freed with [`homogen_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use homogen::matmul::{multiply_reference, Matrix};
use homogen::perf_model::{predicted_speedup, predicted_time, virtual_machine_count, OverheadModel, SpeedupModel};
use homogen::scheduler::{compute_scope_lengths, equal_scope_lengths, ProviderId, ScopePlan};
use homogen::sim::{paper_replication_scenario, simulate, SimScenario};
use homogen::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HomogenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    EmptyProviderSet = 4,
    DegeneratePerformance = 5,
    InvalidLoad = 6,
    InvalidOverhead = 7,
    PlanMismatch = 8,
    DimensionMismatch = 9,
    InvalidMatrix = 10,
    ConfigError = 11,
    OutOfRange = 12,
    Panic = 13,
    Other = 14,
}

impl From<&Error> for HomogenStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::EmptyProviderSet => HomogenStatus::EmptyProviderSet,
            Error::DegeneratePerformance(_) => HomogenStatus::DegeneratePerformance,
            Error::InvalidLoad(_) => HomogenStatus::InvalidLoad,
            Error::InvalidOverhead(_) => HomogenStatus::InvalidOverhead,
            Error::PlanMismatch(_) => HomogenStatus::PlanMismatch,
            Error::DimensionMismatch(_) => HomogenStatus::DimensionMismatch,
            Error::InvalidMatrix(_) => HomogenStatus::InvalidMatrix,
            Error::Config(_) => HomogenStatus::ConfigError,
            Error::InvalidArgument(_) => HomogenStatus::InvalidArgument,
            _ => HomogenStatus::Other,
        }
    }
}

/// Providers and their performance values, keyed by id.
pub struct HomogenPerformanceMap {
    inner: BTreeMap<ProviderId, f64>,
}

/// Integer allotments produced by one of the planners.
pub struct HomogenPlan {
    ids: Vec<CString>,
    allotments: Vec<u64>,
    total_load: u64,
}

/// A simulator scenario.
pub struct HomogenScenario {
    inner: SimScenario,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(HomogenStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(HomogenStatus::from(&e), format!("{}: {e}", e.code()))
    }
}

fn null(what: &str) -> Failure {
    Failure(HomogenStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HomogenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            HomogenStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside homogen");
            HomogenStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(HomogenStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(HomogenStatus::Other, "output contains a NUL byte".into()))
}

/// Description of the last error on this thread, or an empty string. The
/// pointer stays valid until the next homogen call on the same thread.
#[no_mangle]
pub extern "C" fn homogen_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn homogen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn homogen_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Cluster performance in multiples of the standalone machine.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_virtual_machine_count(
    p_total: f64,
    p_standalone: f64,
    out: *mut f64,
) -> HomogenStatus {
    guard(|| write_out(out, virtual_machine_count(p_total, p_standalone)?, "out"))
}

fn speedup_model(standalone_time: f64, n_h: f64, slope: f64, load: f64) -> Result<SpeedupModel, Failure> {
    Ok(SpeedupModel::new(
        standalone_time,
        n_h,
        OverheadModel::new(slope)?,
        load,
    )?)
}

/// Predicted distributed time `T/N_H + M·L`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_predicted_time(
    standalone_time: f64,
    n_h: f64,
    overhead_slope: f64,
    load: f64,
    out: *mut f64,
) -> HomogenStatus {
    guard(|| {
        let m = speedup_model(standalone_time, n_h, overhead_slope, load)?;
        write_out(out, predicted_time(&m), "out")
    })
}

/// Predicted speedup over the standalone machine.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_predicted_speedup(
    standalone_time: f64,
    n_h: f64,
    overhead_slope: f64,
    load: f64,
    out: *mut f64,
) -> HomogenStatus {
    guard(|| {
        let m = speedup_model(standalone_time, n_h, overhead_slope, load)?;
        write_out(out, predicted_speedup(&m), "out")
    })
}

/// A new, empty performance map.
#[no_mangle]
pub extern "C" fn homogen_perf_map_new() -> *mut HomogenPerformanceMap {
    Box::into_raw(Box::new(HomogenPerformanceMap { inner: BTreeMap::new() }))
}

/// Inserts or replaces one provider's performance. Values are checked when
/// a plan is computed.
///
/// # Safety
/// `map` must be a live handle and `id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn homogen_perf_map_set(
    map: *mut HomogenPerformanceMap,
    id: *const c_char,
    performance: f64,
) -> HomogenStatus {
    guard(|| {
        let map = map.as_mut().ok_or_else(|| null("map"))?;
        let id = str_arg(id, "id")?;
        if id.is_empty() {
            return Err(Failure(HomogenStatus::InvalidArgument, "empty provider id".into()));
        }
        map.inner.insert(ProviderId::new(id), performance);
        Ok(())
    })
}

/// Number of providers in the map; 0 for null.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn homogen_perf_map_len(map: *const HomogenPerformanceMap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.len())
}

/// # Safety
/// `map` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn homogen_perf_map_free(map: *mut HomogenPerformanceMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

unsafe fn plan_with(
    map: *const HomogenPerformanceMap,
    out: *mut *mut HomogenPlan,
    f: impl FnOnce(&BTreeMap<ProviderId, f64>) -> homogen::Result<ScopePlan>,
) -> HomogenStatus {
    guard(|| {
        let map = map.as_ref().ok_or_else(|| null("map"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let plan = f(&map.inner)?;
        let ids = plan
            .providers()
            .map(|id| {
                CString::new(id.as_str()).map_err(|_| Failure(HomogenStatus::InvalidArgument, "id contains NUL".into()))
            })
            .collect::<Result<_, _>>()?;
        let handle = HomogenPlan {
            ids,
            allotments: plan.allotments().iter().map(|(_, a)| *a).collect(),
            total_load: plan.total_load(),
        };
        out.write(Box::into_raw(Box::new(handle)));
        Ok(())
    })
}

/// Splits `load` units in proportion to the map's performances.
///
/// # Safety
/// `map` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_compute_scope_lengths(
    map: *const HomogenPerformanceMap,
    load: u64,
    out: *mut *mut HomogenPlan,
) -> HomogenStatus {
    plan_with(map, out, |m| compute_scope_lengths(load, m))
}

/// Splits `load` units evenly over the map's providers in id order,
/// ignoring performance.
///
/// # Safety
/// `map` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_equal_scope_lengths(
    map: *const HomogenPerformanceMap,
    load: u64,
    out: *mut *mut HomogenPlan,
) -> HomogenStatus {
    plan_with(map, out, |m| {
        let ids: Vec<ProviderId> = m.keys().cloned().collect();
        equal_scope_lengths(load, &ids)
    })
}

/// Number of providers in the plan; 0 for null.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn homogen_plan_len(plan: *const HomogenPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.ids.len())
}

/// The load the plan splits; 0 for null.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn homogen_plan_total_load(plan: *const HomogenPlan) -> u64 {
    plan.as_ref().map_or(0, |p| p.total_load)
}

/// Provider id and allotment at `index`. The id pointer is owned by the
/// plan and lives as long as it.
///
/// # Safety
/// `plan` must be a live handle; `id` and `allotment` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_plan_entry(
    plan: *const HomogenPlan,
    index: usize,
    id: *mut *const c_char,
    allotment: *mut u64,
) -> HomogenStatus {
    guard(|| {
        let plan = plan.as_ref().ok_or_else(|| null("plan"))?;
        let name = plan.ids.get(index).ok_or_else(|| {
            Failure(
                HomogenStatus::OutOfRange,
                format!("index {index} of {}", plan.ids.len()),
            )
        })?;
        write_out(id, name.as_ptr(), "id")?;
        write_out(allotment, plan.allotments[index], "allotment")
    })
}

/// # Safety
/// `plan` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn homogen_plan_free(plan: *mut HomogenPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// The bundled nine-provider scenario.
#[no_mangle]
pub extern "C" fn homogen_scenario_replication() -> *mut HomogenScenario {
    Box::into_raw(Box::new(HomogenScenario {
        inner: paper_replication_scenario(),
    }))
}

/// Parses a `key = value` scenario text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_scenario_parse(text: *const c_char, out: *mut *mut HomogenScenario) -> HomogenStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = SimScenario::parse(text)?;
        out.write(Box::into_raw(Box::new(HomogenScenario { inner })));
        Ok(())
    })
}

/// Replaces the scenario's jitter seed.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn homogen_scenario_set_seed(scenario: *mut HomogenScenario, seed: u64) -> HomogenStatus {
    guard(|| {
        scenario.as_mut().ok_or_else(|| null("scenario"))?.inner.seed = seed;
        Ok(())
    })
}

/// Runs the full sweep and returns it as CSV text with a header row.
/// Free the result with [`homogen_string_free`].
///
/// # Safety
/// `scenario` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn homogen_scenario_sweep_csv(
    scenario: *const HomogenScenario,
    out: *mut *mut c_char,
) -> HomogenStatus {
    guard(|| {
        let scenario = scenario.as_ref().ok_or_else(|| null("scenario"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let csv = simulate(&scenario.inner)?.to_csv()?;
        out.write(into_c_string(csv)?);
        Ok(())
    })
}

/// # Safety
/// `scenario` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn homogen_scenario_free(scenario: *mut HomogenScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// `out = a · b` for row-major `a` (`rows x inner`) and `b` (`inner x cols`).
/// `out` must hold `rows * cols` values.
///
/// # Safety
/// The three buffers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn homogen_multiply_reference(
    a: *const f64,
    rows: usize,
    inner: usize,
    b: *const f64,
    cols: usize,
    out: *mut f64,
) -> HomogenStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("matrix buffer"));
        }
        let len = |r: usize, c: usize| {
            r.checked_mul(c)
                .filter(|&n| n > 0)
                .ok_or_else(|| Failure(HomogenStatus::InvalidMatrix, format!("shape {r}x{c}")))
        };
        let (na, nb, nc) = (len(rows, inner)?, len(inner, cols)?, len(rows, cols)?);
        let a = Matrix::new(rows, inner, std::slice::from_raw_parts(a, na).to_vec())?;
        let b = Matrix::new(inner, cols, std::slice::from_raw_parts(b, nb).to_vec())?;
        let c = multiply_reference(&a, &b)?;
        ptr::copy_nonoverlapping(c.data().as_ptr(), out, nc);
        Ok(())
    })
}
