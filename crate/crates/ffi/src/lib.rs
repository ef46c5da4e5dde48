//! C ABI over `tjap-core`.
//!
//! Every fallible function returns a [`TjapStatus`]. On failure the message
//! is kept per thread and can be read with `tjap_last_error_message`.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tjap_core::environment::{
    build_policy, generate_scenario, run_policy, MarketScenario, PolicySettings, ScenarioConfig,
};
use tjap_core::harness::{run_experiment, RunConfig};
use tjap_core::mnl::{choice_probabilities, price_cap};
use tjap_core::policy::{AlgorithmKind, Policy};
use tjap_core::pricing::{optimal_assortment_and_prices, LinearUtility, PriceGrid, UtilityCurve};
use tjap_core::TjapError;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TjapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Convergence = 3,
    Sequencing = 4,
    Refused = 5,
    Generation = 6,
    Config = 7,
    Io = 8,
    Verification = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A generated market instance.
pub struct TjapScenario {
    inner: MarketScenario,
}

/// A learning policy bound to the scenario it was built for.
pub struct TjapPolicy {
    inner: Box<dyn Policy>,
    settings: PolicySettings,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: TjapStatus,
    message: String,
}

impl Failure {
    fn new(status: TjapStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

fn status_of(e: &TjapError) -> TjapStatus {
    match e {
        TjapError::Domain(_) => TjapStatus::InvalidArgument,
        TjapError::Convergence { .. } => TjapStatus::Convergence,
        TjapError::Sequencing(_) => TjapStatus::Sequencing,
        TjapError::Refused(_) => TjapStatus::Refused,
        TjapError::Generation(_) => TjapStatus::Generation,
        TjapError::Config(_) | TjapError::Json(_) => TjapStatus::Config,
        TjapError::Episode { source, .. } | TjapError::Round { source, .. } => status_of(source),
        TjapError::Verification(_) => TjapStatus::Verification,
        TjapError::Io(_) => TjapStatus::Io,
    }
}

impl From<TjapError> for Failure {
    fn from(e: TjapError) -> Self {
        Failure::new(status_of(&e), e.to_string())
    }
}

fn set_last_error(message: Option<String>) {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = message.map(|m| CString::new(m.replace('\0', " ")).expect("no interior NUL"));
    });
}

/// Runs `body`, turning errors and panics into a status plus a stored message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> TjapStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error(None);
            TjapStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(Some(f.message));
            f.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(Some(format!("internal panic: {msg}")));
            TjapStatus::Panic
        }
    }
}

fn non_null<T>(ptr: *const T, name: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        Err(Failure::new(TjapStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn opt_str<'a>(ptr: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if ptr.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Some)
        .map_err(|_| Failure::new(TjapStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

/// # Safety
/// `ptr` must point to a NUL-terminated string.
unsafe fn req_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(ptr, name)?;
    Ok(opt_str(ptr, name)?.expect("checked non-null"))
}

/// # Safety
/// `ptr` must be valid for `len` reads when `len > 0`.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(ptr, name)?;
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be valid for `len` writes when `len > 0`.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(ptr, name)?;
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn config_error(e: serde_json::Error) -> Failure {
    Failure::new(TjapStatus::Config, e.to_string())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tjap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes needed for the last error message including its terminator, or 0
/// when the last call on this thread succeeded.
#[no_mangle]
pub extern "C" fn tjap_last_error_length() -> usize {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(0, |m| m.as_bytes_with_nul().len()))
}

/// Copies the last error message of this thread into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn tjap_last_error_message(buf: *mut c_char, len: usize) -> TjapStatus {
    if buf.is_null() {
        return TjapStatus::NullPointer;
    }
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let bytes = slot.as_ref().map_or(&b"\0"[..], |m| m.as_bytes_with_nul());
        if bytes.len() > len {
            return TjapStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
        TjapStatus::Ok
    })
}

/// Generates a scenario from a JSON scenario config (null for defaults).
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tjap_scenario_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut TjapScenario,
) -> TjapStatus {
    guard(|| {
        non_null(out, "out")?;
        let config: ScenarioConfig = match opt_str(config_json, "config_json")? {
            Some(text) => serde_json::from_str(text).map_err(config_error)?,
            None => ScenarioConfig::default(),
        };
        let inner = generate_scenario(&config, seed)?;
        *out = Box::into_raw(Box::new(TjapScenario { inner }));
        Ok(())
    })
}

/// Releases a scenario; null is ignored.
///
/// # Safety
/// `scenario` must come from `tjap_scenario_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tjap_scenario_free(scenario: *mut TjapScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Price cap of the scenario.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tjap_scenario_price_cap(scenario: *const TjapScenario, out: *mut f64) -> TjapStatus {
    guard(|| {
        non_null(scenario, "scenario")?;
        non_null(out, "out")?;
        *out = (*scenario).inner.p_max;
        Ok(())
    })
}

/// Feature dimension, catalog size, capacity and number of source markets.
///
/// # Safety
/// `scenario` must be valid; each output may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn tjap_scenario_dimensions(
    scenario: *const TjapScenario,
    d: *mut usize,
    n_items: *mut usize,
    capacity: *mut usize,
    sources: *mut usize,
) -> TjapStatus {
    guard(|| {
        non_null(scenario, "scenario")?;
        let cfg = &(*scenario).inner.config;
        for (ptr, v) in [
            (d, cfg.d),
            (n_items, cfg.n_items),
            (capacity, cfg.capacity),
            (sources, cfg.sources),
        ] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}

/// Builds a registered algorithm (`tjap`, `pool`, `target_only`,
/// `topk_pricing`, `clairvoyant`) for `scenario`. `settings_json` holds
/// policy settings; null means defaults.
///
/// # Safety
/// `scenario` and `out` must be valid; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn tjap_policy_new(
    scenario: *const TjapScenario,
    algorithm: *const c_char,
    settings_json: *const c_char,
    seed: u64,
    out: *mut *mut TjapPolicy,
) -> TjapStatus {
    guard(|| {
        non_null(scenario, "scenario")?;
        non_null(out, "out")?;
        let name = req_str(algorithm, "algorithm")?;
        let kind = AlgorithmKind::parse(name).ok_or_else(|| {
            Failure::new(TjapStatus::InvalidArgument, format!("unknown algorithm {name:?}"))
        })?;
        let settings: PolicySettings = match opt_str(settings_json, "settings_json")? {
            Some(text) => serde_json::from_str(text).map_err(config_error)?,
            None => PolicySettings::default(),
        };
        settings.estimation.validate()?;
        settings.gate.validate()?;
        let inner = build_policy(kind, &(*scenario).inner, &settings, seed)?;
        *out = Box::into_raw(Box::new(TjapPolicy { inner, settings }));
        Ok(())
    })
}

/// Releases a policy; null is ignored.
///
/// # Safety
/// `policy` must come from `tjap_policy_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tjap_policy_free(policy: *mut TjapPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Simulates `horizon` rounds and writes the cumulative regret of every
/// round to `cum_regret`. `forced`, if not null, receives one 0/1 flag per
/// round. A policy can be run once.
///
/// # Safety
/// Handles must be valid; output arrays must hold `horizon` elements.
#[no_mangle]
pub unsafe extern "C" fn tjap_run(
    scenario: *const TjapScenario,
    policy: *mut TjapPolicy,
    horizon: usize,
    cum_regret: *mut f64,
    forced: *mut u8,
) -> TjapStatus {
    guard(|| {
        non_null(scenario, "scenario")?;
        non_null(policy, "policy")?;
        let regret_out = slice_mut(cum_regret, horizon, "cum_regret")?;
        let policy = &mut *policy;
        let records = run_policy(
            &(*scenario).inner,
            policy.inner.as_mut(),
            horizon,
            &policy.settings,
        )?;
        for (slot, r) in regret_out.iter_mut().zip(&records) {
            *slot = r.cum_regret;
        }
        if !forced.is_null() {
            let flags = slice_mut(forced, horizon, "forced")?;
            for (slot, r) in flags.iter_mut().zip(&records) {
                *slot = u8::from(r.forced);
            }
        }
        Ok(())
    })
}

/// Optimal assortment and prices for linear utilities
/// `intercepts[i] - slopes[i] * p` on a grid over `[0, p_max]`.
/// `items` and `prices` must hold `min(capacity, n)` entries; `len`
/// receives the number actually written.
///
/// # Safety
/// Input arrays must hold `n` elements; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tjap_optimal_assortment(
    intercepts: *const f64,
    slopes: *const f64,
    n: usize,
    capacity: usize,
    p_max: f64,
    grid_points: usize,
    items: *mut usize,
    prices: *mut f64,
    len: *mut usize,
    value: *mut f64,
) -> TjapStatus {
    guard(|| {
        let a = slice(intercepts, n, "intercepts")?;
        let b = slice(slopes, n, "slopes")?;
        non_null(len, "len")?;
        non_null(value, "value")?;
        let room = capacity.min(n);
        let items_out = slice_mut(items, room, "items")?;
        let prices_out = slice_mut(prices, room, "prices")?;
        let curves: Vec<LinearUtility> = a.iter().zip(b).map(|(&a, &b)| LinearUtility::new(a, b)).collect();
        let dyn_curves: Vec<&dyn UtilityCurve> = curves.iter().map(|c| c as &dyn UtilityCurve).collect();
        let grid = PriceGrid::new(p_max, grid_points)?;
        let best = optimal_assortment_and_prices(&dyn_curves, capacity, &grid)?;
        items_out[..best.items.len()].copy_from_slice(&best.items);
        prices_out[..best.prices.len()].copy_from_slice(&best.prices);
        *len = best.items.len();
        *value = best.value;
        Ok(())
    })
}

/// Choice probabilities with the outside option first; `out` holds `n + 1`
/// entries.
///
/// # Safety
/// `utilities` must hold `n` elements and `out` `n + 1`.
#[no_mangle]
pub unsafe extern "C" fn tjap_choice_probabilities(
    utilities: *const f64,
    n: usize,
    out: *mut f64,
) -> TjapStatus {
    guard(|| {
        let u = slice(utilities, n, "utilities")?;
        let dst = slice_mut(out, n + 1, "out")?;
        dst.copy_from_slice(&choice_probabilities(u));
        Ok(())
    })
}

/// Upper bound on optimal prices given the largest zero-price utility, the
/// capacity and the sensitivity floor.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn tjap_price_cap(
    max_utility: f64,
    capacity: usize,
    l0: f64,
    out: *mut f64,
) -> TjapStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = price_cap(max_utility, capacity, l0)?;
        Ok(())
    })
}

/// Runs an experiment config (JSON text) into `out_dir` on `threads`
/// workers. `failed_cells`, if not null, receives the number of failed
/// cells; the call still returns `TJAP_STATUS_OK` when some cells failed.
///
/// # Safety
/// Strings must be NUL-terminated; `failed_cells` may be null.
#[no_mangle]
pub unsafe extern "C" fn tjap_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    threads: usize,
    failed_cells: *mut usize,
) -> TjapStatus {
    guard(|| {
        let config = RunConfig::from_json(req_str(config_json, "config_json")?)?;
        let dir = req_str(out_dir, "out_dir")?;
        if threads == 0 {
            return Err(Failure::new(
                TjapStatus::InvalidArgument,
                "threads must be at least 1",
            ));
        }
        let manifest = run_experiment(&config, Path::new(dir), threads, None)?;
        if !failed_cells.is_null() {
            *failed_cells = manifest.failed_cells();
        }
        Ok(())
    })
}
