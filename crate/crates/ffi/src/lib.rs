//! C ABI over the volfn estimators.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free`. Every fallible call returns a status code; on failure
//! `volfn_last_error` describes what went wrong on the calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use volfn::estimate::{estimate, EstimatorConfig};
use volfn::functional::{builtin, FunctionalParams};
use volfn::grid::LogPriceGrid;
use volfn::kernel::{constants, KernelProfile};
use volfn::linalg::Mat;
use volfn::preavg::{ThresholdScale, TruncationMode, TruncationSpec};
use volfn::spot::TuningPlan;
use volfn::Error;

pub const VOLFN_OK: i32 = 0;
/// Null pointer or malformed argument.
pub const VOLFN_ERR_ARGUMENT: i32 = 1;
/// Configuration, tuning or shape problem.
pub const VOLFN_ERR_CONFIG: i32 = 2;
/// Bad or insufficient data.
pub const VOLFN_ERR_DATA: i32 = 3;
/// Domain, degeneracy or numerical failure.
pub const VOLFN_ERR_NUMERIC: i32 = 4;
/// A Rust panic was caught at the boundary.
pub const VOLFN_ERR_PANIC: i32 = 5;

pub const VOLFN_TRUNC_OFF: i32 = 0;
pub const VOLFN_TRUNC_GLOBAL_NORM: i32 = 1;
pub const VOLFN_TRUNC_ELEMENTWISE: i32 = 2;

/// Opaque n×d log-price panel.
pub struct VolfnGrid(LogPriceGrid);

/// Opaque estimator configuration.
pub struct VolfnConfig(EstimatorConfig);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VolfnKernelConstants {
    pub phi0_at_0: f64,
    pub phi1_at_0: f64,
    pub phi00: f64,
    pub phi01: f64,
    pub phi11: f64,
    pub psi00: f64,
    pub psi01: f64,
    pub psi11: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (i32, String)>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VOLFN_OK,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            VOLFN_ERR_PANIC
        }
    }
}

fn lib_err(e: Error) -> (i32, String) {
    (e.exit_code(), e.to_string())
}

fn arg_err(msg: &str) -> (i32, String) {
    (VOLFN_ERR_ARGUMENT, msg.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (i32, String)> {
    if p.is_null() {
        return Err(arg_err(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| arg_err(&format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn volfn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn volfn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build a grid from `n_rows` × `d` row-major log-prices.
#[no_mangle]
pub unsafe extern "C" fn volfn_grid_new(
    data: *const f64,
    n_rows: usize,
    d: usize,
    delta_n: f64,
    out: *mut *mut VolfnGrid,
) -> i32 {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err(arg_err("data and out must be non-null"));
        }
        let len = n_rows.checked_mul(d).ok_or_else(|| arg_err("n_rows * d overflows"))?;
        let slice = std::slice::from_raw_parts(data, len);
        let g = LogPriceGrid::with_default_labels(Mat::from_row_slice(n_rows, d, slice), delta_n).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(VolfnGrid(g)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn volfn_grid_free(g: *mut VolfnGrid) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

fn default_truncation() -> TruncationSpec {
    TruncationSpec::new(TruncationMode::Elementwise, 1.5, 0.47, ThresholdScale::Volatility)
}

fn new_config(plan: TuningPlan, out: *mut *mut VolfnConfig) -> Result<(), (i32, String)> {
    if out.is_null() {
        return Err(arg_err("out is null"));
    }
    let cfg = EstimatorConfig::new(plan, default_truncation()).with_cached_constants().map_err(lib_err)?;
    unsafe { *out = Box::into_raw(Box::new(VolfnConfig(cfg))) };
    Ok(())
}

/// Rate-optimal (hat) estimator with the given tuning constants.
#[no_mangle]
pub unsafe extern "C" fn volfn_config_new_hat(
    theta: f64,
    varrho: f64,
    kappa: f64,
    rho: f64,
    out: *mut *mut VolfnConfig,
) -> i32 {
    guard(|| new_config(TuningPlan::rate_optimal(theta, varrho, kappa, rho), out))
}

/// Positive semidefinite (tilde) estimator with the given tuning constants.
#[no_mangle]
pub unsafe extern "C" fn volfn_config_new_psd(
    theta: f64,
    varrho: f64,
    kappa: f64,
    rho: f64,
    delta: f64,
    out: *mut *mut VolfnConfig,
) -> i32 {
    guard(|| new_config(TuningPlan::psd(theta, varrho, kappa, rho, delta), out))
}

/// Set the jump-truncation rule. `mode` is one of the VOLFN_TRUNC_* values.
#[no_mangle]
pub unsafe extern "C" fn volfn_config_set_truncation(
    cfg: *mut VolfnConfig,
    mode: i32,
    alpha_mult: f64,
    rho: f64,
) -> i32 {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| arg_err("config is null"))?;
        let mode = match mode {
            VOLFN_TRUNC_OFF => TruncationMode::Off,
            VOLFN_TRUNC_GLOBAL_NORM => TruncationMode::GlobalNorm,
            VOLFN_TRUNC_ELEMENTWISE => TruncationMode::Elementwise,
            m => return Err((VOLFN_ERR_CONFIG, format!("unknown truncation mode {m}"))),
        };
        cfg.0.truncation = TruncationSpec::new(mode, alpha_mult, rho, ThresholdScale::Volatility);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn volfn_config_set_ci_level(cfg: *mut VolfnConfig, level: f64) -> i32 {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| arg_err("config is null"))?;
        if !(level > 0.0 && level < 1.0) {
            return Err((VOLFN_ERR_CONFIG, format!("CI level {level} must lie in (0, 1)")));
        }
        cfg.0.ci_level = level;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn volfn_config_free(cfg: *mut VolfnConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

unsafe fn run_estimate(
    grid: *const VolfnGrid,
    cfg: *const VolfnConfig,
    name: *const c_char,
    params_json: *const c_char,
) -> Result<volfn::estimate::FunctionalEstimate, (i32, String)> {
    let grid = grid.as_ref().ok_or_else(|| arg_err("grid is null"))?;
    let cfg = cfg.as_ref().ok_or_else(|| arg_err("config is null"))?;
    let name = str_arg(name, "functional name")?;
    let params: FunctionalParams = if params_json.is_null() {
        FunctionalParams::default()
    } else {
        serde_json::from_str(str_arg(params_json, "params")?)
            .map_err(|e| (VOLFN_ERR_CONFIG, format!("functional params: {e}")))?
    };
    let g = builtin(name, &params).map_err(lib_err)?;
    estimate(&grid.0, g.as_ref(), &cfg.0).map_err(lib_err)
}

/// Estimate a functional and return the full result as a JSON string in
/// `out_json` (free with `volfn_string_free`). `params_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn volfn_estimate_json(
    grid: *const VolfnGrid,
    cfg: *const VolfnConfig,
    name: *const c_char,
    params_json: *const c_char,
    out_json: *mut *mut c_char,
) -> i32 {
    guard(|| {
        if out_json.is_null() {
            return Err(arg_err("out_json is null"));
        }
        let est = run_estimate(grid, cfg, name, params_json)?;
        let s = serde_json::to_string(&est).map_err(|e| (VOLFN_ERR_NUMERIC, e.to_string()))?;
        *out_json = CString::new(s).map_err(|e| (VOLFN_ERR_NUMERIC, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Estimate a scalar-valued functional; writes the bias-corrected value and
/// its standard error.
#[no_mangle]
pub unsafe extern "C" fn volfn_estimate_scalar(
    grid: *const VolfnGrid,
    cfg: *const VolfnConfig,
    name: *const c_char,
    params_json: *const c_char,
    value: *mut f64,
    std_error: *mut f64,
) -> i32 {
    guard(|| {
        if value.is_null() || std_error.is_null() {
            return Err(arg_err("value and std_error must be non-null"));
        }
        let est = run_estimate(grid, cfg, name, params_json)?;
        if est.value.len() != 1 {
            return Err((VOLFN_ERR_CONFIG, format!("functional has {} components; use volfn_estimate_json", est.value.len())));
        }
        *value = est.value[0];
        *std_error = est.std_errors().map_err(lib_err)?[0];
        Ok(())
    })
}

/// Constants of the built-in kernel `name` ("minmax", ...).
#[no_mangle]
pub unsafe extern "C" fn volfn_kernel_constants(name: *const c_char, out: *mut VolfnKernelConstants) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(arg_err("out is null"));
        }
        let k = KernelProfile::by_name(str_arg(name, "kernel name")?).map_err(lib_err)?;
        let kc = constants(&k, 1000).map_err(lib_err)?;
        *out = VolfnKernelConstants {
            phi0_at_0: kc.phi0_at_0,
            phi1_at_0: kc.phi1_at_0,
            phi00: kc.phi00,
            phi01: kc.phi01,
            phi11: kc.phi11,
            psi00: kc.psi00,
            psi01: kc.psi01,
            psi11: kc.psi11,
        };
        Ok(())
    })
}
