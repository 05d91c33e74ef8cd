//! C ABI for `qlspde`.
//!
//! Every function returns a [`QlStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`ql_last_error`]. Objects are
//! passed as opaque handles created and freed by this library. Panics never
//! cross the boundary; they are reported as [`QlStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qlspde::config::{ExperimentConfig, Resolved};
use qlspde::ldp::{minimize_action, EndpointEvent};
use qlspde::runner::{run, Command, RunError, RunInputs};
use qlspde::solver::{solve_qlpde_report, SpaceTimeField, Verdict};
use qlspde::spde::feynman_kac_verify;
use qlspde::HVector;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The configuration was rejected; the message names the clause.
    ConfigError = 3,
    /// Non-contraction, positivity violation, iteration limit, ...
    NumericalFailure = 4,
    /// The run completed but at least one of its assertions failed.
    AssertionFailed = 5,
    Io = 6,
    Panic = 7,
}

/// Validated experiment configuration.
pub struct QlConfig {
    resolved: Resolved,
}

/// Solution `u(t, x)` of the quasi-linear equation.
pub struct QlField {
    field: SpaceTimeField,
}

/// Monte-Carlo comparison at one point.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QlFkResult {
    pub u_value: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub z_score: f64,
    pub bias_budget: f64,
    pub pass: bool,
}

/// Minimized action for a point endpoint.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct QlActionResult {
    pub value: f64,
    pub endpoint_gap: f64,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(QlStatus, String);

impl From<RunError> for Fail {
    fn from(e: RunError) -> Self {
        let code = match e {
            RunError::Config(_) => QlStatus::ConfigError,
            _ => QlStatus::NumericalFailure,
        };
        Fail(code, e.to_string())
    }
}

impl From<qlspde::Error> for Fail {
    fn from(e: qlspde::Error) -> Self {
        let code = match e {
            qlspde::Error::InvalidArgument(_) | qlspde::Error::DimensionMismatch { .. } => QlStatus::InvalidArgument,
            qlspde::Error::Io(_) => QlStatus::Io,
            _ => QlStatus::NumericalFailure,
        };
        Fail(code, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            QlStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            QlStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(QlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(QlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn read_vec(p: *const f64, n: usize, what: &str) -> Result<Vec<f64>, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n).to_vec())
}

unsafe fn config_ref<'a>(c: *const QlConfig) -> Result<&'a QlConfig, Fail> {
    c.as_ref().ok_or_else(|| null("config"))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ql_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ql_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration (two-mode reference preset).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ql_config_default(out: *mut *mut QlConfig) -> QlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let resolved = ExperimentConfig::default().resolve().map_err(RunError::from)?;
        *out = Box::into_raw(Box::new(QlConfig { resolved }));
        Ok(())
    })
}

/// Parses and validates a TOML configuration. `seed` overrides the master
/// seed when `override_seed` is true.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ql_config_from_toml(
    toml: *const c_char,
    override_seed: bool,
    seed: u64,
    out: *mut *mut QlConfig,
) -> QlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(toml, "toml")?;
        let mut cfg = ExperimentConfig::from_toml(text).map_err(RunError::from)?;
        if override_seed {
            cfg = cfg.with_seed(seed);
        }
        let resolved = cfg.resolve().map_err(RunError::from)?;
        *out = Box::into_raw(Box::new(QlConfig { resolved }));
        Ok(())
    })
}

/// Number of modes of the configured model.
///
/// # Safety
/// `config` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ql_config_n_modes(config: *const QlConfig, out: *mut usize) -> QlStatus {
    guard(|| {
        let c = config_ref(config)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = c.resolved.coeffs.n_modes();
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ql_config_free(config: *mut QlConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs a subcommand (e.g. `"solve-qlpde"`) and writes its artifacts into `out_dir`.
/// Returns `AssertionFailed` when the run finished but an assertion failed.
///
/// # Safety
/// `config` must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ql_run(config: *const QlConfig, command: *const c_char, out_dir: *const c_char) -> QlStatus {
    guard(|| {
        let c = config_ref(config)?;
        let name = read_str(command, "command")?;
        let dir = read_str(out_dir, "out_dir")?;
        let cmd: Command = name.parse().map_err(|e: String| Fail(QlStatus::InvalidArgument, e))?;
        let out = match run(cmd, &c.resolved, &RunInputs::default()) {
            Ok(o) => o,
            Err(e) => {
                let body = serde_json::to_string_pretty(&e.to_json(cmd.name())).unwrap_or_default();
                let _ = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(Path::new(dir).join("error.json"), body));
                return Err(e.into());
            }
        };
        out.write(&c.resolved, Path::new(dir), None)?;
        if !out.pass() {
            let names: Vec<&str> = out.assertions.iter().filter(|a| !a.pass).map(|a| a.name.as_str()).collect();
            return Err(Fail(QlStatus::AssertionFailed, format!("failed assertions: {}", names.join(", "))));
        }
        Ok(())
    })
}

/// Solves the quasi-linear equation with the configured solver parameters.
///
/// # Safety
/// `config` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ql_solve(config: *const QlConfig, out: *mut *mut QlField) -> QlStatus {
    guard(|| {
        let c = config_ref(config)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let o = solve_qlpde_report(&c.resolved.coeffs, &c.resolved.config.solver)?;
        if o.report.verdict != Verdict::Converged {
            return Err(Fail(QlStatus::NumericalFailure, format!("solver verdict {:?}", o.report.verdict)));
        }
        *out = Box::into_raw(Box::new(QlField { field: o.field }));
        Ok(())
    })
}

/// `u(t, x)` with `x` of length `n`.
///
/// # Safety
/// `field` must come from this library; `x` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ql_field_value(field: *const QlField, t: f64, x: *const f64, n: usize, out: *mut f64) -> QlStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let x = read_vec(x, n, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if n != f.field.n_modes() {
            return Err(Fail(QlStatus::InvalidArgument, format!("x has {n} entries, field has {} modes", f.field.n_modes())));
        }
        if !(t >= 0.0 && t <= f.field.horizon()) {
            return Err(Fail(QlStatus::InvalidArgument, format!("t = {t} outside [0, {}]", f.field.horizon())));
        }
        *out = f.field.value(t, &x);
        Ok(())
    })
}

/// # Safety
/// `field` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ql_field_free(field: *mut QlField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Compares `u(t, x)` with the Monte-Carlo mean of `g(X(t))` using the
/// configured simulation settings.
///
/// # Safety
/// Handles must come from this library; `x` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ql_feynman_kac(
    config: *const QlConfig,
    field: *const QlField,
    x: *const f64,
    n: usize,
    t: f64,
    out: *mut QlFkResult,
) -> QlStatus {
    guard(|| {
        let c = config_ref(config)?;
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        let x = read_vec(x, n, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = feynman_kac_verify(&c.resolved.coeffs, &f.field, &x, t, &c.resolved.config.simulation)?;
        *out = QlFkResult {
            u_value: r.u_value,
            mc_mean: r.mc_mean,
            mc_stderr: r.mc_stderr,
            z_score: r.z_score,
            bias_budget: r.bias_budget,
            pass: r.pass,
        };
        Ok(())
    })
}

/// Minimal action `(1/2) int |phi|^2` over controls steering `x` to `target` at time `t`.
///
/// # Safety
/// `config` must come from this library; `x` and `target` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ql_minimize_action(
    config: *const QlConfig,
    x: *const f64,
    target: *const f64,
    n: usize,
    t: f64,
    out: *mut QlActionResult,
) -> QlStatus {
    guard(|| {
        let c = config_ref(config)?;
        let x = HVector::new(read_vec(x, n, "x")?);
        let target = HVector::new(read_vec(target, n, "target")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let r = minimize_action(&c.resolved.coeffs, &x, t, &EndpointEvent::Point { target }, &c.resolved.config.ldp)?;
        *out = QlActionResult { value: r.value, endpoint_gap: r.endpoint_gap, converged: r.converged };
        Ok(())
    })
}
