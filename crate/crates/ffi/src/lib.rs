//! C ABI over `fedavg_sde`.
//!
//! Objects cross the boundary as opaque handles created by `fs_*_new` or
//! `fs_*_from_json` and released by the matching `fs_*_free`. Every fallible
//! call returns an [`FsStatus`]; on failure a description is available from
//! [`fs_last_error_message`] on the same thread until the next failing call.
//! Strings returned to the caller are owned by it and released with
//! [`fs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedavg_sde::experiment::{self, ExperimentConfig, ProblemSpec};
use fedavg_sde::quadratic::{AnalyticSolution, CovarianceMode, QuadraticCase1D};
use fedavg_sde::discrete::run_fedavg;
use fedavg_sde::{Error, FedAvgConfig, Problem, Trajectory, WeightVector};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or an out-of-range index.
    InvalidArgument = 1,
    /// The config or object description failed validation.
    Validation = 2,
    /// A simulation produced non-finite values or a degenerate sample.
    Numerical = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Covariance construction for the quadratic case.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsCovarianceMode {
    PaperVerbatim = 0,
    ExactMoment = 1,
}

/// A federated objective.
pub struct FsProblem(Problem);

/// Closed-form mean and variance of the one-dimensional quadratic case.
pub struct FsAnalytic(AnalyticSolution);

/// A recorded FedAvg run.
pub struct FsTrajectory(Trajectory);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FsStatus {
    match experiment::exit_code(err) {
        2 => FsStatus::Validation,
        3 => FsStatus::Numerical,
        _ => match err {
            Error::Io(_) => FsStatus::Io,
            _ => FsStatus::Internal,
        },
    }
}

struct Failure(FsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = match &e {
            Error::Config(lines) => lines.join("; "),
            e => e.to_string(),
        };
        Failure(status_of(&e), msg)
    }
}

fn bad(msg: impl Into<String>) -> Failure {
    Failure(FsStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FsStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| bad(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(bad(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| bad(format!("{what} handle is null")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(bad(format!("{what} output pointer is null")));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| Failure(FsStatus::Validation, format!("{what}: {e}")))
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forgets the last failure on this thread.
#[no_mangle]
pub extern "C" fn fs_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a problem from the JSON `problem` section of an experiment config.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_problem_from_json(json_text: *const c_char, out: *mut *mut FsProblem) -> FsStatus {
    guard(|| {
        let spec: ProblemSpec = json(text(json_text, "json")?, "problem")?;
        let p = spec.build()?;
        put(out, Box::into_raw(Box::new(FsProblem(p))), "problem")
    })
}

/// # Safety
/// `p` must come from [`fs_problem_from_json`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fs_problem_free(p: *mut FsProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Dimension `d`, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_problem_dim(p: *const FsProblem) -> usize {
    p.as_ref().map_or(0, |p| p.0.dim())
}

/// Number of clients, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_problem_num_clients(p: *const FsProblem) -> usize {
    p.as_ref().map_or(0, |p| p.0.num_clients())
}

/// `F(w)` and `∇F(w)`; `w` and `grad` hold `len = d` values. `grad` may be
/// null when only the loss is wanted.
///
/// # Safety
/// Pointers must be valid for `len` elements.
#[no_mangle]
pub unsafe extern "C" fn fs_problem_loss_and_gradient(p: *const FsProblem, w: *const f64, len: usize, loss: *mut f64, grad: *mut f64) -> FsStatus {
    guard(|| {
        let p = &handle(p, "problem")?.0;
        let w = WeightVector::new(slice(w, len, "w")?.to_vec())?;
        let (f, g) = p.loss_and_gradient(&w)?;
        if !grad.is_null() {
            out_slice(grad, len, "grad")?.copy_from_slice(g.as_slice());
        }
        put(loss, f, "loss")
    })
}

/// `L` and `μ` over the box `[lower, upper]`.
///
/// # Safety
/// `lower` and `upper` must hold `len` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_problem_smoothness(
    p: *const FsProblem,
    lower: *const f64,
    upper: *const f64,
    len: usize,
    lipschitz: *mut f64,
    smoothness: *mut f64,
) -> FsStatus {
    guard(|| {
        let p = &handle(p, "problem")?.0;
        let domain = fedavg_sde::BoxDomain::new(slice(lower, len, "lower")?.to_vec(), slice(upper, len, "upper")?.to_vec())?;
        let c = p.smoothness_constants(&domain)?;
        put(lipschitz, c.lipschitz, "lipschitz")?;
        put(smoothness, c.smoothness, "smoothness")
    })
}

/// Closed-form solution for a one-dimensional quadratic case given as JSON
/// (`clients`, `eta`, `local_steps`, `w_init`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_analytic_new(json_text: *const c_char, mode: FsCovarianceMode, out: *mut *mut FsAnalytic) -> FsStatus {
    guard(|| {
        let case: QuadraticCase1D = json(text(json_text, "json")?, "quadratic case")?;
        let mode = match mode {
            FsCovarianceMode::PaperVerbatim => CovarianceMode::PaperVerbatim,
            FsCovarianceMode::ExactMoment => CovarianceMode::ExactMoment,
        };
        let sol = AnalyticSolution::new(&case, mode)?;
        put(out, Box::into_raw(Box::new(FsAnalytic(sol))), "analytic")
    })
}

/// # Safety
/// `a` must come from [`fs_analytic_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fs_analytic_free(a: *mut FsAnalytic) {
    if !a.is_null() {
        drop(Box::from_raw(a));
    }
}

/// Mean at time `t`, and both variance forms: the solution of the moment
/// ODE and the closed form with `e^{−At}`. Any output may be null.
///
/// # Safety
/// `a` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_analytic_moments(a: *const FsAnalytic, t: f64, mean: *mut f64, variance_ode: *mut f64, variance_paper_form: *mut f64) -> FsStatus {
    guard(|| {
        let a = &handle(a, "analytic")?.0;
        if !(t.is_finite() && t >= 0.0) {
            return Err(bad(format!("t must be finite and >= 0, got {t}")));
        }
        let v = a.variance(t);
        for (ptr, value) in [(mean, a.mean(t)), (variance_ode, v.ode), (variance_paper_form, v.paper_form)] {
            if !ptr.is_null() {
                ptr.write(value);
            }
        }
        Ok(())
    })
}

/// Runs FedAvg; `config_json` is a FedAvg config including `seed`.
///
/// # Safety
/// `w_init` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_run_fedavg(
    p: *const FsProblem,
    config_json: *const c_char,
    w_init: *const f64,
    len: usize,
    out: *mut *mut FsTrajectory,
) -> FsStatus {
    guard(|| {
        let p = &handle(p, "problem")?.0;
        let config: FedAvgConfig = json(text(config_json, "config")?, "fedavg config")?;
        let w = WeightVector::new(slice(w_init, len, "w_init")?.to_vec())?;
        let traj = run_fedavg(p, &config, &w)?;
        put(out, Box::into_raw(Box::new(FsTrajectory(traj))), "trajectory")
    })
}

/// # Safety
/// `t` must come from [`fs_run_fedavg`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fs_trajectory_free(t: *mut FsTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of records (`rounds + 1`), or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_trajectory_len(t: *const FsTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.0.records.len())
}

/// Server state, loss and `‖∇F‖²` after `round` aggregations. `state` holds
/// `len = d` values; any output may be null.
///
/// # Safety
/// `t` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_trajectory_record(
    t: *const FsTrajectory,
    round: usize,
    state: *mut f64,
    len: usize,
    loss: *mut f64,
    grad_norm_sq: *mut f64,
) -> FsStatus {
    guard(|| {
        let t = &handle(t, "trajectory")?.0;
        let r = t.records.get(round).ok_or_else(|| bad(format!("round {round} out of range ({} records)", t.records.len())))?;
        if !state.is_null() {
            if len != r.server.dim() {
                return Err(bad(format!("state buffer has {len} slots, expected {}", r.server.dim())));
            }
            out_slice(state, len, "state")?.copy_from_slice(r.server.as_slice());
        }
        if !loss.is_null() {
            loss.write(r.loss);
        }
        if !grad_norm_sq.is_null() {
            grad_norm_sq.write(r.grad_norm_sq);
        }
        Ok(())
    })
}

/// The trajectory CSV; release with [`fs_string_free`].
///
/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_trajectory_csv(t: *const FsTrajectory, out: *mut *mut c_char) -> FsStatus {
    guard(|| {
        let t = &handle(t, "trajectory")?.0;
        put(out, owned_string(t.to_csv()), "csv")
    })
}

/// Diagnostics for an experiment config as a JSON array of strings; an
/// empty array means the config is runnable. Release with
/// [`fs_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_validate_config(config_json: *const c_char, out: *mut *mut c_char) -> FsStatus {
    guard(|| {
        let d = match ExperimentConfig::from_json(text(config_json, "config")?) {
            Ok(c) => c.diagnostics(),
            Err(Error::Config(d)) => d,
            Err(e) => vec![e.to_string()],
        };
        put(out, owned_string(serde_json::to_string(&d).expect("strings serialize")), "diagnostics")
    })
}

/// Runs an experiment config and writes its artifacts and manifest into
/// `out_dir`. Nothing is written if the run fails.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn fs_run_experiment(config_json: *const c_char, out_dir: *const c_char) -> FsStatus {
    guard(|| {
        let config = ExperimentConfig::from_json(text(config_json, "config")?)?;
        experiment::run(&config, Path::new(text(out_dir, "out_dir")?))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Config(vec![])), FsStatus::Validation);
        assert_eq!(status_of(&Error::NumericalAbort { at: "a".into(), detail: "b".into() }), FsStatus::Numerical);
        assert_eq!(status_of(&Error::Io(std::io::Error::other("x"))), FsStatus::Io);
    }

    #[test]
    fn guard_catches_panics() {
        fs_clear_last_error();
        assert_eq!(guard(|| panic!("boom")), FsStatus::Internal);
        assert!(!fs_last_error_message().is_null());
    }
}
