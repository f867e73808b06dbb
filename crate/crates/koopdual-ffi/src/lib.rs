//! C interface to koopdual.
//!
//! Every function returns a `KdStatus` (or a plain value for accessors that
//! cannot fail). Objects are opaque handles created by `kd_*_new`/`_load`
//! style calls and released with the matching `_free`. On failure the
//! message is kept per thread and read with `kd_last_error`.
//!
//! Matrices cross the boundary as column-major `double` arrays, one column
//! per sample.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use koopdual::config::ExperimentConfig;
use koopdual::edmd::{edmd_fit, koopman_predict, BasisLibrary, KoopmanModel, OutputMode};
use koopdual::linalg::Matrix;
use koopdual::pipeline;
use koopdual::plant::SnapshotData;
use koopdual::runtime::{controller_step, ControllerState, DualLoopController};
use koopdual::Error;

/// Result codes. 1..3 match the exit codes of the `koopctl` tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    ConfigError = 1,
    NumericalError = 2,
    IoError = 3,
    NullPointer = 4,
    InvalidArgument = 5,
    Panic = 6,
}

/// Pipeline stage selector for `kd_run_stage`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdStage {
    Generate = 0,
    Identify = 1,
    Synthesize = 2,
    Simulate = 3,
    Report = 4,
}

/// Experiment configuration.
pub struct KdConfig {
    inner: ExperimentConfig,
}

/// Identified lifted linear model.
pub struct KdModel {
    inner: KoopmanModel,
}

/// Dual-loop controller together with its running state.
pub struct KdController {
    ctrl: DualLoopController,
    state: ControllerState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> KdStatus {
    match e.exit_code() {
        1 => KdStatus::ConfigError,
        3 => KdStatus::IoError,
        _ => match e {
            Error::Dimension(_) | Error::Domain(_) => KdStatus::InvalidArgument,
            _ => KdStatus::NumericalError,
        },
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f` behind a panic guard and maps its error to a status code.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            KdStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            KdStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            KdStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn col_major(data: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| data[j * rows + i])
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn kd_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Parses a JSON experiment configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kd_config_from_json(json: *const c_char, out: *mut *mut KdConfig) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = ExperimentConfig::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(KdConfig { inner: cfg }));
        Ok(())
    })
}

/// The bundled Van der Pol configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kd_config_default(out: *mut *mut KdConfig) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(KdConfig {
            inner: ExperimentConfig::vdp_default(),
        }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from a `kd_config_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kd_config_free(cfg: *mut KdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs one pipeline stage, reading and writing artifacts under `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle and `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn kd_run_stage(cfg: *const KdConfig, out_dir: *const c_char, stage: KdStage) -> KdStatus {
    guard(|| {
        let cfg = &cfg.as_ref().ok_or(Fail::Null("cfg"))?.inner;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        match stage {
            KdStage::Generate => drop(pipeline::generate(cfg, &out)?),
            KdStage::Identify => drop(pipeline::identify(cfg, &out)?),
            KdStage::Synthesize => drop(pipeline::synthesize(cfg, &out)?),
            KdStage::Simulate => drop(pipeline::simulate(cfg, &out)?),
            KdStage::Report => drop(pipeline::report(cfg, &out)?),
        }
        Ok(())
    })
}

/// Fits a lifted model to snapshot data with a monomial basis of the given
/// degree. `x1`, `x2` are `n_state x n_samples` and `u` is
/// `n_input x n_samples`, all column-major. Outputs are the lifted states.
///
/// # Safety
/// Array arguments must hold the stated number of values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_model_fit(
    x1: *const f64,
    x2: *const f64,
    u: *const f64,
    n_state: usize,
    n_input: usize,
    n_samples: usize,
    degree: usize,
    dt: f64,
    out: *mut *mut KdModel,
) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if n_state == 0 || degree == 0 {
            return Err(Fail::Arg("n_state and degree must be positive".into()));
        }
        let nx = n_state * n_samples;
        let x1 = col_major(slice_arg(x1, nx, "x1")?, n_state, n_samples);
        let x2 = col_major(slice_arg(x2, nx, "x2")?, n_state, n_samples);
        let u = col_major(slice_arg(u, n_input * n_samples, "u")?, n_input, n_samples);
        let data = SnapshotData {
            y: x1.clone(),
            x1,
            x2,
            u,
            dt,
            seed: 0,
        };
        let basis = BasisLibrary::monomial(n_state, degree);
        let fit = edmd_fit(&data, &basis, OutputMode::LiftedState, koopdual::edmd::DEFAULT_PINV_TOL)?;
        *out = Box::into_raw(Box::new(KdModel { inner: fit.model }));
        Ok(())
    })
}

/// Loads a model written by the identify stage.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_model_from_json(json: *const c_char, out: *mut *mut KdModel) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = KoopmanModel::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(KdModel { inner: m }));
        Ok(())
    })
}

/// Lifted dimension of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kd_model_lifted_dim(model: *const KdModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.a.nrows())
}

/// Open-loop prediction from `x0` under `steps` inputs (column-major
/// `n_input x steps`). Writes `(steps + 1) * n_state` values to `states`.
///
/// # Safety
/// `model` must be live; arrays must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn kd_model_predict(
    model: *const KdModel,
    x0: *const f64,
    u: *const f64,
    steps: usize,
    states: *mut f64,
) -> KdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Fail::Null("model"))?.inner;
        let n = m.basis.state_dim();
        let nu = m.b2.ncols();
        let x0 = slice_arg(x0, n, "x0")?;
        let u = slice_arg(u, nu * steps, "u")?;
        if states.is_null() {
            return Err(Fail::Null("states"));
        }
        let seq: Vec<Vec<f64>> = (0..steps).map(|k| u[k * nu..(k + 1) * nu].to_vec()).collect();
        let pr = koopman_predict(m, x0, &seq)?;
        let dst = std::slice::from_raw_parts_mut(states, (steps + 1) * n);
        for (k, s) in pr.states.iter().enumerate() {
            dst[k * n..(k + 1) * n].copy_from_slice(s);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from a `kd_model_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kd_model_free(model: *mut KdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads the controller synthesized for noise level `sigma` from `out_dir`.
/// The robust loop is enabled when a Q-filter was found.
///
/// # Safety
/// `cfg` must be live, `out_dir` NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_load(
    cfg: *const KdConfig,
    out_dir: *const c_char,
    sigma: f64,
    out: *mut *mut KdController,
) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = &cfg.as_ref().ok_or(Fail::Null("cfg"))?.inner;
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let d = pipeline::load_designed(cfg, &dir, sigma)?;
        let basis = d.model.basis.clone();
        let ctrl = DualLoopController::new(d.design, basis, &d.gains, d.qfilter)?;
        let state = ctrl.initial_state(&vec![0.0; ctrl.output_dim()]);
        *out = Box::into_raw(Box::new(KdController { ctrl, state }));
        Ok(())
    })
}

/// Number of measurement entries the controller expects per step.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_output_dim(c: *const KdController) -> usize {
    c.as_ref().map_or(0, |c| c.ctrl.output_dim())
}

/// Number of plant inputs produced per step.
///
/// # Safety
/// `c` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_input_dim(c: *const KdController) -> usize {
    c.as_ref().map_or(0, |c| c.ctrl.input_dim())
}

/// Lifts a physical state into the controller's measurement coordinates.
/// Writes `kd_controller_output_dim` values.
///
/// # Safety
/// `c` must be live; `x` holds `n` values and `y` has room for the output.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_lift(c: *const KdController, x: *const f64, n: usize, y: *mut f64) -> KdStatus {
    guard(|| {
        let c = c.as_ref().ok_or(Fail::Null("controller"))?;
        let z = c.ctrl.lift_initial(slice_arg(x, n, "x")?)?;
        if y.is_null() {
            return Err(Fail::Null("y"));
        }
        std::slice::from_raw_parts_mut(y, z.len()).copy_from_slice(&z);
        Ok(())
    })
}

/// Resets the observer to `y0` and the filter state to zero.
///
/// # Safety
/// `c` must be live; `y0` holds `ny` values.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_reset(c: *mut KdController, y0: *const f64, ny: usize) -> KdStatus {
    guard(|| {
        let c = c.as_mut().ok_or(Fail::Null("controller"))?;
        if ny != c.ctrl.output_dim() {
            return Err(Fail::Arg(format!("expected {} measurement entries, got {ny}", c.ctrl.output_dim())));
        }
        c.state = c.ctrl.initial_state(slice_arg(y0, ny, "y0")?);
        Ok(())
    })
}

/// Switches the robust loop on (nonzero) or off. Fails when switching on a
/// controller without a Q-filter.
///
/// # Safety
/// `c` must be live.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_set_robust(c: *mut KdController, enabled: c_int) -> KdStatus {
    guard(|| {
        let c = c.as_mut().ok_or(Fail::Null("controller"))?;
        if enabled != 0 && c.ctrl.qfilter.is_none() {
            return Err(Fail::Arg("controller has no Q-filter".into()));
        }
        c.ctrl.enabled_robust_loop = enabled != 0;
        Ok(())
    })
}

/// One control update: reads `ny` measurements, writes `nu` inputs and
/// advances the internal state.
///
/// # Safety
/// `c` must be live; `y` holds `ny` values and `u` has room for `nu`.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_step(
    c: *mut KdController,
    y: *const f64,
    ny: usize,
    u: *mut f64,
    nu: usize,
) -> KdStatus {
    guard(|| {
        let c = c.as_mut().ok_or(Fail::Null("controller"))?;
        if nu != c.ctrl.input_dim() {
            return Err(Fail::Arg(format!("expected room for {} inputs, got {nu}", c.ctrl.input_dim())));
        }
        let y = slice_arg(y, ny, "y")?;
        if u.is_null() {
            return Err(Fail::Null("u"));
        }
        let (o, next) = controller_step(&c.ctrl, &c.state, y, 0)?;
        std::slice::from_raw_parts_mut(u, nu).copy_from_slice(&o.u);
        c.state = next;
        Ok(())
    })
}

/// # Safety
/// `c` must come from `kd_controller_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kd_controller_free(c: *mut KdController) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}
