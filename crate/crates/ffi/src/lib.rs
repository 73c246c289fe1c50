//! C ABI for `qsnn`.
//!
//! Objects cross the boundary as opaque pointers created by `*_new`/`*_from_*`
//! functions and released with the matching `*_free`. Fallible calls return a
//! [`QsnnStatus`]; on failure [`qsnn_last_error_message`] describes the error
//! for the calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qsnn::config::TrainConfig;
use qsnn::neuron::{surrogate, LifParams};
use qsnn::optim::cosine_lr;
use qsnn::quant::{quantize, scale_for, QuantSpec};
use qsnn::train::{run_training, write_artifacts, RunOutcome};
use qsnn::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QsnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    Checkpoint = 6,
    Shape = 7,
    NonFinite = 8,
    TrainingAborted = 9,
    OutOfRange = 10,
    Panic = 11,
}

/// Opaque training configuration.
pub struct QsnnConfig {
    inner: TrainConfig,
}

/// Opaque result of a completed training run.
pub struct QsnnRun {
    inner: RunOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> QsnnStatus {
    match e {
        Error::Shape { .. } | Error::Architecture { .. } => QsnnStatus::Shape,
        Error::NonFinite(_) => QsnnStatus::NonFinite,
        Error::Ingest { .. } => QsnnStatus::Data,
        Error::InvalidArgument(_) => QsnnStatus::InvalidArgument,
        Error::Config(_) => QsnnStatus::Config,
        Error::Checkpoint(_) => QsnnStatus::Checkpoint,
        Error::TrainingAborted { .. } => QsnnStatus::TrainingAborted,
        Error::Io(_) => QsnnStatus::Io,
    }
}

struct Fail(QsnnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QsnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            QsnnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            QsnnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(QsnnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(QsnnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next `qsnn_*` call on the same thread.
#[no_mangle]
pub extern "C" fn qsnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qsnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a TOML config file. Relative dataset paths resolve against the file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_config_from_file(path: *const c_char, out: *mut *mut QsnnConfig) -> QsnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = TrainConfig::from_file(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(QsnnConfig { inner: cfg }));
        Ok(())
    })
}

/// Build a shipped preset (e.g. `"desk-flt32"`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_config_from_preset(name: *const c_char, out: *mut *mut QsnnConfig) -> QsnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = TrainConfig::preset(str_arg(name, "name")?)?;
        *out = Box::into_raw(Box::new(QsnnConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from a `qsnn_config_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn qsnn_config_set_seed(cfg: *mut QsnnConfig, seed: u64) -> QsnnStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        if seed > i64::MAX as u64 {
            return Err(Fail(
                QsnnStatus::InvalidArgument,
                format!("seed {seed} exceeds {}", i64::MAX),
            ));
        }
        cfg.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from a `qsnn_config_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn qsnn_config_set_epochs(cfg: *mut QsnnConfig, epochs: u64) -> QsnnStatus {
    guard(|| {
        out_arg(cfg, "cfg")?.inner.epochs = epochs as usize;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or come from a `qsnn_config_*` constructor; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qsnn_config_free(cfg: *mut QsnnConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Train to completion (blocking).
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_train(cfg: *const QsnnConfig, out: *mut *mut QsnnRun) -> QsnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let outcome = run_training(&cfg.inner)?;
        *out = Box::into_raw(Box::new(QsnnRun { inner: outcome }));
        Ok(())
    })
}

/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_run_test_accuracy(run: *const QsnnRun, out: *mut f64) -> QsnnStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out_arg(out, "out")? = run.inner.record.test_accuracy;
        Ok(())
    })
}

/// Number of logged minibatch iterations.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_run_iterations(run: *const QsnnRun, out: *mut u64) -> QsnnStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        *out_arg(out, "out")? = run.inner.record.iterations.len() as u64;
        Ok(())
    })
}

unsafe fn iteration_field(
    run: *const QsnnRun,
    index: u64,
    out: *mut f64,
    field: fn(&qsnn::train::IterationLog) -> f64,
) -> QsnnStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let out = out_arg(out, "out")?;
        let log = &run.inner.record.iterations;
        let row = log.get(index as usize).ok_or_else(|| {
            Fail(
                QsnnStatus::OutOfRange,
                format!("iteration {index} out of range ({} logged)", log.len()),
            )
        })?;
        *out = field(row);
        Ok(())
    })
}

/// Learning rate used at logged iteration `index`.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_run_lr_at(run: *const QsnnRun, index: u64, out: *mut f64) -> QsnnStatus {
    iteration_field(run, index, out, |r| r.lr)
}

/// Minibatch loss at logged iteration `index`.
///
/// # Safety
/// `run` must be a live run handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_run_loss_at(run: *const QsnnRun, index: u64, out: *mut f64) -> QsnnStatus {
    iteration_field(run, index, out, |r| r.loss)
}

/// # Safety
/// `run` must be a live run handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qsnn_run_save_checkpoint(run: *const QsnnRun, path: *const c_char) -> QsnnStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        run.inner.checkpoint.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Write run.csv, epochs.csv, model.ckpt and metadata.toml into `dir`.
///
/// # Safety
/// `run` must be a live run handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qsnn_run_write_artifacts(run: *const QsnnRun, dir: *const c_char) -> QsnnStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        write_artifacts(&run.inner, Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a live run handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qsnn_run_free(run: *mut QsnnRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Cosine-annealed rate with hard restarts every `period` iterations.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_cosine_lr(iteration: u64, initial_lr: f64, period: u64, out: *mut f64) -> QsnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if period == 0 {
            return Err(Fail(QsnnStatus::InvalidArgument, "period must be at least 1".into()));
        }
        *out = cosine_lr(iteration, initial_lr, period);
        Ok(())
    })
}

/// Symmetric 4-bit quantization of `len` values. Writes the quantized values
/// to `out` (may alias `weights`) and the scale to `scale`.
///
/// # Safety
/// `weights` and `out` must point to `len` doubles; `scale` must be valid.
#[no_mangle]
pub unsafe extern "C" fn qsnn_quantize(weights: *const f64, len: usize, out: *mut f64, scale: *mut f64) -> QsnnStatus {
    guard(|| {
        if weights.is_null() || out.is_null() {
            return Err(null("weights/out"));
        }
        let scale = out_arg(scale, "scale")?;
        if len == 0 {
            return Err(Fail(QsnnStatus::InvalidArgument, "len must be positive".into()));
        }
        let src = std::slice::from_raw_parts(weights, len).to_vec();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Fail(QsnnStatus::NonFinite, "weights contain NaN or infinity".into()));
        }
        let w = Tensor::from_vec(src)?;
        let spec = QuantSpec::int4();
        *scale = scale_for(&w, &spec);
        ptr::copy_nonoverlapping(quantize(&w, &spec).data().as_ptr(), out, len);
        Ok(())
    })
}

/// Surrogate derivative `1 / (1 + k·|θ − u|)²`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qsnn_surrogate_grad(u: f64, theta: f64, slope: f64, out: *mut f64) -> QsnnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = LifParams::new(0.0, theta, slope)?;
        *out = surrogate(u, &p);
        Ok(())
    })
}
