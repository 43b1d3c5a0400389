//! C ABI for loading trained flows and drawing samples from them.
//!
//! Models are opaque `NfsModel` handles created by `nfs_model_load` or
//! `nfs_model_from_string` and released with `nfs_model_free`. Every
//! fallible call returns an `NfsStatus`; on failure a message is available
//! from `nfs_last_error_message` on the same thread. Vectors are `double`
//! arrays of length `dim`, point sets are row-major `n * dim` arrays and
//! Jacobians are row-major `dim * dim`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nfsails::flow::{checkpoint_from_str, load_checkpoint, CheckpointError, Flow, FlowModel};
use nfsails::samplers::{naive_sample, nf_sails, ProposalMode, SampleRun, SamplerConfig};
use nfsails::PointSet;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    VersionMismatch = 4,
    Parse = 5,
    Numerical = 6,
    Panic = 7,
}

/// Opaque handle to a trained flow.
pub struct NfsModel {
    inner: FlowModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NfsProposalMode {
    Approx = 0,
    Exact = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NfsSamplerConfig {
    pub eps: f64,
    /// Probability of the local kernel at each step.
    pub p: f64,
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// An `NfsProposalMode` value.
    pub mode: u32,
    pub seed: u64,
    pub adapt_step_size: bool,
}

/// Kernel counts after burn-in. Rates are NaN when nothing was proposed.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NfsDiagnostics {
    pub rmmala_proposed: u64,
    pub rmmala_accepted: u64,
    pub imh_proposed: u64,
    pub imh_accepted: u64,
    pub invalid_proposals: u64,
    pub rmmala_acceptance_rate: f64,
    pub imh_acceptance_rate: f64,
    pub step_size: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(NfsStatus, String);

type FfiResult = Result<(), Failure>;

fn fail(status: NfsStatus, message: impl ToString) -> Failure {
    Failure(status, message.to_string())
}

/// Runs `body`, recording the message of any failure or panic.
fn guard(body: impl FnOnce() -> FfiResult) -> NfsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NfsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            NfsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(NfsStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn model_ref<'a>(model: *const NfsModel) -> Result<&'a FlowModel, Failure> {
    non_null(model, "model")?;
    Ok(&(*model).inner)
}

unsafe fn input<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Failure> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    let status = match &e {
        CheckpointError::VersionMismatch { .. } => NfsStatus::VersionMismatch,
        CheckpointError::Parse { .. } => NfsStatus::Parse,
        CheckpointError::Io(_) => NfsStatus::Io,
    };
    fail(status, e)
}

fn numerical(e: impl ToString) -> Failure {
    fail(NfsStatus::Numerical, e)
}

unsafe fn store_model(model: FlowModel, out: *mut *mut NfsModel) {
    *out = Box::into_raw(Box::new(NfsModel { inner: model }));
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_load(path: *const c_char, out: *mut *mut NfsModel) -> NfsStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(NfsStatus::InvalidArgument, "path is not UTF-8"))?;
        let model = load_checkpoint(Path::new(path)).map_err(|e| {
            let Failure(status, msg) = checkpoint_failure(e);
            Failure(status, format!("{path}: {msg}"))
        })?;
        store_model(model, out);
        Ok(())
    })
}

/// Parses checkpoint text. On success `*out` owns a new handle.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_from_string(text: *const c_char, out: *mut *mut NfsModel) -> NfsStatus {
    guard(|| {
        non_null(text, "text")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| fail(NfsStatus::InvalidArgument, "checkpoint text is not UTF-8"))?;
        store_model(checkpoint_from_str(text).map_err(checkpoint_failure)?, out);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_free(model: *mut NfsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_dim(model: *const NfsModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).inner.dim()
    }
}

/// `x = f(z)` and `log |det J_f(z)|`. `log_det` may be null.
///
/// # Safety
/// `z` and `x` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_forward(
    model: *const NfsModel,
    z: *const f64,
    x: *mut f64,
    log_det: *mut f64,
) -> NfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.dim();
        let (value, ld) = m.forward(input(z, d, "z")?).map_err(numerical)?;
        output(x, d, "x")?.copy_from_slice(&value);
        if !log_det.is_null() {
            *log_det = ld;
        }
        Ok(())
    })
}

/// `z = f⁻¹(x)` and `log |det J_{f⁻¹}(x)|`. `log_det` may be null.
///
/// # Safety
/// `x` and `z` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_inverse(
    model: *const NfsModel,
    x: *const f64,
    z: *mut f64,
    log_det: *mut f64,
) -> NfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.dim();
        let (value, ld) = m.inverse(input(x, d, "x")?).map_err(numerical)?;
        output(z, d, "z")?.copy_from_slice(&value);
        if !log_det.is_null() {
            *log_det = ld;
        }
        Ok(())
    })
}

/// Gradient of the learnt data log-density evaluated at `f(z)`.
///
/// # Safety
/// `z` and `score` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_latent_score(model: *const NfsModel, z: *const f64, score: *mut f64) -> NfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.dim();
        let s = m.latent_score(input(z, d, "z")?).map_err(numerical)?;
        output(score, d, "score")?.copy_from_slice(&s);
        Ok(())
    })
}

/// Learnt log-density `log q_X(x)`.
///
/// # Safety
/// `x` must hold `dim` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_log_density(model: *const NfsModel, x: *const f64, out: *mut f64) -> NfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        *out = m.log_density(input(x, m.dim(), "x")?).map_err(numerical)?;
        Ok(())
    })
}

/// Row-major `J_f(z)`.
///
/// # Safety
/// `z` must hold `dim` doubles and `jacobian` `dim * dim`.
#[no_mangle]
pub unsafe extern "C" fn nfs_model_jacobian(model: *const NfsModel, z: *const f64, jacobian: *mut f64) -> NfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.dim();
        let j = m.jacobian(input(z, d, "z")?).map_err(numerical)?;
        let out = output(jacobian, d * d, "jacobian")?;
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = j.matrix[(r, c)];
            }
        }
        Ok(())
    })
}

/// Library defaults: `eps = 0.1`, `p = 0.9`, 1000 samples after 1000
/// burn-in steps, approximate proposals.
#[no_mangle]
pub extern "C" fn nfs_sampler_config_default() -> NfsSamplerConfig {
    let c = SamplerConfig::default();
    NfsSamplerConfig {
        eps: c.eps,
        p: c.p,
        n_samples: c.n_samples,
        burn_in: c.burn_in,
        thin: c.thin,
        mode: match c.mode {
            ProposalMode::Approx => NfsProposalMode::Approx as u32,
            ProposalMode::Exact => NfsProposalMode::Exact as u32,
        },
        seed: c.seed,
        adapt_step_size: c.adapt_step_size,
    }
}

fn copy_points(points: &PointSet, dst: *mut f64, name: &str) -> FfiResult {
    let flat = points.as_flat();
    unsafe { output(dst, flat.len(), name)? }.copy_from_slice(flat);
    Ok(())
}

fn write_run(run: &SampleRun, samples: *mut f64, latent: *mut f64) -> FfiResult {
    copy_points(&run.samples, samples, "samples")?;
    if !latent.is_null() {
        copy_points(&run.latent, latent, "latent")?;
    }
    Ok(())
}

/// `n` draws of `f(z)`, `z ~ N(0, I)`. `latent` may be null.
///
/// # Safety
/// `samples` (and `latent` when set) must hold `n * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nfs_sample_naive(
    model: *const NfsModel,
    n: usize,
    seed: u64,
    samples: *mut f64,
    latent: *mut f64,
) -> NfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let run = naive_sample(m, n, seed).map_err(numerical)?;
        write_run(&run, samples, latent)
    })
}

/// Runs one chain of the latent sampler. `latent` and `diagnostics` may be
/// null.
///
/// # Safety
/// `config` must be valid; `samples` (and `latent` when set) must hold
/// `config->n_samples * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn nfs_sample_sails(
    model: *const NfsModel,
    config: *const NfsSamplerConfig,
    samples: *mut f64,
    latent: *mut f64,
    diagnostics: *mut NfsDiagnostics,
) -> NfsStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(config, "config")?;
        let c = &*config;
        let cfg = SamplerConfig {
            eps: c.eps,
            p: c.p,
            n_samples: c.n_samples,
            burn_in: c.burn_in,
            thin: c.thin,
            mode: match c.mode {
                m if m == NfsProposalMode::Approx as u32 => ProposalMode::Approx,
                m if m == NfsProposalMode::Exact as u32 => ProposalMode::Exact,
                m => return Err(fail(NfsStatus::InvalidArgument, format!("unknown proposal mode {m}"))),
            },
            seed: c.seed,
            adapt_step_size: c.adapt_step_size,
        };
        cfg.validate().map_err(|e| fail(NfsStatus::InvalidArgument, e))?;
        let run = nf_sails(m, &cfg).map_err(numerical)?;
        write_run(&run, samples, latent)?;
        if !diagnostics.is_null() {
            let d = run.diagnostics.unwrap_or_default();
            *diagnostics = NfsDiagnostics {
                rmmala_proposed: d.rmmala_proposed,
                rmmala_accepted: d.rmmala_accepted,
                imh_proposed: d.imh_proposed,
                imh_accepted: d.imh_accepted,
                invalid_proposals: d.invalid_proposals,
                rmmala_acceptance_rate: d.rmmala_acceptance_rate.unwrap_or(f64::NAN),
                imh_acceptance_rate: d.imh_acceptance_rate.unwrap_or(f64::NAN),
                step_size: d.step_sizes.first().copied().unwrap_or(cfg.eps),
            };
        }
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nfs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn nfs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
