//! C ABI over `vivi-core`.
//!
//! Every fallible call returns a [`ViviStatus`]; on failure the message is
//! available from [`vivi_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use vivi_core::autodiff::checkpoint::Checkpoint;
use vivi_core::config::ExperimentConfig;
use vivi_core::model::ModelBundle;
use vivi_core::pipeline::detect_shot_boundaries;
use vivi_core::trainer::{TrainMode, Trainer};
use vivi_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViviStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

impl From<&Error> for ViviStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::NotEnoughVideos { .. } | Error::StepOutOfRange { .. } => ViviStatus::Config,
            Error::Io { .. } => ViviStatus::Io,
            Error::Format { .. } | Error::ParamMismatch { .. } => ViviStatus::Format,
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) | Error::Diverged { .. } => ViviStatus::Numeric,
            _ => ViviStatus::InvalidArgument,
        }
    }
}

/// Resolved experiment configuration.
pub struct ViviConfig {
    inner: ExperimentConfig,
}

/// A trained model (encoder and heads) in f32.
pub struct ViviModel {
    inner: ModelBundle<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(ViviStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ViviStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ViviStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ViviStatus::Ok
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
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            ViviStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ViviStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn vivi_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vivi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn vivi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a configuration: defaults, then the TOML file at `path` (may be
/// NULL), then `n_overrides` strings of the form `dotted.key=value`.
///
/// # Safety
/// `path` is NULL or a NUL-terminated string; `overrides` points to
/// `n_overrides` NUL-terminated strings; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vivi_config_load(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut ViviConfig,
) -> ViviStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = if path.is_null() { None } else { Some(PathBuf::from(str_arg(path, "path")?)) };
        let ov = slice_arg(overrides, n_overrides, "overrides")?
            .iter()
            .map(|&p| str_arg(p, "override").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let inner = ExperimentConfig::load(path.as_deref(), &ov)?;
        *out = Box::into_raw(Box::new(ViviConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` is NULL or a handle from [`vivi_config_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vivi_config_free(cfg: *mut ViviConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// The resolved configuration as TOML; free with [`vivi_string_free`].
///
/// # Safety
/// `cfg` is a live config handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vivi_config_to_toml(cfg: *const ViviConfig, out: *mut *mut c_char) -> ViviStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let s = CString::new(cfg.inner.to_toml()).map_err(|e| Fail(ViviStatus::InvalidArgument, e.to_string()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// Trains a model as configured (generated corpus or configured shards).
///
/// # Safety
/// `cfg` is a live config handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vivi_train(cfg: *const ViviConfig, out: *mut *mut ViviModel) -> ViviStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let cfg = &cfg.as_ref().ok_or_else(|| null("cfg"))?.inner;
        let corpus = Arc::new(cfg.corpus()?);
        let labeled = match cfg.train.mode {
            TrainMode::Cotrain => Some(Arc::new(cfg.labeled_set()?)),
            TrainMode::Ssl => None,
        };
        let mut trainer = Trainer::new(cfg.train.clone(), cfg.seed, corpus, labeled)?;
        trainer.run_until(cfg.train.iterations, &mut |_, _| Ok(()))?;
        *out = Box::into_raw(Box::new(ViviModel { inner: trainer.model }));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vivi_model_load(path: *const c_char, out: *mut *mut ViviModel) -> ViviStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let (inner, _) = ModelBundle::<f32>::from_checkpoint(&Checkpoint::load(&path)?)?;
        *out = Box::into_raw(Box::new(ViviModel { inner }));
        Ok(())
    })
}

/// Writes the model parameters (without optimizer state) to `path`.
///
/// # Safety
/// `model` is a live model handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vivi_model_save(model: *const ViviModel, path: *const c_char) -> ViviStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let path = PathBuf::from(str_arg(path, "path")?);
        model.inner.to_checkpoint(None, serde_json::Value::Null).save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a model handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vivi_model_free(model: *mut ViviModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width D; 0 for NULL.
///
/// # Safety
/// `model` is NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn vivi_model_embed_dim(model: *const ViviModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.embed_dim())
}

/// Expected frame side length in pixels; 0 for NULL.
///
/// # Safety
/// `model` is NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn vivi_model_input_size(model: *const ViviModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.input_size)
}

/// Expected channel count; 0 for NULL.
///
/// # Safety
/// `model` is NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn vivi_model_input_channels(model: *const ViviModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.input_channels)
}

/// Encodes `count` HWC frames with values in [0, 1] into `count * D`
/// embeddings (row-major). `out_len` must be at least `count * D`.
///
/// # Safety
/// `frames` holds `count * size * size * channels` floats; `out` holds
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vivi_model_encode(
    model: *const ViviModel,
    frames: *const f32,
    count: usize,
    out: *mut f32,
    out_len: usize,
) -> ViviStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let c = &m.config;
        let frames = slice_arg(frames, count * c.input_size * c.input_size * c.input_channels, "frames")?;
        let need = count * m.embed_dim();
        if out_len < need {
            return Err(Fail(ViviStatus::BufferTooSmall, format!("out holds {out_len} floats, need {need}")));
        }
        if need == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let emb = m.encode_frames_chunked(frames, count, 128)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(emb.data());
        Ok(())
    })
}

/// Detects shot boundaries in `n_frames` 8-bit frames of `frame_len` bytes.
/// Boundary indices (first frame of each new shot) go to `out`; `written`
/// receives the number found. If `capacity` is too small, nothing is copied,
/// `written` receives the required size and `BufferTooSmall` is returned.
///
/// # Safety
/// `frames` holds `n_frames * frame_len` bytes; `out` holds `capacity`
/// entries; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn vivi_detect_shots(
    frames: *const u8,
    n_frames: usize,
    frame_len: usize,
    channels: usize,
    threshold: f64,
    out: *mut usize,
    capacity: usize,
    written: *mut usize,
) -> ViviStatus {
    guard(|| {
        let written = out_arg(written, "written")?;
        *written = 0;
        if channels == 0 || frame_len == 0 || frame_len % channels != 0 {
            return Err(Fail(
                ViviStatus::InvalidArgument,
                format!("frame_len {frame_len} is not a positive multiple of channels {channels}"),
            ));
        }
        if !(threshold > 0.0) {
            return Err(Fail(ViviStatus::InvalidArgument, "threshold must be > 0".into()));
        }
        let frames = slice_arg(frames, n_frames * frame_len, "frames")?;
        let found = detect_shot_boundaries(frames, frame_len, channels, threshold);
        *written = found.len();
        if found.len() > capacity {
            return Err(Fail(
                ViviStatus::BufferTooSmall,
                format!("{} boundaries, capacity {capacity}", found.len()),
            ));
        }
        if !found.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, found.len()).copy_from_slice(&found);
        }
        Ok(())
    })
}
