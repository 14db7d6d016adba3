//! C ABI for the qkvlab engine.
//!
//! A run is created from a TOML config (string or file), held behind an
//! opaque handle, and queried for images, metrics and the run id; the
//! whole output tree can also be written to disk. Every function is
//! panic-safe and reports failures through [`QkvlabStatus`] plus a
//! per-thread error message.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qkvlab::config::RunConfig;
use qkvlab::error::Error;
use qkvlab::imageio::quantize_u8;
use qkvlab::sampler::{generate, write_outputs, GenerateResult};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkvlabStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// The config failed to parse or validate.
    InvalidConfig = 2,
    /// The run itself failed (I/O, numeric guard).
    Runtime = 3,
    /// The provided buffer is too small; retry with the written size.
    BufferTooSmall = 4,
    /// A slot or index argument is out of range.
    OutOfRange = 5,
}

/// Opaque handle to one completed generation run.
pub struct QkvlabRun {
    cfg: RunConfig,
    result: GenerateResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> QkvlabStatus {
    match err {
        Error::Config(_) | Error::Input(_) => QkvlabStatus::InvalidConfig,
        _ => QkvlabStatus::Runtime,
    }
}

/// Copies the last error message for the calling thread into `buf`
/// (NUL-terminated, truncating). Returns the full message length in
/// bytes, excluding the NUL. `buf` may be null to query the length.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qkvlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn run_from_config(cfg_result: Result<RunConfig, Error>, status: *mut QkvlabStatus) -> *mut QkvlabRun {
    let set = |s: QkvlabStatus| {
        if !status.is_null() {
            *status = s;
        }
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<QkvlabRun, Error> {
        let cfg = cfg_result?;
        cfg.validate()?;
        let result = generate(&cfg)?;
        Ok(QkvlabRun { cfg, result })
    }));
    match outcome {
        Ok(Ok(run)) => {
            set(QkvlabStatus::Ok);
            Box::into_raw(Box::new(run))
        }
        Ok(Err(err)) => {
            set_last_error(&err.to_string());
            set(status_of(&err));
            ptr::null_mut()
        }
        Err(_) => {
            set_last_error("internal panic");
            set(QkvlabStatus::Runtime);
            ptr::null_mut()
        }
    }
}

/// Runs a full generation from a TOML config string. Returns an owned
/// handle (free with [`qkvlab_run_free`]) or null on failure.
///
/// # Safety
/// `config_toml` must be a valid NUL-terminated UTF-8 string. `status`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_run_from_config_str(
    config_toml: *const c_char,
    status: *mut QkvlabStatus,
) -> *mut QkvlabRun {
    if config_toml.is_null() {
        set_last_error("config_toml is null");
        if !status.is_null() {
            *status = QkvlabStatus::NullArgument;
        }
        return ptr::null_mut();
    }
    let text = match CStr::from_ptr(config_toml).to_str() {
        Ok(t) => t.to_string(),
        Err(_) => {
            set_last_error("config_toml is not valid UTF-8");
            if !status.is_null() {
                *status = QkvlabStatus::InvalidConfig;
            }
            return ptr::null_mut();
        }
    };
    run_from_config(RunConfig::from_toml_str(&text), status)
}

/// Runs a full generation from a TOML config file path.
///
/// # Safety
/// `path` must be a valid NUL-terminated string. `status` may be null.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_run_from_config_file(
    path: *const c_char,
    status: *mut QkvlabStatus,
) -> *mut QkvlabRun {
    if path.is_null() {
        set_last_error("path is null");
        if !status.is_null() {
            *status = QkvlabStatus::NullArgument;
        }
        return ptr::null_mut();
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(p) => Path::new(p).to_path_buf(),
        Err(_) => {
            set_last_error("path is not valid UTF-8");
            if !status.is_null() {
                *status = QkvlabStatus::InvalidConfig;
            }
            return ptr::null_mut();
        }
    };
    run_from_config(RunConfig::load(&path), status)
}

/// Frees a run handle. Null is a no-op.
///
/// # Safety
/// `run` must have come from a `qkvlab_run_from_*` call and not have
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_run_free(run: *mut QkvlabRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Copies the NUL-terminated run id into `buf`. Returns the id length
/// in bytes (excluding NUL); `buf` may be null to query.
///
/// # Safety
/// `run` must be a live handle; `buf` must point to `cap` writable
/// bytes when non-null.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_run_id(
    run: *const QkvlabRun,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if run.is_null() {
        return 0;
    }
    let id = (*run).result.run_id.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = id.len().min(cap - 1);
        ptr::copy_nonoverlapping(id.as_ptr(), buf.cast(), n);
        *buf.add(n) = 0;
    }
    id.len()
}

/// Number of generated images (batch slots) in the run.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_image_count(run: *const QkvlabRun) -> usize {
    if run.is_null() {
        return 0;
    }
    (*run).result.images.len()
}

/// Writes the width and height of one slot's image.
///
/// # Safety
/// `run` must be a live handle; `width`/`height` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_image_size(
    run: *const QkvlabRun,
    slot: usize,
    width: *mut u32,
    height: *mut u32,
) -> QkvlabStatus {
    if run.is_null() || width.is_null() || height.is_null() {
        set_last_error("null argument");
        return QkvlabStatus::NullArgument;
    }
    let images = &(*run).result.images;
    let Some(image) = images.get(slot) else {
        set_last_error("slot out of range");
        return QkvlabStatus::OutOfRange;
    };
    *height = image.pixels.shape()[0] as u32;
    *width = image.pixels.shape()[1] as u32;
    QkvlabStatus::Ok
}

/// Copies one slot's image as 8-bit interleaved RGB rows (the same
/// quantization the PPM writer uses). `buf` needs width*height*3 bytes.
///
/// # Safety
/// `run` must be a live handle; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_image_pixels_rgb8(
    run: *const QkvlabRun,
    slot: usize,
    buf: *mut u8,
    cap: usize,
) -> QkvlabStatus {
    if run.is_null() || buf.is_null() {
        set_last_error("null argument");
        return QkvlabStatus::NullArgument;
    }
    let images = &(*run).result.images;
    let Some(image) = images.get(slot) else {
        set_last_error("slot out of range");
        return QkvlabStatus::OutOfRange;
    };
    let data = image.pixels.data();
    if cap < data.len() {
        set_last_error("pixel buffer too small");
        return QkvlabStatus::BufferTooSmall;
    }
    for (i, &v) in data.iter().enumerate() {
        *buf.add(i) = quantize_u8(v);
    }
    QkvlabStatus::Ok
}

/// Copies the consistency metrics as a NUL-terminated JSON string.
/// Returns the JSON length in bytes (excluding NUL); `buf` may be null
/// to query the required capacity.
///
/// # Safety
/// `run` must be a live handle; `buf` must point to `cap` writable
/// bytes when non-null.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_metrics_json(
    run: *const QkvlabRun,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if run.is_null() {
        return 0;
    }
    let json = match serde_json::to_string(&(*run).result.metrics) {
        Ok(j) => j,
        Err(_) => return 0,
    };
    let bytes = json.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
        *buf.add(n) = 0;
    }
    bytes.len()
}

/// Number of captured attention-map records in the run.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_map_count(run: *const QkvlabRun) -> usize {
    if run.is_null() {
        return 0;
    }
    (*run).result.capture.maps.len()
}

/// Writes the run's full output tree (images, config echo, metrics,
/// archive when capture is on) under `root_dir/<run_id>`.
///
/// # Safety
/// `run` must be a live handle; `root_dir` a valid NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn qkvlab_save_outputs(
    run: *const QkvlabRun,
    root_dir: *const c_char,
) -> QkvlabStatus {
    if run.is_null() || root_dir.is_null() {
        set_last_error("null argument");
        return QkvlabStatus::NullArgument;
    }
    let root = match CStr::from_ptr(root_dir).to_str() {
        Ok(p) => Path::new(p).to_path_buf(),
        Err(_) => {
            set_last_error("root_dir is not valid UTF-8");
            return QkvlabStatus::InvalidConfig;
        }
    };
    let handle = &*run;
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        write_outputs(&handle.cfg, &handle.result, &root)
    }));
    match outcome {
        Ok(Ok(_)) => QkvlabStatus::Ok,
        Ok(Err(err)) => {
            set_last_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_last_error("internal panic");
            QkvlabStatus::Runtime
        }
    }
}
