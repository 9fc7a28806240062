//! C ABI over the deep-disaster library.
//!
//! Every fallible call returns a [`DdStatus`]; on failure the message is
//! available from [`dd_last_error`] on the same thread until the next call.
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Pixel buffers are planar `n x channels x
//! size x size` doubles in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use deep_disaster::config::{parse_config, ExperimentConfig};
use deep_disaster::data::ImageBatch;
use deep_disaster::evaluation::auc_roc;
use deep_disaster::localization::{saliency, SaliencyMethod, SaliencyModel};
use deep_disaster::model::Role;
use deep_disaster::scoring::{estimate_threshold, score_sample, ScoringModel};
use deep_disaster::training::{load_checkpoint_as, Checkpoint};
use deep_disaster::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdStatus {
    DdOk = 0,
    /// A required pointer was null.
    DdErrNull = 1,
    /// Arguments out of range or inconsistent.
    DdErrInvalid = 2,
    DdErrIo = 3,
    DdErrConfig = 4,
    DdErrCheckpoint = 5,
    DdErrShape = 6,
    /// Non-finite or undefined numeric result.
    DdErrNumeric = 7,
    /// Internal error; the library state is unchanged.
    DdErrPanic = 8,
    /// Output buffer too small; the required length is reported.
    DdErrBufferTooSmall = 9,
}

/// Saliency method selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdSaliencyMethod {
    DdVanilla = 0,
    DdSmoothgrad = 1,
    DdGuided = 2,
}

/// Score components of one image.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DdScoreParts {
    pub l_term: f64,
    pub r_term: f64,
    pub v_term: f64,
    pub d_term: f64,
    pub d_weighted: f64,
    pub raw: f64,
}

/// Opaque experiment configuration.
pub struct DdConfig {
    inner: ExperimentConfig,
}

/// Opaque distilled student together with its teacher.
pub struct DdModel {
    student: Checkpoint,
    teacher: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DdStatus {
    match e {
        Error::Config(_) | Error::InvalidConfig(_) => DdStatus::DdErrConfig,
        Error::Io { .. } => DdStatus::DdErrIo,
        Error::Checkpoint { .. } | Error::RoleMismatch { .. } => DdStatus::DdErrCheckpoint,
        Error::Shape(_) => DdStatus::DdErrShape,
        Error::ZeroNorm(_) | Error::NonFinite { .. } => DdStatus::DdErrNumeric,
        _ => DdStatus::DdErrInvalid,
    }
}

/// Run `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (DdStatus, String)>) -> DdStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdStatus::DdOk,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DdStatus::DdErrPanic
        }
    }
}

fn lib(e: Error) -> (DdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DdStatus, String) {
    (DdStatus::DdErrNull, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (DdStatus::DdErrInvalid, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (DdStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copy `s` with a terminating NUL into `buf`; `needed` receives the
/// required capacity including the NUL.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), (DdStatus, String)> {
    let len = s.len() + 1;
    if !needed.is_null() {
        *needed = len;
    }
    if buf.is_null() || cap < len {
        return Err((DdStatus::DdErrBufferTooSmall, format!("buffer needs {len} bytes")));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread (empty if none). Valid
/// until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library name and version, NUL-terminated, static.
#[no_mangle]
pub extern "C" fn dd_version() -> *const c_char {
    concat!("deep-disaster ", env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// New configuration holding the defaults.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn dd_config_default(out: *mut *mut DdConfig) -> DdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(DdConfig { inner: ExperimentConfig::default() }));
        Ok(())
    })
}

/// Parse and validate a TOML config document; omitted keys keep defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_config_parse(toml: *const c_char, out: *mut *mut DdConfig) -> DdStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = parse_config(text).and_then(ExperimentConfig::validated).map_err(lib)?;
        *out = Box::into_raw(Box::new(DdConfig { inner }));
        Ok(())
    })
}

/// Render the config as TOML into `buf`.
///
/// # Safety
/// `config` must come from this library; `buf` must hold `cap` bytes;
/// `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn dd_config_to_toml(
    config: *const DdConfig,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DdStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        write_str(&c.inner.to_config_string(), buf, cap, needed)
    })
}

/// Short content hash of the config, as hex.
///
/// # Safety
/// As for [`dd_config_to_toml`].
#[no_mangle]
pub unsafe extern "C" fn dd_config_hash(
    config: *const DdConfig,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DdStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        write_str(&c.inner.hash(), buf, cap, needed)
    })
}

/// # Safety
/// `config` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_config_free(config: *mut DdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Load a distilled student and its teacher from checkpoint files.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_model_load(
    student_path: *const c_char,
    teacher_path: *const c_char,
    out: *mut *mut DdModel,
) -> DdStatus {
    guard(|| {
        let s = str_arg(student_path, "student_path")?;
        let t = str_arg(teacher_path, "teacher_path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let student = load_checkpoint_as(Path::new(s), Role::Student).map_err(lib)?;
        let teacher = load_checkpoint_as(Path::new(t), Role::Teacher).map_err(lib)?;
        if student.alphas.is_none() {
            return Err((DdStatus::DdErrCheckpoint, "student checkpoint has no calibrated alpha".into()));
        }
        *out = Box::into_raw(Box::new(DdModel { student, teacher }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dd_model_free(model: *mut DdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input geometry the model expects.
///
/// # Safety
/// `model` must come from this library; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn dd_model_input_shape(
    model: *const DdModel,
    image_size: *mut usize,
    channels: *mut usize,
) -> DdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if !image_size.is_null() {
            *image_size = m.student.config.image_size;
        }
        if !channels.is_null() {
            *channels = m.student.config.channels;
        }
        Ok(())
    })
}

fn batch(m: &DdModel, pixels: &[f64], n: usize) -> Result<ImageBatch, (DdStatus, String)> {
    let c = &m.student.config;
    let t = Tensor::new(vec![n, c.channels, c.image_size, c.image_size], pixels.to_vec()).map_err(lib)?;
    Ok(ImageBatch { pixels: t, ids: (0..n).map(|i| i.to_string()).collect() })
}

/// Anomaly scores of `n` images. `raw_out` receives `n` raw scores;
/// `parts_out`, if not null, `n` component records.
///
/// # Safety
/// `pixels` must hold `n * channels * size * size` doubles; outputs must
/// hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn dd_model_score(
    model: *const DdModel,
    pixels: *const f64,
    n: usize,
    raw_out: *mut f64,
    parts_out: *mut DdScoreParts,
) -> DdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if n == 0 {
            return Err((DdStatus::DdErrInvalid, "n must be positive".into()));
        }
        if raw_out.is_null() {
            return Err(null("raw_out"));
        }
        let c = &m.student.config;
        let px = slice_arg(pixels, n * c.channels * c.image_size * c.image_size, "pixels")?;
        let b = batch(m, px, n)?;
        let sm = ScoringModel::distilled(&m.student, &m.teacher.networks).map_err(lib)?;
        let scores = score_sample(&sm, &b).map_err(lib)?;
        for (i, s) in scores.iter().enumerate() {
            *raw_out.add(i) = s.raw;
            if !parts_out.is_null() {
                *parts_out.add(i) = DdScoreParts {
                    l_term: s.l_term,
                    r_term: s.r_term,
                    v_term: s.v_term,
                    d_term: s.d_term,
                    d_weighted: s.d_weighted,
                    raw: s.raw,
                };
            }
        }
        Ok(())
    })
}

/// Normalized `size x size` saliency map of one image.
///
/// # Safety
/// `pixels` must hold one image; `map_out` must hold `size * size` doubles.
#[no_mangle]
pub unsafe extern "C" fn dd_model_saliency(
    model: *const DdModel,
    method: DdSaliencyMethod,
    pixels: *const f64,
    seed: u64,
    map_out: *mut f64,
) -> DdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if map_out.is_null() {
            return Err(null("map_out"));
        }
        let c = &m.student.config;
        let px = slice_arg(pixels, c.channels * c.image_size * c.image_size, "pixels")?;
        let b = batch(m, px, 1)?;
        let alphas = m.student.alphas.ok_or_else(|| (DdStatus::DdErrCheckpoint, "missing alpha".to_string()))?;
        let sm = SaliencyModel { config: c, student: &m.student.networks, teacher: Some(&m.teacher.networks), alphas };
        let method = match method {
            DdSaliencyMethod::DdVanilla => SaliencyMethod::Vanilla,
            DdSaliencyMethod::DdSmoothgrad => SaliencyMethod::SmoothGrad,
            DdSaliencyMethod::DdGuided => SaliencyMethod::Guided,
        };
        let map = saliency(&sm, method, "0", &b.pixels, seed).map_err(lib)?;
        std::ptr::copy_nonoverlapping(map.map.as_ptr(), map_out, map.map.len());
        Ok(())
    })
}

/// AUC-ROC of `n` scores against binary labels, ties counting one half.
///
/// # Safety
/// `scores` and `labels` must hold `n` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dd_auc_roc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> DdStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = auc_roc(s, l).map_err(lib)?;
        Ok(())
    })
}

/// Threshold maximizing Youden's J; scores at or above it are damage.
///
/// # Safety
/// As for [`dd_auc_roc`].
#[no_mangle]
pub unsafe extern "C" fn dd_estimate_threshold(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> DdStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = estimate_threshold(s, l).map_err(lib)?.value;
        Ok(())
    })
}
