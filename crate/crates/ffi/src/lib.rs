//! C ABI over `ppst`.
//!
//! Every function returns a [`PpstStatus`]. On failure the message is available from
//! [`ppst_last_error`] on the same thread. Strings returned through out-parameters are
//! owned by the caller and released with [`ppst_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ppst::cli::stages::Pipeline;
use ppst::cli::{Ctx, RunConfig};
use ppst::vision::ContrastiveEncoder;
use ppst::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Input = 4,
    Compatibility = 5,
    Numeric = 6,
    Protocol = 7,
    Unavailable = 8,
    Io = 9,
    Panic = 10,
}

/// Opaque generation pipeline: encoder, prefix mapper and a styled LM loaded from a run.
pub struct PpstPipeline {
    inner: Pipeline,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PpstStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => PpstStatus::Config,
            Error::Input { .. } | Error::Json(_) => PpstStatus::Input,
            Error::Compatibility(_) => PpstStatus::Compatibility,
            Error::Numeric(_) | Error::Tensor(_) => PpstStatus::Numeric,
            Error::Protocol { .. } => PpstStatus::Protocol,
            Error::Unavailable(_) => PpstStatus::Unavailable,
            Error::Io { .. } => PpstStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PpstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PpstStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PpstStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PpstStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(PpstStatus::InvalidUtf8, format!("`{name}` is not UTF-8: {e}")))
}

unsafe fn str_array<'a>(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure(PpstStatus::NullPointer, format!("`{name}` is null")));
    }
    (0..n).map(|i| str_arg(*p.add(i), &format!("{name}[{i}]"))).collect()
}

fn out_ptr<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(PpstStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn ppst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn ppst_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// ROUGE-L F-score of `candidate` against the best of `n_references` references.
///
/// # Safety
/// Pointers must be valid NUL-terminated strings; `references` must hold
/// `n_references` of them.
#[no_mangle]
pub unsafe extern "C" fn ppst_rouge_l(
    candidate: *const c_char,
    references: *const *const c_char,
    n_references: usize,
    out_f: *mut f64,
) -> PpstStatus {
    guard(|| {
        let cand = str_arg(candidate, "candidate")?;
        let refs = str_array(references, n_references, "references")?;
        out_ptr(out_f, "out_f")?;
        *out_f = ppst::metrics::rouge_l_text(cand, &refs).f;
        Ok(())
    })
}

/// ChrF++ of `candidate` against the best of `n_references` references, in [0, 1].
///
/// # Safety
/// As for [`ppst_rouge_l`].
#[no_mangle]
pub unsafe extern "C" fn ppst_chrf_pp(
    candidate: *const c_char,
    references: *const *const c_char,
    n_references: usize,
    out_score: *mut f64,
) -> PpstStatus {
    guard(|| {
        let cand = str_arg(candidate, "candidate")?;
        let refs = str_array(references, n_references, "references")?;
        out_ptr(out_score, "out_score")?;
        *out_score = ppst::metrics::chrf_pp(cand, &refs);
        Ok(())
    })
}

/// Opens the run described by the TOML file at `config_path` and loads the model for
/// `style` (a trained style, `non-styled` or `plain`).
///
/// # Safety
/// `config_path` and `style` must be valid strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ppst_pipeline_open(
    config_path: *const c_char,
    style: *const c_char,
    out: *mut *mut PpstPipeline,
) -> PpstStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let style = str_arg(style, "style")?;
        out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let cfg = RunConfig::load(Path::new(path))?;
        let inner = Ctx::read_only(cfg)?.pipeline(style)?;
        *out = Box::into_raw(Box::new(PpstPipeline { inner }));
        Ok(())
    })
}

/// Generates a story for one image and returns the record as JSON in `out_json`.
/// An undecodable image still succeeds, with the record's `error` field set.
///
/// # Safety
/// `pipeline` must come from [`ppst_pipeline_open`]; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ppst_pipeline_generate(
    pipeline: *const PpstPipeline,
    image_path: *const c_char,
    out_json: *mut *mut c_char,
) -> PpstStatus {
    guard(|| {
        let p = pipeline
            .as_ref()
            .ok_or_else(|| Failure(PpstStatus::NullPointer, "`pipeline` is null".into()))?;
        let path = Path::new(str_arg(image_path, "image_path")?);
        out_ptr(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        let image_ref = path.file_name().map_or_else(|| path.to_string_lossy(), |n| n.to_string_lossy());
        let record = p.inner.generate_record(path, &image_ref)?;
        *out_json = to_c_string(ppst::io::to_json_string(&record)?);
        Ok(())
    })
}

/// CLIPScore of `text` for the image at `image_path`, using the pipeline's encoder.
///
/// # Safety
/// As for [`ppst_pipeline_generate`]; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ppst_pipeline_clip_score(
    pipeline: *const PpstPipeline,
    image_path: *const c_char,
    text: *const c_char,
    out_score: *mut f64,
) -> PpstStatus {
    guard(|| {
        let p = pipeline
            .as_ref()
            .ok_or_else(|| Failure(PpstStatus::NullPointer, "`pipeline` is null".into()))?;
        let path = str_arg(image_path, "image_path")?;
        let text = str_arg(text, "text")?;
        out_ptr(out_score, "out_score")?;
        let enc = &p.inner.encoder;
        let img = enc.encode_image(Path::new(path), path)?;
        let txt = enc.encode_text(text)?;
        *out_score = ppst::metrics::clip_score(&img, &txt, ppst::metrics::CLIP_SCORE_WEIGHT)?;
        Ok(())
    })
}

/// Releases a pipeline. NULL is ignored.
///
/// # Safety
/// `pipeline` must come from [`ppst_pipeline_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ppst_pipeline_free(pipeline: *mut PpstPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ppst_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
