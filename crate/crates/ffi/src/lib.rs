//! C ABI over the `danet` library.
//!
//! Handles are opaque pointers created by `*_load` / `danet_separate` and
//! released by the matching `*_free`. Every fallible call returns a
//! [`DanetStatus`]; on failure [`danet_last_error`] describes what went
//! wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use danet::attractor::MaskHead;
use danet::infer::{self, AttractorCodebook, SeparateOptions, SeparationResult, Strategy};
use danet::net::{self, Model};
use danet::signal::Waveform;
use danet::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DanetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numerical = 6,
    NoClusterStructure = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DanetStrategy {
    Kmeans = 0,
    Fixed = 1,
    Oracle = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DanetMaskHead {
    #[default]
    Sigmoid = 0,
    Softmax = 1,
}

/// Architecture summary of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DanetModelInfo {
    pub n_layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub n_freq: usize,
    pub threshold_pct: u32,
    pub head: DanetMaskHead,
}

/// Opaque trained model.
pub struct DanetModel(Model);

/// Opaque attractor codebook.
pub struct DanetCodebook(AttractorCodebook);

/// Opaque separation output.
pub struct DanetSeparation(SeparationResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> DanetStatus {
    match e {
        Error::Io { .. } | Error::Wav(_) => DanetStatus::Io,
        Error::Format { .. } | Error::Config { .. } => DanetStatus::Format,
        Error::ShapeMismatch(_) => DanetStatus::Shape,
        Error::NonFinite(_) | Error::Divergence(_) => DanetStatus::Numerical,
        Error::NoClusterStructure => DanetStatus::NoClusterStructure,
        _ => DanetStatus::InvalidArgument,
    }
}

fn fail(status: DanetStatus, msg: impl Into<String>) -> DanetStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DanetStatus, String)>) -> DanetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DanetStatus::Ok
        }
        Ok(Err((s, msg))) => fail(s, msg),
        Err(_) => fail(DanetStatus::Panic, "internal panic"),
    }
}

fn lib_err(e: Error) -> (DanetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DanetStatus, String) {
    (DanetStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (DanetStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (DanetStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn samples_arg(p: *const f64, len: usize, sample_rate: u32) -> Result<Waveform, (DanetStatus, String)> {
    if p.is_null() {
        return Err(null("samples"));
    }
    Waveform::new(std::slice::from_raw_parts(p, len).to_vec(), sample_rate).map_err(lib_err)
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn danet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn danet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn danet_model_load(path: *const c_char, out: *mut *mut DanetModel) -> DanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = net::load_checkpoint(path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DanetModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`danet_model_load`] and not be freed yet; null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn danet_model_free(model: *mut DanetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn danet_model_info(model: *const DanetModel, out: *mut DanetModelInfo) -> DanetStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = DanetModelInfo {
            n_layers: m.cfg.n_layers,
            hidden: m.cfg.hidden,
            embed_dim: m.cfg.embed_dim,
            n_freq: m.cfg.n_freq,
            threshold_pct: m.threshold_pct,
            head: match m.head {
                MaskHead::Sigmoid => DanetMaskHead::Sigmoid,
                MaskHead::Softmax => DanetMaskHead::Softmax,
            },
        };
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn danet_codebook_load(path: *const c_char, out: *mut *mut DanetCodebook) -> DanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cb = AttractorCodebook::load(path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DanetCodebook(cb)));
        Ok(())
    })
}

/// # Safety
/// `codebook` must come from [`danet_codebook_load`]; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn danet_codebook_free(codebook: *mut DanetCodebook) {
    if !codebook.is_null() {
        drop(Box::from_raw(codebook));
    }
}

/// Separates a mono mixture of `len` samples into `n_sources` signals.
///
/// `codebook` is required for [`DanetStrategy::Fixed`] and may otherwise be
/// null. `refs` is required for [`DanetStrategy::Oracle`]: an array of
/// `n_sources` pointers to `len` samples each.
///
/// # Safety
/// All non-null pointers must be valid for the stated lengths; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn danet_separate(
    model: *const DanetModel,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    n_sources: usize,
    strategy: DanetStrategy,
    codebook: *const DanetCodebook,
    refs: *const *const f64,
    seed: u64,
    out: *mut *mut DanetSeparation,
) -> DanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let mixture = samples_arg(samples, len, sample_rate)?;
        let references = if refs.is_null() {
            None
        } else {
            let ptrs = std::slice::from_raw_parts(refs, n_sources);
            Some(
                ptrs.iter()
                    .map(|&p| samples_arg(p, len, sample_rate))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        };
        let opts = SeparateOptions {
            n_sources,
            strategy: match strategy {
                DanetStrategy::Kmeans => Strategy::KMeans,
                DanetStrategy::Fixed => Strategy::Fixed,
                DanetStrategy::Oracle => Strategy::Oracle,
            },
            codebook: codebook.as_ref().map(|c| &c.0),
            references: references.as_deref(),
            seed,
        };
        let r = infer::separate(m, &mixture, &opts).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DanetSeparation(r)));
        Ok(())
    })
}

/// # Safety
/// `sep` must come from [`danet_separate`]; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn danet_separation_free(sep: *mut DanetSeparation) {
    if !sep.is_null() {
        drop(Box::from_raw(sep));
    }
}

/// Number of separated sources, 0 for a null handle.
///
/// # Safety
/// `sep` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn danet_separation_n_sources(sep: *const DanetSeparation) -> usize {
    sep.as_ref().map_or(0, |s| s.0.sources.len())
}

/// Samples per separated source, 0 for a null handle.
///
/// # Safety
/// `sep` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn danet_separation_len(sep: *const DanetSeparation) -> usize {
    sep.as_ref().map_or(0, |s| s.0.sources.first().map_or(0, |w| w.len()))
}

/// Embedding dimension of the attractors, 0 for a null handle.
///
/// # Safety
/// `sep` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn danet_separation_embed_dim(sep: *const DanetSeparation) -> usize {
    sep.as_ref().map_or(0, |s| s.0.attractors.a.ncols())
}

/// Copies source `index` into `buf`, which must hold
/// [`danet_separation_len`] values.
///
/// # Safety
/// `buf` must be valid for `buf_len` writes.
#[no_mangle]
pub unsafe extern "C" fn danet_separation_source(
    sep: *const DanetSeparation,
    index: usize,
    buf: *mut f64,
    buf_len: usize,
) -> DanetStatus {
    guard(|| {
        let s = &sep.as_ref().ok_or_else(|| null("separation"))?.0;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let w = s.sources.get(index).ok_or_else(|| {
            (
                DanetStatus::InvalidArgument,
                format!("source {index} of {}", s.sources.len()),
            )
        })?;
        if buf_len < w.len() {
            return Err((
                DanetStatus::BufferTooSmall,
                format!("buffer holds {buf_len} values, source has {}", w.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, w.len()).copy_from_slice(&w.samples);
        Ok(())
    })
}

/// Copies the `n_sources x embed_dim` attractors, row-major, into `buf`.
///
/// # Safety
/// `buf` must be valid for `buf_len` writes.
#[no_mangle]
pub unsafe extern "C" fn danet_separation_attractors(
    sep: *const DanetSeparation,
    buf: *mut f64,
    buf_len: usize,
) -> DanetStatus {
    guard(|| {
        let s = &sep.as_ref().ok_or_else(|| null("separation"))?.0;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let a = &s.attractors.a;
        if buf_len < a.len() {
            return Err((
                DanetStatus::BufferTooSmall,
                format!("buffer holds {buf_len} values, attractors need {}", a.len()),
            ));
        }
        for (d, v) in std::slice::from_raw_parts_mut(buf, a.len()).iter_mut().zip(a.iter()) {
            *d = *v;
        }
        Ok(())
    })
}

/// Scale-invariant SNR of `estimate` against `reference`, in dB.
///
/// # Safety
/// Both arrays must hold `len` values and `out_db` must be valid.
#[no_mangle]
pub unsafe extern "C" fn danet_si_snr(
    estimate: *const f64,
    reference: *const f64,
    len: usize,
    out_db: *mut f64,
) -> DanetStatus {
    guard(|| {
        let out = out_db.as_mut().ok_or_else(|| null("out_db"))?;
        let e = samples_arg(estimate, len, danet::signal::SAMPLE_RATE)?;
        let r = samples_arg(reference, len, danet::signal::SAMPLE_RATE)?;
        *out = danet::eval::si_snr(&e, &r).map_err(lib_err)?;
        Ok(())
    })
}
