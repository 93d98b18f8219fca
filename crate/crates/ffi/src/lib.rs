//! C ABI for loading a frozen backbone, its adapter registry and domain
//! classifier, and answering questions about images.
//!
//! Every function returns a [`CatchStatus`]; on failure the message is kept
//! per thread and can be read with [`catch_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use catch_core::backbone::{argmax, Backbone, BackboneConfig};
use catch_core::hooks::Injection;
use catch_core::router::{AdapterRegistry, DomainClassifier};
use catch_core::synthdata::Image;
use catch_core::tensor::ParamSet;
use catch_core::{vocab, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CatchStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Lookup = 5,
    Io = 6,
    Format = 7,
    Checksum = 8,
    State = 9,
    Contract = 10,
    BufferTooSmall = 11,
    Panic = 12,
    Other = 13,
}

/// Frozen backbone.
pub struct CatchBackbone(Backbone);

/// Per-domain adapter pairs.
pub struct CatchRegistry(AdapterRegistry);

/// Image-only domain classifier.
pub struct CatchClassifier(DomainClassifier);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> CatchStatus {
    match e {
        Error::Shape { .. } | Error::Index { .. } => CatchStatus::Shape,
        Error::Config(_) => CatchStatus::Config,
        Error::Lookup { .. } => CatchStatus::Lookup,
        Error::Io { .. } | Error::MissingArtifact { .. } => CatchStatus::Io,
        Error::Format(_) | Error::Parse { .. } | Error::Json(_) => CatchStatus::Format,
        Error::Checksum { .. } => CatchStatus::Checksum,
        Error::State(_) | Error::Conflict(_) => CatchStatus::State,
        Error::Contract(_) => CatchStatus::Contract,
    }
}

enum Fail {
    Status(CatchStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CatchStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CatchStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            CatchStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(CatchStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(CatchStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `s` plus a NUL into `buf`; fails without writing if it does not fit.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null("buf"));
    }
    if s.len() + 1 > len {
        return Err(Fail::Status(
            CatchStatus::BufferTooSmall,
            format!("need {} bytes, buffer has {len}", s.len() + 1),
        ));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

unsafe fn image_arg(pixels: *const f64, n: usize) -> Result<Image, Fail> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let side = (n as f64).sqrt() as usize;
    if side * side != n {
        return Err(Fail::Status(CatchStatus::Shape, format!("{n} pixels do not form a square image")));
    }
    Ok(Image::new(side, std::slice::from_raw_parts(pixels, n).to_vec())?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to fit). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn catch_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Randomly initialised backbone with default sizes, frozen.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn catch_backbone_init(seed: u64, out: *mut *mut CatchBackbone) -> CatchStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut bb = Backbone::init(BackboneConfig {
            init_seed: seed,
            ..BackboneConfig::default()
        })?;
        bb.freeze();
        *out = Box::into_raw(Box::new(CatchBackbone(bb)));
        Ok(())
    })
}

/// Loads a backbone checkpoint; the result is frozen.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn catch_backbone_load(path: *const c_char, out: *mut *mut CatchBackbone) -> CatchStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CatchBackbone(Backbone::load(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from a backbone constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn catch_backbone_free(handle: *mut CatchBackbone) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Hex SHA-256 of the parameter bytes (65 bytes with the NUL).
///
/// # Safety
/// `handle` must be a live backbone and `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn catch_backbone_checksum(
    handle: *const CatchBackbone,
    buf: *mut c_char,
    len: usize,
) -> CatchStatus {
    guard(|| {
        let bb = handle.as_ref().ok_or_else(|| null("handle"))?;
        write_str(&bb.0.checksum(), buf, len)
    })
}

/// Loads `registry.json` and its adapter checkpoints from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string, `backbone` live, `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn catch_registry_load(
    dir: *const c_char,
    backbone: *const CatchBackbone,
    out: *mut *mut CatchRegistry,
) -> CatchStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let bb = backbone.as_ref().ok_or_else(|| null("backbone"))?;
        let out = out_arg(out, "out")?;
        let (reg, _) = AdapterRegistry::load(&dir, bb.0.config())?;
        *out = Box::into_raw(Box::new(CatchRegistry(reg)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`catch_registry_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn catch_registry_free(handle: *mut CatchRegistry) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be a live registry.
#[no_mangle]
pub unsafe extern "C" fn catch_registry_len(handle: *const CatchRegistry) -> usize {
    handle.as_ref().map_or(0, |r| r.0.len())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn catch_classifier_load(path: *const c_char, out: *mut *mut CatchClassifier) -> CatchStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(CatchClassifier(DomainClassifier::load(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`catch_classifier_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn catch_classifier_free(handle: *mut CatchClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Predicted domain of a square row-major image; writes its name into `buf`.
///
/// # Safety
/// `pixels` must hold `n_pixels` values; `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn catch_classify(
    handle: *const CatchClassifier,
    pixels: *const f64,
    n_pixels: usize,
    buf: *mut c_char,
    len: usize,
) -> CatchStatus {
    guard(|| {
        let clf = handle.as_ref().ok_or_else(|| null("handle"))?;
        let image = image_arg(pixels, n_pixels)?;
        let probs = clf.0.classify(&image)?;
        write_str(&clf.0.domains[argmax(&probs)].name, buf, len)
    })
}

/// Greedy answer to `question` about the image. With both `registry` and
/// `classifier` given, the classifier's top domain selects the adapters;
/// with either null the frozen backbone answers alone.
///
/// # Safety
/// Handles must be live or null, `question` NUL-terminated, `pixels` valid
/// for `n_pixels` values and `buf` for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn catch_answer(
    backbone: *const CatchBackbone,
    registry: *const CatchRegistry,
    classifier: *const CatchClassifier,
    pixels: *const f64,
    n_pixels: usize,
    question: *const c_char,
    buf: *mut c_char,
    len: usize,
) -> CatchStatus {
    guard(|| {
        let bb = &backbone.as_ref().ok_or_else(|| null("backbone"))?.0;
        let image = image_arg(pixels, n_pixels)?;
        let q = vocab::encode(str_arg(question, "question")?)?;
        let out = match (registry.as_ref(), classifier.as_ref()) {
            (Some(reg), Some(clf)) => {
                let probs = clf.0.classify(&image)?;
                let pair = reg.0.get(&clf.0.domains[argmax(&probs)])?;
                bb.generate_greedy(&image, &q, &Injection::Inline(pair))?
            }
            _ => bb.generate_greedy(&image, &q, &Injection::None)?,
        };
        write_str(&vocab::decode(&out.answer.ids), buf, len)
    })
}

/// Library version, NUL-terminated and static.
#[no_mangle]
pub extern "C" fn catch_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
