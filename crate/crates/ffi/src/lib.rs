//! C API over exported pcnn models.
//!
//! Every fallible function returns a [`PcnnStatus`]; on failure the message
//! is available from [`pcnn_last_error`] on the same thread until the next
//! call. Models are opaque handles created by `pcnn_model_load*` and released
//! with [`pcnn_model_free`]. A loaded model is read-only, so concurrent
//! `pcnn_model_forward` calls on one handle are safe.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pcnn::export::InferenceModel;
use pcnn::memory::{describe_arch, memory_report};
use pcnn::tensor::{Shape4, Tensor4};
use pcnn::PcnnError;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcnnStatus {
    PcnnOk = 0,
    /// A required pointer argument was null.
    PcnnErrNull = 1,
    /// A string argument was not valid UTF-8 or a size was out of range.
    PcnnErrInvalidArgument = 2,
    PcnnErrIo = 3,
    /// Malformed or unsupported model file.
    PcnnErrFormat = 4,
    /// Checksum mismatch.
    PcnnErrIntegrity = 5,
    /// Input or output buffer does not match the model's shapes.
    PcnnErrShape = 6,
    PcnnErrUnknownArch = 7,
    /// Any other library error.
    PcnnErrInternal = 8,
    /// A panic was caught at the boundary.
    PcnnErrPanic = 9,
}

/// Storage totals in bits.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PcnnMemoryReport {
    pub full_bits: u64,
    pub compressed_bits: u64,
    pub ratio: f64,
}

/// Opaque model handle.
pub struct PcnnModel {
    inner: InferenceModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PcnnError) -> PcnnStatus {
    match e {
        PcnnError::Io { .. } => PcnnStatus::PcnnErrIo,
        PcnnError::Format(_) | PcnnError::Pack { .. } => PcnnStatus::PcnnErrFormat,
        PcnnError::Integrity { .. } => PcnnStatus::PcnnErrIntegrity,
        PcnnError::Shape { .. } => PcnnStatus::PcnnErrShape,
        PcnnError::UnknownArch(_) => PcnnStatus::PcnnErrUnknownArch,
        _ => PcnnStatus::PcnnErrInternal,
    }
}

fn fail(status: PcnnStatus, msg: impl Into<String>) -> PcnnStatus {
    set_error(msg.into());
    status
}

/// Run `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), PcnnStatus>) -> PcnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PcnnStatus::PcnnOk
        }
        Ok(Err(s)) => s,
        Err(_) => fail(PcnnStatus::PcnnErrPanic, "internal panic"),
    }
}

fn lib_err(e: PcnnError) -> PcnnStatus {
    fail(status_of(&e), format!("{}: {e}", e.category()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PcnnStatus> {
    if p.is_null() {
        return Err(fail(PcnnStatus::PcnnErrNull, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PcnnStatus::PcnnErrInvalidArgument, format!("{what} is not UTF-8")))
}

fn store_model(model: InferenceModel, out: *mut *mut PcnnModel) {
    let boxed = Box::new(PcnnModel { inner: model });
    // SAFETY: callers check `out` for null before reaching here.
    unsafe { *out = Box::into_raw(boxed) };
}

/// Load a model (or checkpoint) file. On success `*out` receives a handle
/// that must be released with [`pcnn_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_load(path: *const c_char, out: *mut *mut PcnnModel) -> PcnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PcnnStatus::PcnnErrNull, "out is null"));
        }
        *out = ptr::null_mut();
        let p = str_arg(path, "path")?;
        let m = pcnn::export::import_model(Path::new(p)).map_err(lib_err)?;
        store_model(m, out);
        Ok(())
    })
}

/// Load a model from an in-memory buffer.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_load_bytes(data: *const u8, len: usize, out: *mut *mut PcnnModel) -> PcnnStatus {
    guard(|| {
        if out.is_null() || data.is_null() {
            return Err(fail(PcnnStatus::PcnnErrNull, "data or out is null"));
        }
        *out = ptr::null_mut();
        let bytes = std::slice::from_raw_parts(data, len);
        let m = InferenceModel::from_bytes(bytes).map_err(lib_err)?;
        store_model(m, out);
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `pcnn_model_load*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_free(model: *mut PcnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_num_classes(model: *const PcnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Per-sample input dimensions.
///
/// # Safety
/// `model` must be a live handle; `c`, `h`, `w` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_input_shape(model: *const PcnnModel, c: *mut usize, h: *mut usize, w: *mut usize) -> PcnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(PcnnStatus::PcnnErrNull, "model is null"))?;
        if c.is_null() || h.is_null() || w.is_null() {
            return Err(fail(PcnnStatus::PcnnErrNull, "shape pointer is null"));
        }
        let (ci, hi, wi) = m.inner.header.input;
        *c = ci;
        *h = hi;
        *w = wi;
        Ok(())
    })
}

/// Forward `batch` samples laid out `batch x c x h x w` (already
/// normalized) and write `batch x classes` logits.
///
/// # Safety
/// `input` must hold `batch*c*h*w` floats and `logits` `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn pcnn_model_forward(
    model: *const PcnnModel,
    input: *const f32,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> PcnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(PcnnStatus::PcnnErrNull, "model is null"))?;
        if input.is_null() || logits.is_null() {
            return Err(fail(PcnnStatus::PcnnErrNull, "input or logits is null"));
        }
        let (c, h, w) = m.inner.header.input;
        let classes = m.inner.num_classes();
        if logits_len != batch * classes {
            return Err(fail(
                PcnnStatus::PcnnErrShape,
                format!("logits buffer holds {logits_len} floats, need {}", batch * classes),
            ));
        }
        let shape = Shape4::new(batch, c, h, w);
        let x = Tensor4::new(shape, std::slice::from_raw_parts(input, shape.len()).to_vec()).map_err(lib_err)?;
        let y = m.inner.forward(&x).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Storage report for a named architecture (`resnet18-like`) with `j` projections.
///
/// # Safety
/// `arch` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcnn_memory_report(arch: *const c_char, j: usize, out: *mut PcnnMemoryReport) -> PcnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(PcnnStatus::PcnnErrNull, "out is null"));
        }
        if j == 0 {
            return Err(fail(PcnnStatus::PcnnErrInvalidArgument, "j must be >= 1"));
        }
        let a = str_arg(arch, "arch")?;
        let r = memory_report(&describe_arch(a, j).map_err(lib_err)?);
        *out = PcnnMemoryReport {
            full_bits: r.full_total,
            compressed_bits: r.compressed_total,
            ratio: r.ratio,
        };
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn pcnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pcnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
