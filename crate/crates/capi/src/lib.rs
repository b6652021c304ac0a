//! C ABI over the core pipeline artifacts.
//!
//! Everything crosses the boundary through opaque handles and integer
//! status codes. On failure a function returns a nonzero [`TsdfStatus`]
//! and stores a human-readable message retrievable per thread via
//! [`tsdf_last_error_message`]. All pointers are borrowed for the duration
//! of the call unless the function documents otherwise; handles must be
//! released with the matching `_free` function exactly once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tsdf_core::aggregator::AggregatorModel;
use tsdf_core::checkpoint::{load_aggregator, load_encoder};
use tsdf_core::data::{EmbeddingStore, Image};
use tsdf_core::harness::preprocessed_tensor;
use tsdf_core::mae::EncoderModel;
use tsdf_core::tensor::{Tensor, TensorError};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(non_camel_case_types)]
pub enum TsdfStatus {
    /// Success.
    TSDF_OK = 0,
    /// A pointer was null or an argument was out of range.
    TSDF_ERR_ARGUMENT = 1,
    /// A file or its contents could not be used (missing, corrupt,
    /// wrong kind, shape mismatch).
    TSDF_ERR_DATA = 2,
    /// A numerical failure (non-finite value) inside the model.
    TSDF_ERR_NUMERIC = 3,
    /// An internal invariant failed; the message has details.
    TSDF_ERR_INTERNAL = 4,
}

use TsdfStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let sanitized = CString::new(msg.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

struct Failure {
    status: TsdfStatus,
    msg: String,
}

impl From<TensorError> for Failure {
    fn from(err: TensorError) -> Self {
        let status = match err {
            TensorError::NonFinite { .. }
            | TensorError::BackwardAlreadyRun
            | TensorError::NonScalarLoss(_) => TSDF_ERR_NUMERIC,
            _ => TSDF_ERR_DATA,
        };
        let mut msg = err.to_string();
        let mut source = std::error::Error::source(&err);
        while let Some(cause) = source {
            msg.push_str(": ");
            msg.push_str(&cause.to_string());
            source = cause.source();
        }
        Failure { status, msg }
    }
}

fn argument(msg: &str) -> Failure {
    Failure { status: TSDF_ERR_ARGUMENT, msg: msg.to_string() }
}

/// Run a fallible body, translating errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> TsdfStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => TSDF_OK,
        Ok(Err(failure)) => {
            set_error(failure.msg);
            failure.status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("internal panic: {msg}"));
            TSDF_ERR_INTERNAL
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(argument(&format!("{what} is null")));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| argument(&format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| argument(&format!("{what} is null")))
}

unsafe fn handle_arg<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| argument(&format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(argument(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Pretrained image encoder loaded from a checkpoint.
pub struct TsdfEncoder {
    inner: EncoderModel<f32>,
}

/// Trained sequence aggregator loaded from a checkpoint.
pub struct TsdfAggregator {
    inner: AggregatorModel<f32>,
}

/// Read-only embedding cache loaded from disk.
pub struct TsdfStore {
    inner: EmbeddingStore,
}

/// Message describing the most recent failure on this thread, empty if
/// none. The pointer stays valid until the next failing call on the same
/// thread; copy it if you need to keep it.
#[no_mangle]
pub extern "C" fn tsdf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Version of the library as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsdf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load an encoder checkpoint from `path` into `*out`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_encoder_load(
    path: *const c_char,
    out: *mut *mut TsdfEncoder,
) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = load_encoder(path)?;
        *out = Box::into_raw(Box::new(TsdfEncoder { inner }));
        Ok(())
    })
}

/// Release an encoder handle. Passing null is a no-op.
///
/// # Safety
/// `enc` must be null or a pointer returned by [`tsdf_encoder_load`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn tsdf_encoder_free(enc: *mut TsdfEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Dimension of the embeddings this encoder produces.
///
/// # Safety
/// `enc` must be a live encoder handle; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_encoder_dim(
    enc: *const TsdfEncoder,
    out: *mut usize,
) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let enc = handle_arg(enc, "encoder")?;
        *out = enc.inner.cfg.encoder_dim;
        Ok(())
    })
}

/// Side length of the square input the encoder was trained on. Images of
/// other sizes are accepted by [`tsdf_encoder_embed`] and resized.
///
/// # Safety
/// `enc` must be a live encoder handle; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_encoder_image_size(
    enc: *const TsdfEncoder,
    out: *mut usize,
) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let enc = handle_arg(enc, "encoder")?;
        *out = enc.inner.cfg.image_size;
        Ok(())
    })
}

/// Embed one grayscale image.
///
/// `pixels` is row-major, `height * width` values in [0, 1]. The image is
/// resized to the encoder's input side, normalized, and embedded; the
/// embedding is written to `out`, which must hold [`tsdf_encoder_dim`]
/// floats (`out_len` says how many it holds).
///
/// # Safety
/// `enc` must be a live encoder handle; `pixels` must point to
/// `height * width` floats; `out` must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn tsdf_encoder_embed(
    enc: *const TsdfEncoder,
    pixels: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> TsdfStatus {
    guard(|| {
        let enc = handle_arg(enc, "encoder")?;
        let pixels = slice_arg(pixels, height.saturating_mul(width), "pixels")?;
        if out.is_null() {
            return Err(argument("out is null"));
        }
        let dim = enc.inner.cfg.encoder_dim;
        if out_len < dim {
            return Err(argument(&format!("out holds {out_len} floats, embedding needs {dim}")));
        }
        let image = Image::new(height, width, pixels.to_vec())?;
        let tensor = preprocessed_tensor(&image, enc.inner.cfg.image_size)?;
        let embedding = enc.inner.extract_embedding(&tensor)?;
        std::ptr::copy_nonoverlapping(embedding.data().as_ptr(), out, dim);
        Ok(())
    })
}

/// Load an aggregator checkpoint from `path` into `*out`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_aggregator_load(
    path: *const c_char,
    out: *mut *mut TsdfAggregator,
) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = load_aggregator(path)?;
        *out = Box::into_raw(Box::new(TsdfAggregator { inner }));
        Ok(())
    })
}

/// Release an aggregator handle. Passing null is a no-op.
///
/// # Safety
/// `agg` must be null or a pointer returned by [`tsdf_aggregator_load`]
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn tsdf_aggregator_free(agg: *mut TsdfAggregator) {
    if !agg.is_null() {
        drop(Box::from_raw(agg));
    }
}

/// Per-frame embedding dimension the aggregator expects.
///
/// # Safety
/// `agg` must be a live aggregator handle; `out` must be a valid
/// destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_aggregator_dim(
    agg: *const TsdfAggregator,
    out: *mut usize,
) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let agg = handle_arg(agg, "aggregator")?;
        *out = agg.inner.cfg.d;
        Ok(())
    })
}

/// Score one visit sequence.
///
/// `frames` is row-major, `n_frames * dim` floats: one embedding per visit
/// in acquisition order, `dim` matching [`tsdf_aggregator_dim`]. On
/// success `*class_out` is the predicted class index and `*prob_out` the
/// probability of class 1 (progression).
///
/// # Safety
/// `agg` must be a live aggregator handle; `frames` must point to
/// `n_frames * dim` floats; `class_out` and `prob_out` must be valid
/// destinations.
#[no_mangle]
pub unsafe extern "C" fn tsdf_aggregator_predict(
    agg: *const TsdfAggregator,
    frames: *const f32,
    n_frames: usize,
    dim: usize,
    class_out: *mut u32,
    prob_out: *mut f64,
) -> TsdfStatus {
    guard(|| {
        let class_out = out_arg(class_out, "class_out")?;
        let prob_out = out_arg(prob_out, "prob_out")?;
        let agg = handle_arg(agg, "aggregator")?;
        if n_frames == 0 {
            return Err(argument("n_frames is zero"));
        }
        if dim != agg.inner.cfg.d {
            return Err(argument(&format!(
                "frame dimension {dim} does not match the model's {}",
                agg.inner.cfg.d
            )));
        }
        let frames = slice_arg(frames, n_frames.saturating_mul(dim), "frames")?;
        let tensor = Tensor::new(vec![n_frames, dim], frames.to_vec())?;
        let (class, p1) = agg.inner.predict(&tensor)?;
        *class_out = class as u32;
        *prob_out = p1;
        Ok(())
    })
}

/// Load an embedding store from `path` into `*out`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_store_open(
    path: *const c_char,
    out: *mut *mut TsdfStore,
) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = EmbeddingStore::read(path)?;
        *out = Box::into_raw(Box::new(TsdfStore { inner }));
        Ok(())
    })
}

/// Release a store handle. Passing null is a no-op.
///
/// # Safety
/// `store` must be null or a pointer returned by [`tsdf_store_open`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn tsdf_store_free(store: *mut TsdfStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of embeddings in the store.
///
/// # Safety
/// `store` must be a live store handle; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_store_len(store: *const TsdfStore, out: *mut usize) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let store = handle_arg(store, "store")?;
        *out = store.inner.len();
        Ok(())
    })
}

/// Dimension of each embedding in the store.
///
/// # Safety
/// `store` must be a live store handle; `out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_store_dim(store: *const TsdfStore, out: *mut usize) -> TsdfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let store = handle_arg(store, "store")?;
        *out = store.inner.dim();
        Ok(())
    })
}

/// Copy the embedding stored under `id` into `out` (`out_len` floats of
/// capacity; [`tsdf_store_dim`] are needed). Unknown ids are a data error.
///
/// # Safety
/// `store` must be a live store handle; `id` must be NUL-terminated; `out`
/// must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn tsdf_store_get(
    store: *const TsdfStore,
    id: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> TsdfStatus {
    guard(|| {
        let store = handle_arg(store, "store")?;
        if id.is_null() {
            return Err(argument("id is null"));
        }
        let id = CStr::from_ptr(id).to_str().map_err(|_| argument("id is not valid UTF-8"))?;
        if out.is_null() {
            return Err(argument("out is null"));
        }
        let dim = store.inner.dim();
        if out_len < dim {
            return Err(argument(&format!("out holds {out_len} floats, embedding needs {dim}")));
        }
        let emb = store.inner.get(id).ok_or(Failure {
            status: TSDF_ERR_DATA,
            msg: format!("store has no embedding for id {id}"),
        })?;
        std::ptr::copy_nonoverlapping(emb.as_ptr(), out, dim);
        Ok(())
    })
}

/// Copy the id at `index` (in sorted order) into `buf` as a NUL-terminated
/// string. `*len_out` receives the id's length in bytes excluding the NUL;
/// if `buf_len` is too small the call fails with an argument error but
/// still sets `*len_out`, so callers can size a retry.
///
/// # Safety
/// `store` must be a live store handle; `buf` must point to `buf_len`
/// writable bytes; `len_out` must be a valid destination.
#[no_mangle]
pub unsafe extern "C" fn tsdf_store_id_at(
    store: *const TsdfStore,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    len_out: *mut usize,
) -> TsdfStatus {
    guard(|| {
        let len_out = out_arg(len_out, "len_out")?;
        let store = handle_arg(store, "store")?;
        let id = store.inner.ids().nth(index).ok_or_else(|| {
            argument(&format!("index {index} out of range for {} ids", store.inner.len()))
        })?;
        *len_out = id.len();
        if buf.is_null() {
            return Err(argument("buf is null"));
        }
        if buf_len < id.len() + 1 {
            return Err(argument(&format!(
                "buf holds {buf_len} bytes, id needs {}",
                id.len() + 1
            )));
        }
        std::ptr::copy_nonoverlapping(id.as_ptr() as *const c_char, buf, id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}
