//! C ABI over the demspec core: loss weighting, the Bayes ceiling of the
//! synthetic generator, checkpoint embedding and the separation score.
//!
//! Every fallible function returns a [`DsStatus`]. On failure the message is
//! kept per thread and can be read with [`ds_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use demspec::model::Checkpoint;
use demspec::specialize::{combined_loss, combined_loss_grad, weighted_loss, UncertaintyState};
use demspec::synthetic::{bayes_optimal_ac, DocLength, SyntheticSpec};
use demspec::Error;

/// Result codes of the C API.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NonFinite = 4,
    InsufficientData = 5,
    ResourceMissing = 6,
    MalformedInput = 7,
    IoError = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// Opaque handle to a loaded checkpoint.
pub struct DsCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(DsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => DsStatus::IoError,
            Error::Missing(_) => DsStatus::ResourceMissing,
            Error::Format { .. } | Error::DigestMismatch(_) => DsStatus::MalformedInput,
            Error::NonFinite(_) => DsStatus::NonFinite,
            Error::InsufficientData(_) | Error::EmptySubset(_) | Error::NoMaskedPositions => DsStatus::InsufficientData,
            _ => DsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: DsStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `body`, turning errors and panics into a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DsStatus::Internal
        }
    }
}

fn out_ref<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a valid, writable pointer.
    unsafe { ptr.as_mut() }.ok_or_else(|| fail(DsStatus::NullPointer, format!("`{name}` is null")))
}

fn c_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(fail(DsStatus::NullPointer, format!("`{name}` is null")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| fail(DsStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

/// Copies the last error message of this thread into `buffer` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// including the terminator, or 0 when no error was recorded.
///
/// # Safety
/// `buffer` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ds_last_error(buffer: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buffer.is_null() && len > 0 {
            let n = bytes.len().min(len);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buffer, n);
            *buffer.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// `0.5 * (exp(-eta) * loss + eta)`.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn ds_weighted_loss(loss: f64, eta: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = weighted_loss(loss, eta)?;
        Ok(())
    })
}

/// Sum of the two weighted task losses.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn ds_combined_loss(mlm_loss: f64, dem_loss: f64, eta_mlm: f64, eta_dem: f64, out: *mut f64) -> DsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = combined_loss(mlm_loss, dem_loss, &UncertaintyState { eta_mlm, eta_dem })?;
        Ok(())
    })
}

/// Writes the partial derivatives with respect to
/// `(mlm_loss, dem_loss, eta_mlm, eta_dem)` into `out[0..4]`.
///
/// # Safety
/// `out` must be null or point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_combined_loss_grad(
    mlm_loss: f64,
    dem_loss: f64,
    eta_mlm: f64,
    eta_dem: f64,
    out: *mut f64,
) -> DsStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(DsStatus::NullPointer, "`out` is null"));
        }
        // validates the inputs the same way the loss does
        combined_loss(mlm_loss, dem_loss, &UncertaintyState { eta_mlm, eta_dem })?;
        let g = combined_loss_grad(mlm_loss, dem_loss, &UncertaintyState { eta_mlm, eta_dem });
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&g);
        Ok(())
    })
}

/// Bayes-optimal attribute accuracy of the synthetic generator with marker
/// rates `own_rate` and `other_rate` and document lengths uniform on
/// `[min_len, max_len]`.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn ds_bayes_optimal_ac(
    own_rate: f64,
    other_rate: f64,
    min_len: usize,
    max_len: usize,
    out: *mut f64,
) -> DsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let spec = SyntheticSpec {
            marker_rate_a: own_rate,
            marker_rate_b: other_rate,
            doc_length: DocLength::Range([min_len, max_len]),
            ..SyntheticSpec::default()
        };
        *out = bayes_optimal_ac(&spec)?;
        Ok(())
    })
}

/// Loads a checkpoint directory. Release the handle with
/// [`ds_checkpoint_free`].
///
/// # Safety
/// `dir` must be null or a NUL-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ds_checkpoint_open(dir: *const c_char, out: *mut *mut DsCheckpoint) -> DsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let dir = c_str(dir, "dir")?;
        let inner = Checkpoint::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(DsCheckpoint { inner }));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`ds_checkpoint_open`], and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ds_checkpoint_free(handle: *mut DsCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Width of one embedding row.
///
/// # Safety
/// `handle` must be null or live; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn ds_checkpoint_hidden_dim(handle: *const DsCheckpoint, out: *mut usize) -> DsStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| fail(DsStatus::NullPointer, "`handle` is null"))?;
        *out_ref(out, "out")? = h.inner.config.hidden_dim;
        Ok(())
    })
}

/// Embeds `n_texts` documents into `out`, row-major `n_texts x hidden_dim`.
/// `out_len` is the capacity of `out` in doubles.
///
/// # Safety
/// `texts` must point to `n_texts` NUL-terminated strings and `out` to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ds_checkpoint_embed(
    handle: *const DsCheckpoint,
    texts: *const *const c_char,
    n_texts: usize,
    out: *mut f64,
    out_len: usize,
) -> DsStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| fail(DsStatus::NullPointer, "`handle` is null"))?;
        if texts.is_null() || out.is_null() {
            return Err(fail(DsStatus::NullPointer, "`texts` or `out` is null"));
        }
        let need = n_texts * h.inner.config.hidden_dim;
        if out_len < need {
            return Err(fail(DsStatus::BufferTooSmall, format!("embedding needs {need} values, buffer holds {out_len}")));
        }
        let texts = std::slice::from_raw_parts(texts, n_texts)
            .iter()
            .enumerate()
            .map(|(i, &p)| c_str(p, &format!("texts[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let x = h.inner.embed(&texts, 64)?;
        std::slice::from_raw_parts_mut(out, need).iter_mut().zip(x.iter()).for_each(|(o, v)| *o = *v);
        Ok(())
    })
}

/// Mean silhouette of `n` row-major points of width `dim` under `labels`.
///
/// # Safety
/// `x` must point to `n * dim` doubles, `labels` to `n` values and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn ds_silhouette(x: *const f64, n: usize, dim: usize, labels: *const usize, out: *mut f64) -> DsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if x.is_null() || labels.is_null() {
            return Err(fail(DsStatus::NullPointer, "`x` or `labels` is null"));
        }
        let points = std::slice::from_raw_parts(x, n * dim).to_vec();
        let x = ndarray::Array2::from_shape_vec((n, dim), points).map_err(|e| fail(DsStatus::InvalidArgument, e.to_string()))?;
        *out = demspec::probe::separation_score(&x, std::slice::from_raw_parts(labels, n))?;
        Ok(())
    })
}
