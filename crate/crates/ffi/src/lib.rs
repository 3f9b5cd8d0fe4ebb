//! C interface to `dpm-core`.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`DpmStatus`]; on failure the
//! message is kept per thread and can be copied out with
//! [`dpm_last_error_message`]. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dpm_core::estimation::{fit, SgdConfig};
use dpm_core::eval::{roc_curve, score_customer};
use dpm_core::io::{load_dataset, load_model, save_model, FitMetadata, LoadOptions, ModelFile};
use dpm_core::{Dataset, DpmError, FilterConfig, ModelParams};

/// Result of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    OutOfRange = 8,
    Panic = 99,
}

/// A loaded dataset.
pub struct DpmDataset(Dataset);

/// A model file: one parameter set per segment.
pub struct DpmModel(ModelFile);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

struct Failure(DpmStatus, String);

impl From<DpmError> for Failure {
    fn from(err: DpmError) -> Self {
        let status = match &err {
            DpmError::Io { .. } => DpmStatus::Io,
            DpmError::Parse { .. } | DpmError::Json(_) | DpmError::Csv(_) => DpmStatus::Parse,
            DpmError::NonFinite(_)
            | DpmError::DegenerateLikelihood { .. }
            | DpmError::DegenerateDesign(_)
            | DpmError::Calibration(_)
            | DpmError::TooManySkips(_) => DpmStatus::Numerical,
            _ => DpmStatus::InvalidArgument,
        };
        Failure(status, err.to_string())
    }
}

fn fail(status: DpmStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `body`, recording any error or panic.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DpmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DpmStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            DpmStatus::Panic
        }
    }
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(fail(DpmStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(DpmStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn optional_text<'a>(ptr: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if ptr.is_null() {
        Ok(None)
    } else {
        text(ptr, what).map(Some)
    }
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref()
        .ok_or_else(|| fail(DpmStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| fail(DpmStatus::NullArgument, format!("{what} is null")))
}

/// Copies `values` into a caller buffer of `capacity` entries and reports
/// the full length; a short buffer is an error but the length is still set.
unsafe fn copy_out(values: &[f64], buffer: *mut f64, capacity: usize, len: *mut usize) -> Result<(), Failure> {
    *out(len, "len")? = values.len();
    if values.len() > capacity {
        return Err(fail(
            DpmStatus::BufferTooSmall,
            format!("need {} values, buffer holds {capacity}", values.len()),
        ));
    }
    if !values.is_empty() {
        if buffer.is_null() {
            return Err(fail(DpmStatus::NullArgument, "buffer is null"));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), buffer, values.len());
    }
    Ok(())
}

/// Copies the last error message on this thread into `buffer` as a
/// NUL-terminated string, truncating to `capacity - 1` bytes. Returns the
/// untruncated length, excluding the terminator.
///
/// # Safety
/// `buffer` must be null or valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn dpm_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let message = e.borrow();
        if !buffer.is_null() && capacity > 0 {
            let n = message.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(message.as_ptr(), buffer.cast::<u8>(), n);
            *buffer.add(n) = 0;
        }
        message.len()
    })
}

/// Loads a dataset CSV. `segment_column` may be null.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `result` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_dataset_load(
    path: *const c_char,
    segment_column: *const c_char,
    result: *mut *mut DpmDataset,
) -> DpmStatus {
    guard(|| {
        let result = out(result, "result")?;
        let options = LoadOptions {
            segment_column: optional_text(segment_column, "segment_column")?.map(str::to_string),
        };
        let data = load_dataset(PathBuf::from(text(path, "path")?), &options)?;
        *result = Box::into_raw(Box::new(DpmDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle from [`dpm_dataset_load`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn dpm_dataset_free(dataset: *mut DpmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of customers, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpm_dataset_len(dataset: *const DpmDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Days observed for customer `index`.
///
/// # Safety
/// `dataset` must be null or a live handle; `horizon` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_dataset_horizon(
    dataset: *const DpmDataset,
    index: usize,
    horizon: *mut usize,
) -> DpmStatus {
    guard(|| {
        let data = &handle(dataset, "dataset")?.0;
        let customer = data
            .customers()
            .get(index)
            .ok_or_else(|| fail(DpmStatus::OutOfRange, format!("customer {index} of {}", data.len())))?;
        *out(horizon, "horizon")? = customer.horizon();
        Ok(())
    })
}

/// Builds a single-segment model from `[c, phi, alpha[0..k], beta[0..l]]`.
///
/// # Safety
/// `values` must be valid for `2 + k + l` reads; `result` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_model_from_params(
    k: usize,
    l: usize,
    values: *const f64,
    result: *mut *mut DpmModel,
) -> DpmStatus {
    guard(|| {
        let result = out(result, "result")?;
        if values.is_null() {
            return Err(fail(DpmStatus::NullArgument, "values is null"));
        }
        let slice = std::slice::from_raw_parts(values, 2 + k + l);
        let params = ModelParams::from_slice(k, l, slice)?;
        *result = Box::into_raw(Box::new(DpmModel(ModelFile::single(params, None))));
        Ok(())
    })
}

/// Fits one parameter set to the whole dataset. `config_json` holds an
/// SGD configuration and may be null for the defaults.
///
/// # Safety
/// `dataset` must be a live handle; `config_json` null or NUL-terminated;
/// `result` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_fit(
    dataset: *const DpmDataset,
    config_json: *const c_char,
    result: *mut *mut DpmModel,
) -> DpmStatus {
    guard(|| {
        let result = out(result, "result")?;
        let data = &handle(dataset, "dataset")?.0;
        let config: SgdConfig = match optional_text(config_json, "config_json")? {
            Some(json) => serde_json::from_str(json).map_err(DpmError::from)?,
            None => SgdConfig::default(),
        };
        let report = fit(data, &config)?;
        let meta = FitMetadata::from_report(&config, &report)?;
        *result = Box::into_raw(Box::new(DpmModel(ModelFile::single(report.final_params, Some(meta)))));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `result` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_model_load(path: *const c_char, result: *mut *mut DpmModel) -> DpmStatus {
    guard(|| {
        let result = out(result, "result")?;
        let model = load_model(PathBuf::from(text(path, "path")?))?;
        *result = Box::into_raw(Box::new(DpmModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dpm_model_save(model: *const DpmModel, path: *const c_char) -> DpmStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        save_model(PathBuf::from(text(path, "path")?), model)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn dpm_model_free(model: *mut DpmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn params_for<'a>(model: &'a ModelFile, segment: Option<&str>) -> Result<&'a ModelParams, Failure> {
    model
        .params_for(segment)
        .ok_or_else(|| fail(DpmStatus::OutOfRange, format!("no parameters for segment {segment:?}")))
}

/// Copies `[c, phi, alpha.., beta..]` for `segment` (null for the default
/// set) into `buffer`; `len` receives the parameter count.
///
/// # Safety
/// `model` must be a live handle; `segment` null or NUL-terminated;
/// `buffer` valid for `capacity` writes; `len` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_model_params(
    model: *const DpmModel,
    segment: *const c_char,
    buffer: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> DpmStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let params = params_for(model, optional_text(segment, "segment")?)?;
        copy_out(&params.to_vec(), buffer, capacity, len)
    })
}

/// One-step-ahead purchase probabilities for customer `index`, using the
/// parameters of the customer's segment.
///
/// # Safety
/// Handles must be live; `buffer` valid for `capacity` writes; `len` valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_score_customer(
    model: *const DpmModel,
    dataset: *const DpmDataset,
    index: usize,
    particle_count: usize,
    seed: u64,
    buffer: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> DpmStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let data = &handle(dataset, "dataset")?.0;
        let customer = data
            .customers()
            .get(index)
            .ok_or_else(|| fail(DpmStatus::OutOfRange, format!("customer {index} of {}", data.len())))?;
        let params = params_for(model, customer.segment())?;
        let config = FilterConfig {
            particle_count,
            seed,
            ..FilterConfig::default()
        };
        let scores = score_customer(params, customer, &config)?;
        copy_out(&scores, buffer, capacity, len)
    })
}

/// Area under the ROC curve of `scores` against 0/1 `labels`.
///
/// # Safety
/// `scores` and `labels` must be valid for `n` reads; `auc` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn dpm_auc(scores: *const f64, labels: *const u8, n: usize, auc: *mut f64) -> DpmStatus {
    guard(|| {
        let auc = out(auc, "auc")?;
        if n > 0 && (scores.is_null() || labels.is_null()) {
            return Err(fail(DpmStatus::NullArgument, "scores or labels is null"));
        }
        let (s, y) = if n == 0 {
            (&[][..], &[][..])
        } else {
            (std::slice::from_raw_parts(scores, n), std::slice::from_raw_parts(labels, n))
        };
        *auc = roc_curve(s, y)?.auc;
        Ok(())
    })
}
