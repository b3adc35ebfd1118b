//! C ABI for loading checkpoints, upscaling images and scoring results.
//!
//! Images cross the boundary as planar `float` RGB (`3 × height × width`,
//! channel-major) in `[0, 1]`. Every fallible call returns a [`BsrnStatus`];
//! on failure [`bsrn_last_error`] describes the most recent error on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bsrn::checkpoint::Checkpoint;
use bsrn::metrics::{psnr, rgb_to_y, ssim};
use bsrn::model::{count_params, forward, init_params, Inference, ModelConfig};
use bsrn::tensor::FeatureMap;
use bsrn::BsrnError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsrnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Parse = 5,
    Io = 6,
    Metric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct BsrnModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

struct Failure(BsrnStatus, String);

impl From<BsrnError> for Failure {
    fn from(e: BsrnError) -> Self {
        let status = match &e {
            BsrnError::Shape(_) => BsrnStatus::Shape,
            BsrnError::Config(_) | BsrnError::Sampling { .. } => BsrnStatus::Config,
            BsrnError::Parse { .. } => BsrnStatus::Parse,
            BsrnError::Io { .. } => BsrnStatus::Io,
            BsrnError::Metric(_) => BsrnStatus::Metric,
        };
        let mut message = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            message.push_str(": ");
            message.push_str(&s.to_string());
            source = s.source();
        }
        Failure(status, message)
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BsrnStatus::InvalidArgument, msg.into())
}

/// Runs `body`, translating errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> BsrnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => BsrnStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            BsrnStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library
    // (or a valid object of type T) that outlives the call.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(BsrnStatus::NullPointer, format!("{what} is NULL")))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(BsrnStatus::NullPointer, "path is NULL".into()));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

fn image_arg(data: *const f32, height: usize, width: usize) -> Result<FeatureMap, Failure> {
    if data.is_null() {
        return Err(Failure(BsrnStatus::NullPointer, "image data is NULL".into()));
    }
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| invalid("image dimensions overflow"))?;
    // SAFETY: the caller guarantees `3·height·width` readable floats.
    let values = unsafe { std::slice::from_raw_parts(data, len) }.to_vec();
    Ok(FeatureMap::from_vec(3, height, width, values)?)
}

fn store_model(out: *mut *mut BsrnModel, checkpoint: Checkpoint) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(BsrnStatus::NullPointer, "output handle pointer is NULL".into()));
    }
    let handle = Box::into_raw(Box::new(BsrnModel { checkpoint }));
    // SAFETY: `out` is non-null and writable per the API contract.
    unsafe { *out = handle };
    Ok(())
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bsrn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bsrn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized model. `scales` lists `n_scales` factors
/// from {2, 3, 4}.
///
/// # Safety
/// `scales` must point to `n_scales` readable values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsrn_model_new(
    channels: u32,
    state_channels: u32,
    recursions: u32,
    freq_control: u32,
    scales: *const u32,
    n_scales: usize,
    seed: u64,
    out: *mut *mut BsrnModel,
) -> BsrnStatus {
    guard(|| {
        if scales.is_null() {
            return Err(Failure(BsrnStatus::NullPointer, "scales is NULL".into()));
        }
        // SAFETY: `n_scales` readable values per the contract.
        let list: Vec<usize> = unsafe { std::slice::from_raw_parts(scales, n_scales) }
            .iter()
            .map(|&f| f as usize)
            .collect();
        let config = ModelConfig::new(
            channels as usize,
            state_channels as usize,
            recursions as usize,
            freq_control as usize,
            &list,
        )?;
        store_model(out, Checkpoint::fresh(init_params(&config, seed)?))
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsrn_model_load(path: *const c_char, out: *mut *mut BsrnModel) -> BsrnStatus {
    guard(|| {
        let path = path_arg(path)?;
        store_model(out, Checkpoint::load(&path)?)
    })
}

/// Writes the model, including optimizer state, as a checkpoint file.
///
/// # Safety
/// `model` must come from this library and `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bsrn_model_save(model: *const BsrnModel, path: *const c_char) -> BsrnStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let path = path_arg(path)?;
        Ok(model.checkpoint.save(&path)?)
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bsrn_model_free(model: *mut BsrnModel) {
    if !model.is_null() {
        // SAFETY: produced by `Box::into_raw` in `store_model`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes the recursion count R, the default interval r and the number of
/// optimizer updates behind this model. Any output pointer may be NULL.
///
/// # Safety
/// `model` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsrn_model_info(
    model: *const BsrnModel,
    recursions: *mut u32,
    freq_control: *mut u32,
    global_step: *mut u64,
) -> BsrnStatus {
    guard(|| {
        let ck = &non_null(model, "model")?.checkpoint;
        // SAFETY: each pointer is checked for NULL and writable per the contract.
        unsafe {
            if !recursions.is_null() {
                *recursions = ck.config().recursions as u32;
            }
            if !freq_control.is_null() {
                *freq_control = ck.config().freq_control as u32;
            }
            if !global_step.is_null() {
                *global_step = ck.global_step();
            }
        }
        Ok(())
    })
}

/// Parameters on one scale's path of a `channels`/`state_channels` model.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsrn_count_params(
    channels: u32,
    state_channels: u32,
    scale: u32,
    out: *mut usize,
) -> BsrnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(BsrnStatus::NullPointer, "out is NULL".into()));
        }
        let config = ModelConfig::new(channels as usize, state_channels as usize, 1, 1, &[scale as usize])?;
        let n = count_params(&config, scale as usize)?;
        // SAFETY: non-null and writable per the contract.
        unsafe { *out = n };
        Ok(())
    })
}

/// Upscales a planar RGB image by `scale`. `freq_control` 0 keeps the
/// model's interval. `output` must hold `3·(scale·height)·(scale·width)`
/// floats; `output_len` is its capacity. `head_evaluations` may be NULL.
///
/// # Safety
/// `input` must hold `3·height·width` floats and `output` `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bsrn_upscale(
    model: *const BsrnModel,
    input: *const f32,
    height: usize,
    width: usize,
    scale: u32,
    freq_control: u32,
    output: *mut f32,
    output_len: usize,
    head_evaluations: *mut usize,
) -> BsrnStatus {
    guard(|| {
        let ck = &non_null(model, "model")?.checkpoint;
        let x = image_arg(input, height, width)?;
        if output.is_null() {
            return Err(Failure(BsrnStatus::NullPointer, "output is NULL".into()));
        }
        let f = scale as usize;
        let needed = 3 * height * f * width * f;
        if output_len < needed {
            return Err(Failure(
                BsrnStatus::BufferTooSmall,
                format!("output holds {output_len} floats, {needed} needed"),
            ));
        }
        let mut inference = Inference::new(ck.config(), f);
        if freq_control != 0 {
            inference = inference.with_freq_control(freq_control as usize);
        }
        let result = forward(&x, &ck.params, &inference)?;
        // SAFETY: `output` has room for `needed` floats, checked above.
        unsafe {
            ptr::copy_nonoverlapping(result.output.data().as_ptr(), output, needed);
            if !head_evaluations.is_null() {
                *head_evaluations = result.head_evaluations;
            }
        }
        Ok(())
    })
}

unsafe fn luma_metric(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
    metric: impl FnOnce(&FeatureMap, &FeatureMap) -> bsrn::Result<f64>,
) -> BsrnStatus {
    guard(|| {
        let (a, b) = (image_arg(a, height, width)?, image_arg(b, height, width)?);
        if out.is_null() {
            return Err(Failure(BsrnStatus::NullPointer, "out is NULL".into()));
        }
        let value = metric(&a, &b)?;
        // SAFETY: non-null and writable per the contract.
        unsafe { *out = value };
        Ok(())
    })
}

/// Y-channel PSNR of two planar RGB images after removing `shave` border
/// pixels. Identical images give +infinity.
///
/// # Safety
/// `a` and `b` must each hold `3·height·width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsrn_psnr(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    shave: usize,
    out: *mut f64,
) -> BsrnStatus {
    // SAFETY: forwarded contract.
    unsafe { luma_metric(a, b, height, width, out, |a, b| psnr(&rgb_to_y(a)?, &rgb_to_y(b)?, shave)) }
}

/// Y-channel SSIM of two planar RGB images after removing `shave` border pixels.
///
/// # Safety
/// `a` and `b` must each hold `3·height·width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bsrn_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    shave: usize,
    out: *mut f64,
) -> BsrnStatus {
    // SAFETY: forwarded contract.
    unsafe { luma_metric(a, b, height, width, out, |a, b| ssim(&rgb_to_y(a)?, &rgb_to_y(b)?, shave)) }
}
