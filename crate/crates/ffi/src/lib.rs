//! C ABI over the flowtrace localizer.
//!
//! Models are opaque handles created by [`ft_model_load`] and released with
//! [`ft_model_free`]. Every fallible call returns an [`FtStatus`]; on failure
//! [`ft_last_error_message`] describes the error for the calling thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use candle_core::Device;
use flowtrace::error::Error;
use flowtrace::harness::checkpoint::load_checkpoint;
use flowtrace::harness::Model;
use flowtrace::metrics;
use flowtrace::noise_schedule;
use flowtrace::raster::{BinaryMask, ImageTensor};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Domain = 4,
    Config = 5,
    Shape = 6,
    Format = 7,
    CheckpointMismatch = 8,
    Io = 9,
    NonFinite = 10,
    Internal = 11,
    Panic = 12,
}

impl From<&Error> for FtStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Stage { source, .. } => FtStatus::from(source.as_ref()),
            Error::Dimension(_) => FtStatus::Dimension,
            Error::Domain(_) => FtStatus::Domain,
            Error::Config(_) => FtStatus::Config,
            Error::Shape(_) => FtStatus::Shape,
            Error::Format { .. } | Error::Json(_) | Error::Safetensors(_) | Error::Image(_) => FtStatus::Format,
            Error::CheckpointMismatch { .. } => FtStatus::CheckpointMismatch,
            Error::Io { .. } => FtStatus::Io,
            Error::NonFinite { .. } => FtStatus::NonFinite,
            Error::Tensor(_) => FtStatus::Internal,
        }
    }
}

/// Opaque model handle.
pub struct FtModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn guard(f: impl FnOnce() -> Result<(), (FtStatus, String)>) -> FtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FtStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside flowtrace");
            FtStatus::Panic
        }
    }
}

fn lift<T>(r: flowtrace::Result<T>) -> Result<T, (FtStatus, String)> {
    r.map_err(|e| (FtStatus::from(&e), e.to_string()))
}

fn null(what: &str) -> (FtStatus, String) {
    (FtStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ft_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `flowtrace train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer. On
/// success `*out` owns a handle that must be released with `ft_model_free`.
#[no_mangle]
pub unsafe extern "C" fn ft_model_load(path: *const c_char, out: *mut *mut FtModel) -> FtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (FtStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let restored = lift(load_checkpoint(Path::new(path), None, &Device::Cpu))?;
        *out = Box::into_raw(Box::new(FtModel { model: restored.model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `ft_model_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ft_model_free(model: *mut FtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side length the model was trained on.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ft_model_image_size(model: *const FtModel, out: *mut u32) -> FtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.cfg.data.image_size as u32;
        Ok(())
    })
}

/// Predicts a forgery probability map.
///
/// `image` holds `3 * height * width` floats in `[0, 1]`, channel-major
/// (all R, then G, then B). `out_probs` receives `height * width` floats.
///
/// # Safety
/// Both buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ft_model_predict(
    model: *const FtModel,
    image: *const f32,
    height: usize,
    width: usize,
    noise_seed: u64,
    out_probs: *mut f32,
) -> FtStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if image.is_null() {
            return Err(null("image"));
        }
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        if height == 0 || width == 0 {
            return Err((FtStatus::InvalidArgument, "height and width must be positive".into()));
        }
        let n = height * width;
        let data = std::slice::from_raw_parts(image, 3 * n).to_vec();
        let img = lift(ImageTensor::new(3, height, width, data))?;
        let mask = lift(m.model.forward_pipeline(&img, noise_seed))?;
        std::slice::from_raw_parts_mut(out_probs, n).copy_from_slice(mask.data());
        Ok(())
    })
}

/// Pixel F1 and IoU of two binary masks (bytes 0 or 1, row-major).
///
/// # Safety
/// `pred` and `gt` must hold `height * width` bytes; `f1` and `iou` must be
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ft_f1_iou(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    f1: *mut f64,
    iou: *mut f64,
) -> FtStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || f1.is_null() || iou.is_null() {
            return Err(null("argument"));
        }
        let n = height * width;
        let p = lift(BinaryMask::new(height, width, std::slice::from_raw_parts(pred, n).to_vec()))?;
        let g = lift(BinaryMask::new(height, width, std::slice::from_raw_parts(gt, n).to_vec()))?;
        let (a, b) = lift(metrics::f1_iou(&p, &g))?;
        *f1 = a;
        *iou = b;
        Ok(())
    })
}

/// Timestep shift `s·t / (1 + (s − 1)·t)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ft_shift_warp(t: f64, s: f64, out: *mut f64) -> FtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(noise_schedule::shift_warp(t, s))?;
        Ok(())
    })
}
