//! C ABI for densecam models and metrics.
//!
//! Models are opaque `DcModel` handles created by [`dc_model_build`] or
//! [`dc_model_load`] and released with [`dc_model_free`]. Every fallible
//! function returns a [`DcStatus`]; on failure a message is available from
//! [`dc_last_error`] on the same thread until the next failing call.
//!
//! Images are passed as contiguous `double` arrays in `[N, C, H, W]` order
//! with intensities in `[0, 1]`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use densecam::cam::{compute_cam, upscale};
use densecam::model::{build_model, load_checkpoint, save_checkpoint, DenseConfig, DenseModel};
use densecam::tensor::Tensor;
use densecam::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    UndefinedMetric = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct DcModel {
    inner: DenseModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Shape(_) => DcStatus::Shape,
        Error::Io { .. } => DcStatus::Io,
        Error::Checkpoint { .. } => DcStatus::Checkpoint,
        Error::Numeric(_) => DcStatus::Numeric,
        Error::UndefinedMetric(_) => DcStatus::UndefinedMetric,
        _ => DcStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DcStatus, String)>) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DcStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DcStatus::Panic
        }
    }
}

fn lift<T>(r: densecam::Result<T>) -> Result<T, (DcStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DcStatus, String) {
    (DcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, (DcStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (DcStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn model_ref<'a>(model: *const DcModel) -> Result<&'a DenseModel, (DcStatus, String)> {
    model
        .as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(
    data: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (DcStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn slice_mut<'a, T>(
    data: *mut T,
    len: usize,
    what: &str,
) -> Result<&'a mut [T], (DcStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(data, len))
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<(), (DcStatus, String)> {
    if got == expected {
        Ok(())
    } else {
        Err((
            DcStatus::Shape,
            format!("{what} has {got} values, expected {expected}"),
        ))
    }
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a freshly initialized desk-size model (64×64 grayscale input)
/// with `num_classes` outputs.
#[no_mangle]
pub unsafe extern "C" fn dc_model_build(
    num_classes: usize,
    seed: u64,
    out: *mut *mut DcModel,
) -> DcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if num_classes == 0 || num_classes > densecam::data::PATHOLOGIES.len() {
            return Err((
                DcStatus::InvalidArgument,
                format!("num_classes must be 1..=14, got {num_classes}"),
            ));
        }
        let names = &densecam::data::PATHOLOGIES[..num_classes];
        let config = if num_classes == 1 {
            DenseConfig::default()
        } else {
            DenseConfig::default().with_classes(names)
        };
        let model = lift(build_model(&config, seed))?;
        *out = Box::into_raw(Box::new(DcModel { inner: model }));
        Ok(())
    })
}

/// Loads a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn dc_model_load(path: *const c_char, out: *mut *mut DcModel) -> DcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = lift(load_checkpoint(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(DcModel { inner: model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn dc_model_save(model: *const DcModel, path: *const c_char) -> DcStatus {
    guard(|| lift(save_checkpoint(model_ref(model)?, path_arg(path)?)))
}

/// Releases a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dc_model_free(model: *mut DcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the number of outputs, input channels and input side length.
#[no_mangle]
pub unsafe extern "C" fn dc_model_shape(
    model: *const DcModel,
    num_classes: *mut usize,
    channels: *mut usize,
    image_size: *mut usize,
) -> DcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if num_classes.is_null() || channels.is_null() || image_size.is_null() {
            return Err(null("output pointer"));
        }
        let c = m.config();
        *num_classes = c.num_classes;
        *channels = c.input_channels;
        *image_size = c.image_size;
        Ok(())
    })
}

fn batch(m: &DenseModel, images: &[f64], n: usize) -> Result<Tensor, (DcStatus, String)> {
    let c = m.config();
    let dims = vec![n, c.input_channels, c.image_size, c.image_size];
    check_len("images", images.len(), dims.iter().product())?;
    lift(Tensor::new(dims, images.to_vec()))
}

/// Eval-mode probabilities for `n` images into `out` (`n × num_classes`).
#[no_mangle]
pub unsafe extern "C" fn dc_model_predict(
    model: *const DcModel,
    images: *const f64,
    images_len: usize,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> DcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if n == 0 {
            return Err((DcStatus::InvalidArgument, "n must be positive".into()));
        }
        let input = batch(m, slice(images, images_len, "images")?, n)?;
        let out = slice_mut(out, out_len, "out")?;
        check_len("out", out.len(), n * m.config().num_classes)?;
        let probs = lift(m.predict(input))?.probabilities;
        out.copy_from_slice(probs.values());
        Ok(())
    })
}

/// Class activation map of `class_index` for one image, upscaled to the
/// input size, into `out` (`image_size²` values, row-major).
#[no_mangle]
pub unsafe extern "C" fn dc_model_cam(
    model: *const DcModel,
    image: *const f64,
    image_len: usize,
    class_index: usize,
    out: *mut f64,
    out_len: usize,
) -> DcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = m.config();
        if class_index >= c.num_classes {
            return Err((
                DcStatus::InvalidArgument,
                format!(
                    "class index {class_index} out of range for {} outputs",
                    c.num_classes
                ),
            ));
        }
        let input = batch(m, slice(image, image_len, "image")?, 1)?;
        let out = slice_mut(out, out_len, "out")?;
        check_len("out", out.len(), c.image_size * c.image_size)?;
        let features = lift(m.predict(input))?.final_feature_maps;
        let f = lift(Tensor::new(
            features.dims()[1..].to_vec(),
            features.values().to_vec(),
        ))?;
        let w = m.classifier_weights();
        let k = w.dims()[1];
        let row = &w.values()[class_index * k..(class_index + 1) * k];
        let name = &c.class_names[class_index];
        let map = lift(compute_cam(&f, row, name, ""))?;
        let up = lift(upscale(&map, c.image_size, c.image_size))?;
        out.copy_from_slice(&up.values);
        Ok(())
    })
}

fn bools(v: &[u8]) -> Vec<bool> {
    v.iter().map(|&x| x != 0).collect()
}

/// Area under the ROC curve; `labels` are 0 or nonzero.
#[no_mangle]
pub unsafe extern "C" fn dc_auroc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> DcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice(scores, n, "scores")?;
        let y = bools(slice(labels, n, "labels")?);
        *out = lift(densecam::eval::auroc(s, &y))?;
        Ok(())
    })
}

/// F1 of `pred` against `truth`. `degenerate` (may be null) is set to 1
/// when neither vector has a positive and the score is 1 by convention.
#[no_mangle]
pub unsafe extern "C" fn dc_f1(
    pred: *const u8,
    truth: *const u8,
    n: usize,
    out: *mut f64,
    degenerate: *mut u8,
) -> DcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = bools(slice(pred, n, "pred")?);
        let t = bools(slice(truth, n, "truth")?);
        let score = lift(densecam::eval::f1(&p, &t))?;
        *out = score.value;
        if !degenerate.is_null() {
            *degenerate = u8::from(score.degenerate);
        }
        Ok(())
    })
}
