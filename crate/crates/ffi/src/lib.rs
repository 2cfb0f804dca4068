//! C ABI over `sea-core`: load a checkpoint, predict on an RGB buffer, read
//! the caption, heatmap and rankings, and score heatmaps.
//!
//! Every function returns a [`SeaStatus`]. On failure the message is kept
//! per thread and read with [`sea_last_error`]. Panics never cross the
//! boundary; they surface as `SEA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use image::RgbImage;
use sea_core::explain::render_caption;
use sea_core::grid::Grid;
use sea_core::metrics;
use sea_core::model::{PredictionBundle, SeaModel as CoreModel};
use sea_core::trainer::load_checkpoint;
use sea_core::SeaError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Checkpoint = 5,
    Shape = 6,
    Template = 7,
    Metric = 8,
    Runtime = 9,
    Panic = 10,
}

/// A loaded model. Create with [`sea_model_load`], release with [`sea_model_free`].
pub struct SeaModel {
    inner: CoreModel,
}

/// One prediction. Strings it hands out stay valid until [`sea_prediction_free`].
pub struct SeaPrediction {
    bundle: PredictionBundle,
    caption: CString,
    actions: Vec<CString>,
    objects: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &SeaError) -> SeaStatus {
    match e {
        SeaError::Io { .. } | SeaError::Image { .. } | SeaError::Load(_) => SeaStatus::Io,
        SeaError::Config(_) => SeaStatus::Config,
        SeaError::Checkpoint(_) => SeaStatus::Checkpoint,
        SeaError::Shape(_) => SeaStatus::Shape,
        SeaError::Template(_) => SeaStatus::Template,
        SeaError::Metric(_) => SeaStatus::Metric,
        SeaError::Input(_) => SeaStatus::InvalidArgument,
        _ => SeaStatus::Runtime,
    }
}

struct Fail(SeaStatus, String);

impl From<SeaError> for Fail {
    fn from(e: SeaError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SeaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SeaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any error and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SeaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SeaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            SeaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn c_string(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).unwrap_or_default()
}

/// Message of the last failed call on this thread; empty after a success.
/// Owned by the library and valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sea_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint (the `.ckpt` blob with its `.json` sidecar).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sea_model_load(path: *const c_char, out: *mut *mut SeaModel) -> SeaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let trainer = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(SeaModel { inner: trainer.model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`sea_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sea_model_free(model: *mut SeaModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Vocabulary sizes of the model's two heads.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sea_model_vocab_sizes(
    model: *const SeaModel,
    n_actions: *mut usize,
    n_objects: *mut usize,
) -> SeaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ptr(n_actions, "n_actions")? = m.inner.actions.len();
        *out_ptr(n_objects, "n_objects")? = m.inner.objects.len();
        Ok(())
    })
}

/// Ego-only prediction on an interleaved 8-bit RGB buffer of
/// `width * height * 3` bytes, rows top to bottom.
///
/// # Safety
/// `rgb` must point to that many readable bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sea_predict(
    model: *const SeaModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    out: *mut *mut SeaPrediction,
) -> SeaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        let len = (width as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| invalid("image is too large"))?;
        let data = std::slice::from_raw_parts(rgb, len).to_vec();
        let img = RgbImage::from_raw(width, height, data).ok_or_else(|| invalid("buffer does not match dimensions"))?;
        let bundle = m.inner.predict(&img, &[])?;
        let model = &m.inner;
        *out = Box::into_raw(Box::new(SeaPrediction {
            caption: c_string(&bundle.caption),
            actions: bundle.action_ranking.iter().map(|&i| c_string(model.actions.label(i))).collect(),
            objects: bundle.object_ranking.iter().map(|&i| c_string(model.objects.label(i))).collect(),
            bundle,
        }));
        Ok(())
    })
}

/// Releases a prediction. Null is ignored.
///
/// # Safety
/// `pred` must come from [`sea_predict`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sea_prediction_free(pred: *mut SeaPrediction) {
    if !pred.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(pred))));
    }
}

/// The caption, e.g. "I will push circle". Owned by `pred`.
///
/// # Safety
/// `pred` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sea_prediction_caption(pred: *const SeaPrediction, out: *mut *const c_char) -> SeaStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("prediction"))?;
        *out_ptr(out, "out")? = p.caption.as_ptr();
        Ok(())
    })
}

/// Heatmap dimensions; the map has the input image's size.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sea_prediction_heatmap_size(
    pred: *const SeaPrediction,
    width: *mut u32,
    height: *mut u32,
) -> SeaStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("prediction"))?;
        let (h, w) = p.bundle.heatmap.shape();
        *out_ptr(width, "width")? = w as u32;
        *out_ptr(height, "height")? = h as u32;
        Ok(())
    })
}

/// Copies the row-major heatmap (values in [0, 1]) into `buf`, which must
/// hold exactly width × height doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sea_prediction_heatmap(pred: *const SeaPrediction, buf: *mut f64, len: usize) -> SeaStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("prediction"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = p.bundle.heatmap.data();
        if len != data.len() {
            return Err(invalid(format!("buffer holds {len} values, heatmap has {}", data.len())));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(data);
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeaHead {
    Action = 0,
    Object = 1,
}

/// Label and probability at `rank` (0 = most likely) of one head. The label
/// is owned by `pred`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sea_prediction_ranked(
    pred: *const SeaPrediction,
    head: SeaHead,
    rank: usize,
    label: *mut *const c_char,
    prob: *mut f64,
) -> SeaStatus {
    guard(|| {
        let p = pred.as_ref().ok_or_else(|| null("prediction"))?;
        let (names, ranking, probs) = match head {
            SeaHead::Action => (&p.actions, &p.bundle.action_ranking, &p.bundle.action_probs),
            SeaHead::Object => (&p.objects, &p.bundle.object_ranking, &p.bundle.object_probs),
        };
        if rank >= names.len() {
            return Err(invalid(format!("rank {rank} out of range (vocabulary has {})", names.len())));
        }
        *out_ptr(label, "label")? = names[rank].as_ptr();
        *out_ptr(prob, "prob")? = probs[ranking[rank]];
        Ok(())
    })
}

unsafe fn grid_arg(p: *const f64, width: u32, height: u32, what: &str) -> Result<Grid, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let (h, w) = (height as usize, width as usize);
    let data = std::slice::from_raw_parts(p, h * w).to_vec();
    Ok(Grid::new(h, w, data)?)
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeaMetric {
    Kld = 0,
    Sim = 1,
    Nss = 2,
}

/// Scores a predicted map against ground truth. The prediction is resized
/// to the ground-truth shape first. `eps` is used by KLD only.
///
/// # Safety
/// `pred` and `gt` must point to row-major arrays of the given shapes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sea_metric(
    metric: SeaMetric,
    pred: *const f64,
    pred_width: u32,
    pred_height: u32,
    gt: *const f64,
    gt_width: u32,
    gt_height: u32,
    eps: f64,
    out: *mut f64,
) -> SeaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = grid_arg(pred, pred_width, pred_height, "pred")?;
        let g = grid_arg(gt, gt_width, gt_height, "gt")?;
        *out = match metric {
            SeaMetric::Kld => metrics::kld(&p, &g, eps)?,
            SeaMetric::Sim => metrics::sim(&p, &g)?,
            SeaMetric::Nss => metrics::nss(&p, &g)?,
        };
        Ok(())
    })
}

/// Fills `template`'s `[action]` and `[object]` placeholders. The result
/// must be released with [`sea_string_free`].
///
/// # Safety
/// Inputs must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sea_render_caption(
    action: *const c_char,
    object: *const c_char,
    template: *const c_char,
    out: *mut *mut c_char,
) -> SeaStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let s = render_caption(
            str_arg(action, "action")?,
            str_arg(object, "object")?,
            str_arg(template, "template")?,
        )?;
        *out = c_string(&s).into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from a function documented to return an owned string.
#[no_mangle]
pub unsafe extern "C" fn sea_string_free(s: *mut c_char) {
    if !s.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(CString::from_raw(s))));
    }
}
