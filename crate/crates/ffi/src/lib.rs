//! C ABI over `apam-core`.
//!
//! Every fallible function returns an [`ApamStatus`]; on failure the message
//! is available from [`apam_last_error_message`] on the same thread until
//! the next failing call. Handles are opaque, created by `*_load` and
//! released by the matching `*_free`. Arrays are dense row-major `double`
//! or `uint8_t` buffers whose sizes the caller guarantees.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use apam_core::eval::{extract_boxes, iou, normalize_heatmap, roc_auc, BBox};
use apam_core::model::{load_checkpoint, Model, ModelInput};
use apam_core::nn::Tensor4;
use apam_core::priors::{load_prior_set, PriorMapSet};
use apam_core::roi::{generate_roi_mask, OtsuSegmenter, RoiParams};
use apam_core::data::SourceImage;
use ndarray::{Array2, ArrayView2, Ix4};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    NonFinite = 7,
    Checksum = 8,
    Version = 9,
    Segmenter = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Half-open box `[x_min, x_max) x [y_min, y_max)` in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApamBBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<BBox> for ApamBBox {
    fn from(b: BBox) -> Self {
        Self { x_min: b.x_min, y_min: b.y_min, x_max: b.x_max, y_max: b.y_max }
    }
}

impl From<ApamBBox> for BBox {
    fn from(b: ApamBBox) -> Self {
        BBox::new(b.x_min, b.y_min, b.x_max, b.y_max)
    }
}

/// Loaded prior map set.
pub struct ApamPriorSet {
    set: PriorMapSet,
    names: Vec<CString>,
}

/// Loaded model checkpoint.
pub struct ApamModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (ApamStatus, String);

fn core_failure(e: apam_core::Error) -> Failure {
    use apam_core::Error as E;
    let status = match &e {
        E::Io { .. } => ApamStatus::Io,
        E::Format { .. } => ApamStatus::Format,
        E::Shape(_) => ApamStatus::Shape,
        E::Config(_) => ApamStatus::Config,
        E::Invalid(_) => ApamStatus::InvalidArgument,
        E::NonFinite(_) => ApamStatus::NonFinite,
        E::Checksum(_) => ApamStatus::Checksum,
        E::Version { .. } => ApamStatus::Version,
        E::Segmenter { .. } => ApamStatus::Segmenter,
    };
    (status, e.to_string())
}

fn invalid(msg: impl Into<String>) -> Failure {
    (ApamStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, recording failures and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ApamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ApamStatus::Ok,
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            ApamStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((ApamStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable elements.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    non_null(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable elements.
unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    non_null(p, what)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn apam_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn apam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Mann-Whitney ROC-AUC of `n` scores against 0/1 labels.
///
/// # Safety
/// `scores` and `labels` point to `n` elements; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn apam_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> ApamStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let l: Vec<bool> = input(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        let auc = roc_auc(s, &l).map_err(core_failure)?;
        output(out, 1, "out")?[0] = auc;
        Ok(())
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `a`, `b` and `out` point to valid objects.
#[no_mangle]
pub unsafe extern "C" fn apam_iou(a: *const ApamBBox, b: *const ApamBBox, out: *mut f64) -> ApamStatus {
    guard(|| {
        let a = input(a, 1, "a")?[0];
        let b = input(b, 1, "b")?[0];
        output(out, 1, "out")?[0] = iou(&a.into(), &b.into());
        Ok(())
    })
}

/// Bilinear upsample to `edge x edge`, min-max scale to 0..=255. A constant
/// map gives zeros.
///
/// # Safety
/// `heatmap` holds `height * width` values; `out` holds `edge * edge`.
#[no_mangle]
pub unsafe extern "C" fn apam_normalize_heatmap(
    heatmap: *const f64,
    height: usize,
    width: usize,
    edge: usize,
    out: *mut u8,
) -> ApamStatus {
    guard(|| {
        if height == 0 || width == 0 || edge == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        let h = input(heatmap, height * width, "heatmap")?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err((ApamStatus::NonFinite, "heatmap has non-finite values".into()));
        }
        let view = ArrayView2::from_shape((height, width), h).expect("sized slice");
        let norm = normalize_heatmap(view, edge);
        output(out, edge * edge, "out")?.copy_from_slice(norm.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Outer-contour boxes of a binary mask (nonzero is foreground). Writes up
/// to `capacity` boxes and the total count to `out_count`; returns
/// `BUFFER_TOO_SMALL` when the count exceeds `capacity`.
///
/// # Safety
/// `mask` holds `height * width` bytes; `out` holds `capacity` boxes (may be
/// null when `capacity` is 0); `out_count` is writable.
#[no_mangle]
pub unsafe extern "C" fn apam_extract_boxes(
    mask: *const u8,
    height: usize,
    width: usize,
    out: *mut ApamBBox,
    capacity: usize,
    out_count: *mut usize,
) -> ApamStatus {
    guard(|| {
        let m = input(mask, height * width, "mask")?;
        let view = ArrayView2::from_shape((height, width), m).expect("sized slice");
        let boxes = extract_boxes(view.mapv(|v| v != 0).view());
        output(out_count, 1, "out_count")?[0] = boxes.len();
        if boxes.len() > capacity {
            return Err((
                ApamStatus::BufferTooSmall,
                format!("{} boxes do not fit in {capacity}", boxes.len()),
            ));
        }
        if !boxes.is_empty() {
            let dst = output(out, boxes.len(), "out")?;
            for (d, b) in dst.iter_mut().zip(boxes) {
                *d = b.into();
            }
        }
        Ok(())
    })
}

/// Chest ROI mask of a grayscale image in [0, 1] using the built-in Otsu
/// lung segmenter. Writes 0/1 bytes.
///
/// # Safety
/// `gray` holds `height * width` values; `out` holds as many bytes.
#[no_mangle]
pub unsafe extern "C" fn apam_roi_mask(
    gray: *const f64,
    height: usize,
    width: usize,
    radius: usize,
    out: *mut u8,
) -> ApamStatus {
    guard(|| {
        if height == 0 || width == 0 {
            return Err(invalid("dimensions must be positive"));
        }
        let g = input(gray, height * width, "gray")?;
        let image = SourceImage::gray(Array2::from_shape_vec((height, width), g.to_vec()).expect("sized"));
        let params = RoiParams { radius, ..Default::default() };
        let mask = generate_roi_mask("ffi", &image, &OtsuSegmenter, &params).map_err(core_failure)?;
        output(out, height * width, "out")?.copy_from_slice(mask.mask.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Loads a prior map directory written by `apam gen-priors`.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn apam_prior_set_load(dir: *const c_char, out: *mut *mut ApamPriorSet) -> ApamStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let slot = output(out, 1, "out")?;
        let set = load_prior_set(dir).map_err(core_failure)?;
        let names = set
            .classes
            .names()
            .iter()
            .map(|n| CString::new(n.as_str()).map_err(|_| invalid("class name has a NUL byte")))
            .collect::<Result<_, _>>()?;
        slot[0] = Box::into_raw(Box::new(ApamPriorSet { set, names }));
        Ok(())
    })
}

/// # Safety
/// `set` is null or a handle from [`apam_prior_set_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn apam_prior_set_free(set: *mut ApamPriorSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `set` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apam_prior_set_num_classes(set: *const ApamPriorSet) -> usize {
    set.as_ref().map_or(0, |s| s.set.len())
}

/// Class name owned by the handle, or null when out of range.
///
/// # Safety
/// `set` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apam_prior_set_class_name(set: *const ApamPriorSet, class_id: usize) -> *const c_char {
    set.as_ref()
        .and_then(|s| s.names.get(class_id))
        .map_or(std::ptr::null(), |n| n.as_ptr())
}

/// Map resolution.
///
/// # Safety
/// `set` is a live handle; `height` and `width` are writable.
#[no_mangle]
pub unsafe extern "C" fn apam_prior_set_resolution(
    set: *const ApamPriorSet,
    height: *mut usize,
    width: *mut usize,
) -> ApamStatus {
    guard(|| {
        let s = set.as_ref().ok_or((ApamStatus::NullPointer, "set is null".into()))?;
        let (h, w) = s.set.resolution;
        output(height, 1, "height")?[0] = h;
        output(width, 1, "width")?[0] = w;
        Ok(())
    })
}

/// Copies the normalized map of `class_id` into `out`.
///
/// # Safety
/// `set` is a live handle; `out` holds `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn apam_prior_set_map(
    set: *const ApamPriorSet,
    class_id: usize,
    out: *mut f64,
    capacity: usize,
) -> ApamStatus {
    guard(|| {
        let s = set.as_ref().ok_or((ApamStatus::NullPointer, "set is null".into()))?;
        let pm = s
            .set
            .maps
            .get(class_id)
            .ok_or_else(|| invalid(format!("class {class_id} out of range")))?;
        if capacity < pm.map.len() {
            return Err((ApamStatus::BufferTooSmall, format!("map needs {} values", pm.map.len())));
        }
        let dst = output(out, pm.map.len(), "out")?;
        for (d, &v) in dst.iter_mut().zip(pm.map.iter()) {
            *d = v;
        }
        Ok(())
    })
}

/// Loads a checkpoint written by `apam train`.
///
/// # Safety
/// `path` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn apam_model_load(path: *const c_char, out: *mut *mut ApamModel) -> ApamStatus {
    guard(|| {
        let path = path_arg(path)?;
        let slot = output(out, 1, "out")?;
        let (model, _) = load_checkpoint(path, None).map_err(core_failure)?;
        slot[0] = Box::into_raw(Box::new(ApamModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from [`apam_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn apam_model_free(model: *mut ApamModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input geometry: class count `K`, image edge `E` and feature map size
/// `h x w`. Also reports whether ROI masks and prior maps are consumed.
///
/// # Safety
/// `model` is a live handle; every out pointer is writable.
#[no_mangle]
pub unsafe extern "C" fn apam_model_shape(
    model: *const ApamModel,
    num_classes: *mut usize,
    input_edge: *mut usize,
    feature_height: *mut usize,
    feature_width: *mut usize,
    uses_roi: *mut bool,
    uses_priors: *mut bool,
) -> ApamStatus {
    guard(|| {
        let m = &model.as_ref().ok_or((ApamStatus::NullPointer, "model is null".into()))?.model;
        let (fh, fw) = m.config.feature_hw();
        output(num_classes, 1, "num_classes")?[0] = m.config.n_classes;
        output(input_edge, 1, "input_edge")?[0] = m.config.input_edge;
        output(feature_height, 1, "feature_height")?[0] = fh;
        output(feature_width, 1, "feature_width")?[0] = fw;
        output(uses_roi, 1, "uses_roi")?[0] = m.config.attention.uses_roi();
        output(uses_priors, 1, "uses_priors")?[0] = m.config.attention.uses_priors();
        Ok(())
    })
}

/// Inference on `n` preprocessed images (`n x 3 x E x E`). `roi`
/// (`n x 1 x h x w`) and `priors` (`n x K x h x w`) may be null when the
/// model does not use them. Writes sigmoid probabilities (`n x K`) and,
/// when `cams` is not null, class activation maps (`n x K x h x w`).
///
/// # Safety
/// Every non-null buffer has the size stated above.
#[no_mangle]
pub unsafe extern "C" fn apam_model_predict(
    model: *const ApamModel,
    n: usize,
    images: *const f64,
    roi: *const f64,
    priors: *const f64,
    probs: *mut f64,
    cams: *mut f64,
) -> ApamStatus {
    guard(|| {
        let m = &model.as_ref().ok_or((ApamStatus::NullPointer, "model is null".into()))?.model;
        if n == 0 {
            return Err(invalid("n must be positive"));
        }
        let e = m.config.input_edge;
        let k = m.config.n_classes;
        let (fh, fw) = m.config.feature_hw();
        let tensor = |p: *const f64, c: usize, h: usize, w: usize, what: &str| -> Result<Tensor4, Failure> {
            let data = input(p, n * c * h * w, what)?;
            Ok(Tensor4::from_shape_vec((n, c, h, w), data.to_vec()).expect("sized slice"))
        };
        let x = tensor(images, 3, e, e, "images")?;
        let r = if roi.is_null() { None } else { Some(tensor(roi, 1, fh, fw, "roi")?) };
        let p = if priors.is_null() { None } else { Some(tensor(priors, k, fh, fw, "priors")?) };
        let out = m
            .forward_eval(ModelInput { images: &x, roi: r.as_ref(), priors: p.as_ref() })
            .map_err(core_failure)?;
        output(probs, n * k, "probs")?.copy_from_slice(out.probabilities().as_standard_layout().as_slice().expect("standard"));
        if !cams.is_null() {
            let dst = output(cams, n * k * fh * fw, "cams")?;
            let mut all = ndarray::Array4::<f64>::zeros((n, k, fh, fw));
            for c in 0..k {
                all.index_axis_mut(ndarray::Axis(1), c).assign(&m.cam(&out, c));
            }
            let all = all.into_dimensionality::<Ix4>().expect("rank 4");
            dst.copy_from_slice(all.as_slice().expect("standard"));
        }
        Ok(())
    })
}
