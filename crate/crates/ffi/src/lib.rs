//! C ABI over the `uniadet` library.
//!
//! Objects cross the boundary as opaque handles created by `*_load` /
//! `*_build` functions and released with the matching `*_free`. Every
//! fallible call returns a [`UadStatus`]; on failure the message is kept
//! per thread and read back with [`uad_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use uniadet::fewshot::{build_bank, predict_few_shot, FewShotOptions, MemoryBank, DEFAULT_DISTANCE_SCALE};
use uniadet::io::formats::{
    decode_features, read_bank_file, read_feature_file, read_weight_file, write_bank_file,
};
use uniadet::metrics::{aupr, auroc, f1_max, ScoredSet};
use uniadet::model::{predict_zero_shot, FeatureStack, WeightBank};
use uniadet::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UadStatus {
    Ok = 0,
    /// Null pointer, bad length or non-UTF-8 string.
    InvalidArgument = 1,
    /// Malformed input data or a failed consistency check.
    Validation = 2,
    /// Non-finite intermediate values.
    Numeric = 3,
    Io = 4,
    /// Weights, bank and features do not fit together.
    Incompatible = 5,
    /// A metric is undefined for the given labels.
    Undefined = 6,
    /// Internal panic; the library state is unchanged.
    Panic = 7,
}

/// Trained weights.
pub struct UadWeights(WeightBank);

/// Features of one image.
pub struct UadFeatures(FeatureStack);

/// Few-shot memory of normal patch tokens.
pub struct UadBank(MemoryBank);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> UadStatus {
    match e {
        Error::Io { .. } => UadStatus::Io,
        Error::Numeric(_) => UadStatus::Numeric,
        Error::Config(_) | Error::Shape(_) => UadStatus::Incompatible,
        Error::UndefinedMetric(_) => UadStatus::Undefined,
        Error::Usage(_) | Error::Domain(_) => UadStatus::InvalidArgument,
        _ => UadStatus::Validation,
    }
}

struct Fail(UadStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(UadStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UadStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UadStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            UadStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| invalid(&format!("{what} handle is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid("output pointer is null"))
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn uad_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uad_weights_load(path: *const c_char, out: *mut *mut UadWeights) -> UadStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let w = read_weight_file(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(UadWeights(w)));
        Ok(())
    })
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `weights` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uad_weights_layers(weights: *const UadWeights) -> usize {
    weights.as_ref().map_or(0, |w| w.0.layers.len())
}

/// Overrides the stored fusion parameters.
///
/// # Safety
/// `weights` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn uad_weights_set_fusion(
    weights: *mut UadWeights,
    tau: f32,
    lambda_p: f32,
    lambda_f: f32,
) -> UadStatus {
    guard(|| {
        let w = weights
            .as_mut()
            .ok_or_else(|| invalid("weights handle is null"))?;
        let mut next = w.0.clone();
        next.tau = tau;
        next.lambda_p = lambda_p;
        next.lambda_f = lambda_f;
        next.validate()?;
        w.0 = next;
        Ok(())
    })
}

/// # Safety
/// `weights` must be null or a handle from [`uad_weights_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn uad_weights_free(weights: *mut UadWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Loads a feature file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uad_features_load(path: *const c_char, out: *mut *mut UadFeatures) -> UadStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let f = read_feature_file(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(UadFeatures(f)));
        Ok(())
    })
}

/// Decodes an in-memory feature file.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uad_features_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut UadFeatures,
) -> UadStatus {
    guard(|| {
        let out = out_ptr(out)?;
        if bytes.is_null() {
            return Err(invalid("bytes is null"));
        }
        let f = decode_features(slice::from_raw_parts(bytes, len), "buffer")?;
        *out = Box::into_raw(Box::new(UadFeatures(f)));
        Ok(())
    })
}

/// Image size the features were extracted from; the map buffer passed to
/// [`uad_predict`] must hold `height * width` values.
///
/// # Safety
/// `features` must be a live handle; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn uad_features_image_size(
    features: *const UadFeatures,
    height: *mut usize,
    width: *mut usize,
) -> UadStatus {
    guard(|| {
        let f = handle(features, "features")?;
        *out_ptr(height)? = f.0.image_height;
        *out_ptr(width)? = f.0.image_width;
        Ok(())
    })
}

/// # Safety
/// `features` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn uad_features_free(features: *mut UadFeatures) {
    if !features.is_null() {
        drop(Box::from_raw(features));
    }
}

/// Builds a memory bank from `count` reference feature handles.
///
/// # Safety
/// `refs` must point to `count` live feature handles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uad_bank_build(
    refs: *const *const UadFeatures,
    count: usize,
    out: *mut *mut UadBank,
) -> UadStatus {
    guard(|| {
        let out = out_ptr(out)?;
        if refs.is_null() || count == 0 {
            return Err(invalid("bank needs at least one reference"));
        }
        let stacks = slice::from_raw_parts(refs, count)
            .iter()
            .map(|&p| handle(p, "reference").map(|f| f.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        *out = Box::into_raw(Box::new(UadBank(build_bank(&stacks)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uad_bank_load(path: *const c_char, out: *mut *mut UadBank) -> UadStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let b = read_bank_file(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(UadBank(b)));
        Ok(())
    })
}

/// # Safety
/// `bank` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uad_bank_save(bank: *const UadBank, path: *const c_char) -> UadStatus {
    guard(|| {
        let b = handle(bank, "bank")?;
        write_bank_file(&b.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn uad_bank_free(bank: *mut UadBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Predicts one image. With a null `bank` the prediction is zero-shot.
/// A `distance_scale` of 0 selects the default. `map` receives the
/// row-major `height * width` anomaly map and `score` the image score.
///
/// # Safety
/// Handles must be live (`bank` may be null); `map` must hold `map_len`
/// doubles; `score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uad_predict(
    weights: *const UadWeights,
    features: *const UadFeatures,
    bank: *const UadBank,
    distance_scale: f64,
    map: *mut f64,
    map_len: usize,
    score: *mut f64,
) -> UadStatus {
    guard(|| {
        let w = handle(weights, "weights")?;
        let f = handle(features, "features")?;
        let score = out_ptr(score)?;
        let need = f.0.image_height * f.0.image_width;
        if map.is_null() || map_len != need {
            return Err(invalid(&format!(
                "map buffer must hold {need} values, got {map_len}"
            )));
        }
        let scale = if distance_scale == 0.0 {
            DEFAULT_DISTANCE_SCALE
        } else {
            distance_scale
        };
        let pred = match bank.as_ref() {
            Some(b) => predict_few_shot(
                &f.0,
                &w.0,
                &b.0,
                FewShotOptions {
                    distance_scale: scale,
                },
            )?,
            None => predict_zero_shot(&f.0, &w.0)?,
        };
        slice::from_raw_parts_mut(map, map_len).copy_from_slice(&pred.map.data);
        *score = pred.score;
        Ok(())
    })
}

unsafe fn scored(scores: *const f64, labels: *const u8, n: usize) -> Result<ScoredSet, Fail> {
    if scores.is_null() || labels.is_null() {
        return Err(invalid("scores and labels must not be null"));
    }
    let s = slice::from_raw_parts(scores, n).to_vec();
    let l = slice::from_raw_parts(labels, n).iter().map(|&x| x != 0).collect();
    Ok(ScoredSet::new(s, l)?)
}

unsafe fn metric(
    f: fn(&ScoredSet) -> uniadet::Result<f64>,
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> UadStatus {
    guard(|| {
        let out = out_ptr(out)?;
        *out = f(&scored(scores, labels, n)?)?;
        Ok(())
    })
}

/// Area under the ROC curve; nonzero labels are positives.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn uad_auroc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> UadStatus {
    metric(auroc, scores, labels, n, out)
}

/// Average precision.
///
/// # Safety
/// As [`uad_auroc`].
#[no_mangle]
pub unsafe extern "C" fn uad_aupr(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> UadStatus {
    metric(aupr, scores, labels, n, out)
}

/// Best F1 over all thresholds.
///
/// # Safety
/// As [`uad_auroc`].
#[no_mangle]
pub unsafe extern "C" fn uad_f1max(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> UadStatus {
    metric(f1_max, scores, labels, n, out)
}
