//! C ABI over the uapforge engine.
//!
//! Objects cross the boundary as opaque handles (`UapModel`, `UapDataset`,
//! `UapDelta`) created by `*_load`/`*_new` functions and released with the
//! matching `*_free`. Every fallible call returns a [`UapStatus`]; on failure
//! [`uap_last_error`] describes the most recent error on the calling thread.
//! Status values other than the FFI-specific ones equal the CLI exit codes.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use uapforge::cli::exit_code;
use uapforge::config::RunConfig;
use uapforge::data::{load_idx, synth_glyphs, GlyphParams};
use uapforge::eval::fooling_ratio_parallel;
use uapforge::model::{load_checkpoint, predict};
use uapforge::{craft, AnyTensor, DType, Dataset, Error, ModelState, Real, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UapStatus {
    Ok = 0,
    Failure = 1,
    Config = 2,
    Divergence = 3,
    CraftNumerical = 4,
    MissingArtifact = 5,
    NullPointer = 6,
    InvalidUtf8 = 7,
    Panic = 8,
}

/// Outcome of a fooling-ratio evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UapFoolingReport {
    pub n_evaluated: usize,
    pub n_changed: usize,
    pub fooling_ratio: f64,
    pub delta_linf: f64,
}

enum ModelInner {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

/// A trained model loaded from a checkpoint.
pub struct UapModel {
    inner: ModelInner,
}

/// Samples with pixel values in [0, 1], held in 64-bit precision.
pub struct UapDataset {
    inner: Dataset<f64>,
}

/// A universal perturbation.
pub struct UapDelta {
    inner: AnyTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> UapStatus {
    match exit_code(e) {
        2 => UapStatus::Config,
        3 => UapStatus::Divergence,
        4 => UapStatus::CraftNumerical,
        5 => UapStatus::MissingArtifact,
        _ => UapStatus::Failure,
    }
}

enum Fail {
    Engine(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UapStatus::Ok,
        Ok(Err(Fail::Engine(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            UapStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(&format!("invalid UTF-8 in {what}"));
            UapStatus::InvalidUtf8
        }
        Err(_) => {
            set_error("internal panic");
            UapStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &'static str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn run_config(json: Option<&str>) -> Result<RunConfig, Fail> {
    match json {
        None => Ok(RunConfig::default()),
        Some(s) => {
            let v: serde_json::Value =
                serde_json::from_str(s).map_err(|e| Error::Config { key: "config".into(), message: e.to_string() })?;
            let mut tree = RunConfig::default().to_value();
            if let (Some(dst), Some(src)) = (tree.as_object_mut(), v.as_object()) {
                for (k, val) in src {
                    dst.insert(k.clone(), val.clone());
                }
            }
            Ok(RunConfig::from_value(tree)?)
        }
    }
}

/// Message of the last failed call on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint (parameter file plus its `.json` sidecar).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_model_load(path: *const c_char, out: *mut *mut UapModel) -> UapStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let side = uapforge::model::sidecar_path(&path);
        let meta: serde_json::Value = match std::fs::read(&side) {
            Ok(b) => serde_json::from_slice(&b).map_err(Error::from)?,
            Err(_) => return Err(Error::MissingArtifact(side).into()),
        };
        let inner = if meta.get("dtype").and_then(|d| d.as_str()) == Some("f64") {
            ModelInner::F64(load_checkpoint::<f64>(&path)?.0)
        } else {
            ModelInner::F32(load_checkpoint::<f32>(&path)?.0)
        };
        *out = Box::into_raw(Box::new(UapModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`uap_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn uap_model_free(model: *mut UapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of values in one input sample.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn uap_model_input_len(model: *const UapModel) -> usize {
    match model.as_ref().map(|m| &m.inner) {
        Some(ModelInner::F32(m)) => m.spec().input_len(),
        Some(ModelInner::F64(m)) => m.spec().input_len(),
        None => 0,
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn uap_model_num_classes(model: *const UapModel) -> usize {
    match model.as_ref().map(|m| &m.inner) {
        Some(ModelInner::F32(m)) => m.num_classes(),
        Some(ModelInner::F64(m)) => m.num_classes(),
        None => 0,
    }
}

fn predict_as<F: Real>(m: &ModelState<F>, x: &[f64], n: usize) -> Result<Vec<usize>, Error> {
    let mut shape = vec![n];
    shape.extend_from_slice(m.input_shape());
    let t = Tensor::<f64>::new(shape, x.to_vec())?.cast::<F>();
    predict(m, &t)
}

/// Predicted class of `n` samples stored back to back in `x`
/// (`n * uap_model_input_len` values); writes `n` labels to `labels`.
///
/// # Safety
/// `x` must hold `n * input_len` doubles and `labels` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn uap_model_predict(model: *const UapModel, x: *const f64, n: usize, labels: *mut usize) -> UapStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if x.is_null() {
            return Err(Fail::Null("x"));
        }
        if labels.is_null() {
            return Err(Fail::Null("labels"));
        }
        let len = n * uap_model_input_len(model);
        let xs = std::slice::from_raw_parts(x, len);
        let preds = match &m.inner {
            ModelInner::F32(m) => predict_as(m, xs, n)?,
            ModelInner::F64(m) => predict_as(m, xs, n)?,
        };
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&preds);
        Ok(())
    })
}

/// Loads an IDX image/label file pair.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut UapDataset,
) -> UapStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = load_idx::<f64>(str_arg(images, "images")?, str_arg(labels, "labels")?)?;
        *out = Box::into_raw(Box::new(UapDataset { inner: ds }));
        Ok(())
    })
}

/// Generates the synthetic glyph dataset. `params_json` holds any subset of
/// the glyph parameters (`num_classes`, `n`, `side`, `strokes`, `max_shift`,
/// `noise`, `seed`); null uses the defaults.
///
/// # Safety
/// `params_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_glyphs(params_json: *const c_char, out: *mut *mut UapDataset) -> UapStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let params: GlyphParams = match opt_str_arg(params_json, "params_json")? {
            None => GlyphParams::default(),
            Some(s) => serde_json::from_str(s).map_err(|e| Error::Config {
                key: "dataset.glyphs".into(),
                message: e.to_string(),
            })?,
        };
        *out = Box::into_raw(Box::new(UapDataset {
            inner: synth_glyphs::<f64>(&params)?,
        }));
        Ok(())
    })
}

/// Seeded subset of `size` samples.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_subset(
    dataset: *const UapDataset,
    size: usize,
    seed: u64,
    out: *mut *mut UapDataset,
) -> UapStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let out = out_ptr(out, "out")?;
        *out = Box::into_raw(Box::new(UapDataset {
            inner: ds.inner.subset(size, seed)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_len(dataset: *const UapDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must come from a `uap_dataset_*` constructor and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn uap_dataset_free(dataset: *mut UapDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn craft_as<F: Real>(cfg: &RunConfig, m: &ModelState<F>, ds: &Dataset<f64>) -> Result<AnyTensor, Error> {
    let attack = cfg.attack_config(m.spec().input_len())?;
    let data = ds.cast::<F>();
    let out = craft(&attack, std::slice::from_ref(m), &data)?;
    Ok(match F::DTYPE {
        DType::F32 => AnyTensor::F32(out.delta.cast()),
        DType::F64 => AnyTensor::F64(out.delta.cast()),
    })
}

/// Crafts a perturbation against `model` on `dataset`. `config_json` is a run
/// config document (only `seed` and `attack` matter here); null uses the defaults.
///
/// # Safety
/// Handles must be live; `config_json` null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uap_craft(
    model: *const UapModel,
    dataset: *const UapDataset,
    config_json: *const c_char,
    out: *mut *mut UapDelta,
) -> UapStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = handle(dataset, "dataset")?;
        let out = out_ptr(out, "out")?;
        let cfg = run_config(opt_str_arg(config_json, "config_json")?)?;
        let delta = match &m.inner {
            ModelInner::F32(m) => craft_as(&cfg, m, &ds.inner)?,
            ModelInner::F64(m) => craft_as(&cfg, m, &ds.inner)?,
        };
        *out = Box::into_raw(Box::new(UapDelta { inner: delta }));
        Ok(())
    })
}

/// Loads a perturbation tensor file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uap_delta_load(path: *const c_char, out: *mut *mut UapDelta) -> UapStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let t = AnyTensor::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(UapDelta { inner: t }));
        Ok(())
    })
}

/// Writes the perturbation as a tensor file.
///
/// # Safety
/// `delta` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn uap_delta_save(delta: *const UapDelta, path: *const c_char) -> UapStatus {
    guard(|| {
        let d = handle(delta, "delta")?;
        let path = str_arg(path, "path")?;
        match &d.inner {
            AnyTensor::F32(t) => t.save(path)?,
            AnyTensor::F64(t) => t.save(path)?,
        }
        Ok(())
    })
}

/// Number of values in the perturbation.
///
/// # Safety
/// `delta` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uap_delta_len(delta: *const UapDelta) -> usize {
    delta.as_ref().map_or(0, |d| d.inner.shape().iter().product())
}

/// Copies the perturbation into `buf`, which must hold exactly `uap_delta_len` doubles.
///
/// # Safety
/// `delta` must be live; `buf` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn uap_delta_copy(delta: *const UapDelta, buf: *mut f64, len: usize) -> UapStatus {
    guard(|| {
        let d = handle(delta, "delta")?;
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        let values: Vec<f64> = match &d.inner {
            AnyTensor::F32(t) => t.data().iter().map(|&v| v as f64).collect(),
            AnyTensor::F64(t) => t.data().to_vec(),
        };
        if values.len() != len {
            return Err(Error::Shape(format!("buffer holds {len} values, perturbation has {}", values.len())).into());
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(&values);
        Ok(())
    })
}

/// # Safety
/// `delta` must come from [`uap_craft`] or [`uap_delta_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn uap_delta_free(delta: *mut UapDelta) {
    if !delta.is_null() {
        drop(Box::from_raw(delta));
    }
}

fn fool_as<F: Real>(m: &ModelState<F>, ds: &Dataset<f64>, d: &AnyTensor, width: usize) -> Result<UapFoolingReport, Error> {
    let delta: Tensor<F> = d.clone().into_real();
    let r = fooling_ratio_parallel(m, &ds.cast::<F>(), &delta, width.max(1))?;
    Ok(UapFoolingReport {
        n_evaluated: r.n_evaluated,
        n_changed: r.n_changed,
        fooling_ratio: r.fooling_ratio,
        delta_linf: r.delta_linf,
    })
}

/// Fraction of `dataset` whose prediction changes under `delta`, using
/// `width` threads (0 or 1 is serial).
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uap_fooling_ratio(
    model: *const UapModel,
    dataset: *const UapDataset,
    delta: *const UapDelta,
    width: usize,
    out: *mut UapFoolingReport,
) -> UapStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = handle(dataset, "dataset")?;
        let d = handle(delta, "delta")?;
        let out = out_ptr(out, "out")?;
        *out = match &m.inner {
            ModelInner::F32(m) => fool_as(m, &ds.inner, &d.inner, width)?,
            ModelInner::F64(m) => fool_as(m, &ds.inner, &d.inner, width)?,
        };
        Ok(())
    })
}
