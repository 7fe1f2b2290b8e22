//! C ABI for the ssc scene completion library.
//!
//! Objects cross the boundary as opaque pointers. The caller owns every
//! handle it receives and releases it with the matching `_free` function.
//! Each call returns an [`SscStatus`]; after a failure [`ssc_last_error`]
//! describes the cause. Status codes match the exit codes of the `ssc`
//! command line tool.
//!
//! Handles are not synchronized. Sharing one between threads is fine for
//! reading calls only.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ssc_core::cli::{exit_code, EXIT_INPUT, EXIT_NUMERIC, EXIT_USAGE};
use ssc_core::dataio::{generate_synthetic, read_dataset, LabelSpace, SceneSample};
use ssc_core::geometry::VoxelGridSpec;
use ssc_core::metrics::{ConfusionMatrix, INVALID_LABEL};
use ssc_core::pipeline::{evaluate, load_checkpoint, save_checkpoint, train, Model, ModelConfig};
use ssc_core::{Error, Result};

/// Outcome of an API call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SscStatus {
    Ok = 0,
    /// Null or malformed argument, or an invalid configuration.
    Usage = 1,
    /// Bad data, checkpoint or file access.
    Input = 2,
    /// Numeric domain failure or diverged training.
    Numeric = 3,
    /// A panic was caught at the boundary. This is a library bug.
    Internal = 4,
}

/// Model and training configuration.
pub struct SscConfig(ModelConfig);

/// Scene samples with their label space.
pub struct SscDataset {
    labels: LabelSpace,
    samples: Vec<SceneSample>,
}

pub struct SscModel(Model);

/// Confusion counts from an evaluation.
pub struct SscConfusion(ConfusionMatrix);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> SscStatus {
    match exit_code(e) {
        EXIT_USAGE => SscStatus::Usage,
        EXIT_INPUT => SscStatus::Input,
        EXIT_NUMERIC => SscStatus::Numeric,
        _ => SscStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into a status.
fn call(f: impl FnOnce() -> Result<()>) -> SscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SscStatus::Ok,
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let what = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {what}"));
            SscStatus::Internal
        }
    }
}

fn null(what: &str) -> Error {
    Error::Config(format!("{what} is null"))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Error::Config(format!("{what} is not UTF-8")))
}

/// Checks an output slot before any work is done.
fn slot<T>(out: *mut T, what: &str) -> Result<*mut T> {
    if out.is_null() {
        Err(null(what))
    } else {
        Ok(out)
    }
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn sample(ds: &SscDataset, index: usize) -> Result<&SceneSample> {
    ds.samples
        .get(index)
        .ok_or_else(|| Error::Config(format!("sample index {index} out of range for {} samples", ds.samples.len())))
}

unsafe fn copy_labels(src: &[u16], dst: *mut u16, len: usize) -> Result<()> {
    let dst = slot(dst, "labels")?;
    if len != src.len() {
        return Err(Error::Length { what: "label buffer".into(), expected: src.len() * 2, actual: len * 2 });
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ssc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Default configuration.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ssc_config_default(out: *mut *mut SscConfig) -> SscStatus {
    call(|| {
        *slot(out, "out")? = boxed(SscConfig(ModelConfig::default()));
        Ok(())
    })
}

/// Parses `key = value` lines over the defaults.
///
/// # Safety
/// `config_text` must be null or a NUL-terminated string; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_config_parse(config_text: *const c_char, out: *mut *mut SscConfig) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        let cfg = ModelConfig::parse(text(config_text, "config text")?)?;
        *out = boxed(SscConfig(cfg));
        Ok(())
    })
}

/// Sets one key. The configuration is unchanged when the result would be
/// invalid.
///
/// # Safety
/// `config` must be null or a live handle; `key` and `value` null or
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ssc_config_set(config: *mut SscConfig, key: *const c_char, value: *const c_char) -> SscStatus {
    call(|| {
        let cfg = get_mut(config, "config")?;
        let mut next = cfg.0.clone();
        next.set(text(key, "key")?, text(value, "value")?)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Writes the configuration as text into `buf` (NUL-terminated, truncated
/// to `cap` bytes) and its full length without the NUL into `needed`.
/// Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes; `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_config_to_text(config: *const SscConfig, buf: *mut c_char, cap: usize, needed: *mut usize) -> SscStatus {
    call(|| {
        let needed = slot(needed, "needed")?;
        let s = get(config, "config")?.0.to_text();
        *needed = s.len();
        if !buf.is_null() && cap > 0 {
            let n = s.len().min(cap - 1);
            ptr::copy_nonoverlapping(s.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssc_config_free(config: *mut SscConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Reads a dataset directory as written by `ssc gen`.
///
/// # Safety
/// `path` must be null or NUL-terminated; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_dataset_read(path: *const c_char, out: *mut *mut SscDataset) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        let (labels, samples) = read_dataset(Path::new(text(path, "path")?))?;
        *out = boxed(SscDataset { labels, samples });
        Ok(())
    })
}

/// Generates `count` synthetic scenes from the grid, image size and seed
/// of `config`.
///
/// # Safety
/// `config` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_dataset_generate(config: *const SscConfig, count: usize, out: *mut *mut SscDataset) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        let cfg = &get(config, "config")?.0;
        let spec = VoxelGridSpec::forward_facing(cfg.grid, cfg.resolution)?;
        let labels = LabelSpace::synthetic();
        let samples = generate_synthetic(cfg.seed, count, &spec, &labels, (cfg.image_w, cfg.image_h))?;
        *out = boxed(SscDataset { labels, samples });
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle; `len` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_dataset_len(dataset: *const SscDataset, len: *mut usize) -> SscStatus {
    call(|| {
        let len = slot(len, "len")?;
        *len = get(dataset, "dataset")?.samples.len();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_dataset_num_classes(dataset: *const SscDataset, out: *mut usize) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        *out = get(dataset, "dataset")?.labels.num_classes();
        Ok(())
    })
}

/// Voxel count of sample `index`, the buffer length the label calls expect.
///
/// # Safety
/// `dataset` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_dataset_num_voxels(dataset: *const SscDataset, index: usize, out: *mut usize) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        *out = sample(get(dataset, "dataset")?, index)?.spec.num_voxels();
        Ok(())
    })
}

/// Copies the ground-truth labels of sample `index`. Voxels outside the
/// valid mask read as 255 and are ignored by evaluation.
///
/// # Safety
/// `labels` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ssc_dataset_ground_truth(dataset: *const SscDataset, index: usize, labels: *mut u16, len: usize) -> SscStatus {
    call(|| {
        let gt = &sample(get(dataset, "dataset")?, index)?.gt;
        let masked: Vec<u16> = gt.labels.iter().zip(&gt.valid).map(|(&l, &v)| if v { l } else { INVALID_LABEL }).collect();
        copy_labels(&masked, labels, len)
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssc_dataset_free(dataset: *mut SscDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Freshly initialized model. The variant named in the config is applied.
///
/// # Safety
/// `config` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_model_new(config: *const SscConfig, num_classes: usize, out: *mut *mut SscModel) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        let cfg = get(config, "config")?.0.clone();
        let cfg = cfg.clone().with_variant(cfg.variant);
        *out = boxed(SscModel(Model::new(cfg, num_classes)?));
        Ok(())
    })
}

/// # Safety
/// `path` must be null or NUL-terminated; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_model_load(path: *const c_char, out: *mut *mut SscModel) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        *out = boxed(SscModel(load_checkpoint(Path::new(text(path, "path")?))?));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle; `path` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ssc_model_save(model: *const SscModel, path: *const c_char) -> SscStatus {
    call(|| save_checkpoint(&get(model, "model")?.0, Path::new(text(path, "path")?)))
}

/// Trains in place with the model's own config. `steps` may be null.
/// On failure the weights hold the state reached before the error.
///
/// # Safety
/// `model` and `dataset` must be null or live handles.
#[no_mangle]
pub unsafe extern "C" fn ssc_model_train(model: *mut SscModel, dataset: *const SscDataset, steps: *mut usize) -> SscStatus {
    call(|| {
        let m = get_mut(model, "model")?;
        let ds = get(dataset, "dataset")?;
        let outcome = train(&mut m.0, &ds.samples)?;
        if !steps.is_null() {
            *steps = outcome.steps;
        }
        Ok(())
    })
}

/// Predicted labels of sample `index` into `labels[0..len]`.
///
/// # Safety
/// `labels` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ssc_model_predict(model: *const SscModel, dataset: *const SscDataset, index: usize, labels: *mut u16, len: usize) -> SscStatus {
    call(|| {
        let pred = get(model, "model")?.0.predict(sample(get(dataset, "dataset")?, index)?)?;
        copy_labels(&pred, labels, len)
    })
}

/// Scores the model on every sample with `workers` threads.
///
/// # Safety
/// `model` and `dataset` must be null or live handles; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_model_evaluate(model: *const SscModel, dataset: *const SscDataset, workers: usize, out: *mut *mut SscConfusion) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        let cm = evaluate(&get(model, "model")?.0, &get(dataset, "dataset")?.samples, workers)?;
        *out = boxed(SscConfusion(cm));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssc_model_free(model: *mut SscModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `cm` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_confusion_scene_iou(cm: *const SscConfusion, out: *mut f64) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        *out = get(cm, "confusion matrix")?.0.scene_iou();
        Ok(())
    })
}

/// Mean IoU over the non-empty classes present in prediction or ground truth.
///
/// # Safety
/// `cm` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_confusion_miou(cm: *const SscConfusion, out: *mut f64) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        *out = get(cm, "confusion matrix")?.0.semantic_miou().1;
        Ok(())
    })
}

/// Number of valid voxels with ground truth `gt` predicted as `pred`.
///
/// # Safety
/// `cm` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn ssc_confusion_count(cm: *const SscConfusion, gt: usize, pred: usize, out: *mut u64) -> SscStatus {
    call(|| {
        let out = slot(out, "out")?;
        let cm = &get(cm, "confusion matrix")?.0;
        let n = cm.num_classes();
        if gt >= n || pred >= n {
            return Err(Error::Config(format!("class pair ({gt}, {pred}) out of range for {n} classes")));
        }
        *out = cm.count(gt, pred);
        Ok(())
    })
}

/// # Safety
/// `cm` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssc_confusion_free(cm: *mut SscConfusion) {
    if !cm.is_null() {
        drop(Box::from_raw(cm));
    }
}
