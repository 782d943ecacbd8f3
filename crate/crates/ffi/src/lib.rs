//! C ABI over `mice-core`.
//!
//! Every function returns a [`MiceStatus`]; on failure the message is
//! available from [`mice_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.

use mice::checkpoint::{load_checkpoint, save_checkpoint};
use mice::config::load_config;
use mice::data::{generate, load_dataset, Dataset, SyntheticSpec};
use mice::metrics;
use mice::trainer::{evaluate, fit, TrainConfig, TrainState};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Data = 5,
    Training = 6,
    Checkpoint = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded or generated dataset.
pub struct MiceDataset(Dataset);

/// A trained model together with its configuration.
pub struct MiceModel {
    state: TrainState,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), (MiceStatus, String)>) -> MiceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MiceStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MiceStatus::Panic
        }
    }
}

fn err<E: std::fmt::Display>(status: MiceStatus) -> impl FnOnce(E) -> (MiceStatus, String) {
    move |e| (status, e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (MiceStatus, String)> {
    if p.is_null() {
        return Err((MiceStatus::NullPointer, "null path".into()));
    }
    CStr::from_ptr(p).to_str().map(PathBuf::from).map_err(|_| (MiceStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (MiceStatus, String)> {
    p.as_ref().ok_or_else(|| (MiceStatus::NullPointer, format!("null {what}")))
}

fn out_ptr<T>(p: *mut T) -> Result<(), (MiceStatus, String)> {
    if p.is_null() {
        Err((MiceStatus::NullPointer, "null output pointer".into()))
    } else {
        Ok(())
    }
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mice_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generate a synthetic dataset of `n_clusters * n_per_cluster` points.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn mice_dataset_generate(
    n_clusters: usize,
    d_input: usize,
    n_per_cluster: usize,
    concentration: f64,
    seed: u64,
    out: *mut *mut MiceDataset,
) -> MiceStatus {
    guard(|| {
        out_ptr(out)?;
        let spec = SyntheticSpec { n_clusters, d_input, n_per_cluster, concentration, seed };
        let ds = generate(&spec).map_err(err(MiceStatus::InvalidArgument))?;
        *out = Box::into_raw(Box::new(MiceDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mice_dataset_load(path: *const c_char, out: *mut *mut MiceDataset) -> MiceStatus {
    guard(|| {
        out_ptr(out)?;
        let ds = load_dataset(&path_arg(path)?).map_err(err(MiceStatus::Data))?;
        *out = Box::into_raw(Box::new(MiceDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mice_dataset_free(ds: *mut MiceDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mice_dataset_len(ds: *const MiceDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mice_dataset_dim(ds: *const MiceDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.dim())
}

/// Train a model with the configuration file at `config_path`.
///
/// # Safety
/// `config_path` must be a NUL-terminated string, `ds` a live handle and
/// `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mice_train(
    config_path: *const c_char,
    ds: *const MiceDataset,
    out: *mut *mut MiceModel,
) -> MiceStatus {
    guard(|| {
        out_ptr(out)?;
        let ds = deref(ds, "dataset")?;
        let config = load_config(&path_arg(config_path)?).map_err(err(MiceStatus::Config))?;
        let (state, _) = fit(&config, &ds.0).map_err(err(MiceStatus::Training))?;
        *out = Box::into_raw(Box::new(MiceModel { state, config }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mice_model_save(model: *const MiceModel, path: *const c_char) -> MiceStatus {
    guard(|| {
        let m = deref(model, "model")?;
        save_checkpoint(&m.state, &m.config, &path_arg(path)?).map_err(err(MiceStatus::Checkpoint))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mice_model_load(path: *const c_char, out: *mut *mut MiceModel) -> MiceStatus {
    guard(|| {
        out_ptr(out)?;
        let (state, config) = load_checkpoint(&path_arg(path)?).map_err(err(MiceStatus::Checkpoint))?;
        *out = Box::into_raw(Box::new(MiceModel { state, config }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mice_model_free(model: *mut MiceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of clusters of a model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mice_model_clusters(model: *const MiceModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.n_clusters)
}

/// Cluster every point. Writes `len` labels (0-based) to `labels` and, when
/// `posterior` is non-null, `len * K` row-major posterior entries.
///
/// # Safety
/// `labels` must hold `labels_len` elements and `posterior`, if non-null,
/// `posterior_len` elements.
#[no_mangle]
pub unsafe extern "C" fn mice_evaluate(
    model: *const MiceModel,
    ds: *const MiceDataset,
    labels: *mut usize,
    labels_len: usize,
    posterior: *mut f64,
    posterior_len: usize,
) -> MiceStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let ds = deref(ds, "dataset")?;
        out_ptr(labels)?;
        let n = ds.0.len();
        let k = m.config.n_clusters;
        if labels_len < n || (!posterior.is_null() && posterior_len < n * k) {
            return Err((MiceStatus::BufferTooSmall, format!("need {n} labels and {} posterior entries", n * k)));
        }
        let eval = evaluate(&m.state, &m.config, &ds.0).map_err(err(MiceStatus::Training))?;
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&eval.labels);
        if !posterior.is_null() {
            std::slice::from_raw_parts_mut(posterior, n * k).copy_from_slice(eval.posterior.matrix().as_slice());
        }
        Ok(())
    })
}

#[derive(Clone, Copy)]
enum Metric {
    Acc,
    Nmi,
    Ari,
}

unsafe fn score(metric: Metric, truth: *const usize, pred: *const usize, len: usize, out: *mut f64) -> MiceStatus {
    guard(|| {
        out_ptr(out)?;
        if truth.is_null() || pred.is_null() {
            return Err((MiceStatus::NullPointer, "null label array".into()));
        }
        let t = std::slice::from_raw_parts(truth, len);
        let p = std::slice::from_raw_parts(pred, len);
        let v = match metric {
            Metric::Acc => metrics::acc(t, p),
            Metric::Nmi => metrics::nmi(t, p),
            Metric::Ari => metrics::ari(t, p),
        }
        .map_err(err(MiceStatus::InvalidArgument))?;
        *out = v;
        Ok(())
    })
}

/// Clustering accuracy under the best one-to-one label matching.
///
/// # Safety
/// `truth` and `pred` must hold `len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mice_acc(truth: *const usize, pred: *const usize, len: usize, out: *mut f64) -> MiceStatus {
    score(Metric::Acc, truth, pred, len, out)
}

/// Normalized mutual information (arithmetic-mean normalization).
///
/// # Safety
/// As for [`mice_acc`].
#[no_mangle]
pub unsafe extern "C" fn mice_nmi(truth: *const usize, pred: *const usize, len: usize, out: *mut f64) -> MiceStatus {
    score(Metric::Nmi, truth, pred, len, out)
}

/// Adjusted Rand index.
///
/// # Safety
/// As for [`mice_acc`].
#[no_mangle]
pub unsafe extern "C" fn mice_ari(truth: *const usize, pred: *const usize, len: usize, out: *mut f64) -> MiceStatus {
    score(Metric::Ari, truth, pred, len, out)
}
