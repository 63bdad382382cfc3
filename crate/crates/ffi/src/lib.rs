//! C ABI over the `dartsgt` library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free` function. Every fallible call returns a
//! [`DgStatus`]; on failure the message is available from
//! [`dg_last_error_message`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dartsgt::data::{generate_synthetic, Dataset, SyntheticTask};
use dartsgt::interpret::{analyze_dataset, DatasetReport, InterpretConfig};
use dartsgt::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use dartsgt::search::{search, train_final, SearchConfig};
use dartsgt::train::evaluate;
use dartsgt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad input: configuration, file contents, shapes or indices.
    Invalid = 2,
    /// A file could not be read or written.
    Io = 3,
    /// A computation failed, e.g. a non-finite loss.
    Runtime = 4,
    /// The library panicked; the handles involved should be considered unusable.
    Panic = 5,
}

/// Opaque dataset handle.
pub struct DgDataset(Dataset);

/// Opaque model handle.
pub struct DgModel(Model);

/// Opaque interpretability report handle.
pub struct DgReport(DatasetReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DgStatus {
    match err {
        Error::Io(_) | Error::File { .. } => DgStatus::Io,
        e if e.is_validation() => DgStatus::Invalid,
        _ => DgStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DgStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            DgStatus::NullArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Config(format!("{what} is not valid UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic dataset (`motif`, `degree-reg` or `community`).
///
/// # Safety
/// `task` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_dataset_generate(
    task: *const c_char,
    n_graphs: usize,
    seed: u64,
    out: *mut *mut DgDataset,
) -> DgStatus {
    guard(|| {
        let task: SyntheticTask = str_arg(task, "task")?.parse()?;
        let out = out_arg(out, "out")?;
        *out = boxed(DgDataset(generate_synthetic(task, n_graphs, seed)?));
        Ok(())
    })
}

/// Loads a JSON Lines dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_dataset_load(path: *const c_char, out: *mut *mut DgDataset) -> DgStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = boxed(DgDataset(Dataset::load(&path)?));
        Ok(())
    })
}

/// Writes a dataset as JSON Lines.
///
/// # Safety
/// `ds` must be a live dataset handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dg_dataset_save(ds: *const DgDataset, path: *const c_char) -> DgStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        ds.0.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of graphs, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn dg_dataset_len(ds: *const DgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or a dataset handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dg_dataset_free(ds: *mut DgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Searches an architecture on `ds` and trains the discrete model on all of it.
///
/// `config_json` is a JSON search configuration; null selects the defaults
/// for the dataset with the given seed.
///
/// # Safety
/// `ds` must be a live dataset handle, `config_json` null or NUL-terminated,
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_search_and_train(
    ds: *const DgDataset,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut DgModel,
) -> DgStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let cfg: SearchConfig = if config_json.is_null() {
            SearchConfig::new(ModelConfig::for_dataset(ds), seed)
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)?
        };
        let out = out_arg(out, "out")?;
        let outcome = search(ds, &cfg)?;
        let (model, _) = train_final(&outcome.architecture, ds, None, &cfg)?;
        *out = boxed(DgModel(model));
        Ok(())
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dg_model_load(path: *const c_char, out: *mut *mut DgModel) -> DgStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = boxed(DgModel(load_checkpoint(&path)?));
        Ok(())
    })
}

/// Writes a model checkpoint.
///
/// # Safety
/// `model` must be a live model handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dg_model_save(model: *const DgModel, path: *const c_char) -> DgStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        save_checkpoint(&model.0, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of GNN operator bundles held by the model.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn dg_model_gnn_bundles(model: *const DgModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.gnn_bundle_count())
}

/// Mean loss and task metric (accuracy or MAE) over `ds`.
///
/// # Safety
/// Handles must be live; `loss` and `metric` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_model_evaluate(
    model: *const DgModel,
    ds: *const DgDataset,
    loss: *mut f64,
    metric: *mut f64,
) -> DgStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "dataset")?;
        let (loss, metric) = (out_arg(loss, "loss")?, out_arg(metric, "metric")?);
        let e = evaluate(&model.0, &ds.0, None)?;
        *loss = e.loss;
        *metric = e.metric;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a model handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dg_model_free(model: *mut DgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the head-ablation analysis over every instance of `ds`.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_interpret(
    model: *const DgModel,
    ds: *const DgDataset,
    k: usize,
    node_fraction: f64,
    sign_agnostic: bool,
    out: *mut *mut DgReport,
) -> DgStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "dataset")?;
        let out = out_arg(out, "out")?;
        let cfg = InterpretConfig {
            k,
            node_fraction,
            sign_agnostic,
            thresholds: None,
        };
        *out = boxed(DgReport(analyze_dataset(&model.0, &ds.0, &cfg)?));
        Ok(())
    })
}

/// Number of instance reports.
///
/// # Safety
/// `report` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn dg_report_len(report: *const DgReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.instances.len())
}

/// Total forward passes spent by the analysis.
///
/// # Safety
/// `report` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn dg_report_forward_passes(report: *const DgReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.forward_passes)
}

/// Median specialization over instances.
///
/// # Safety
/// `report` must be a live report handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_report_median_specialization(report: *const DgReport, out: *mut f64) -> DgStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        *out_arg(out, "out")? = r.0.median_specialization;
        Ok(())
    })
}

/// Median focus over instances where focus is defined. `*defined` is false
/// (and `*out` NaN) when no instance has a defined focus.
///
/// # Safety
/// `report` must be a live report handle; `out` and `defined` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_report_median_focus(report: *const DgReport, out: *mut f64, defined: *mut bool) -> DgStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        let (out, defined) = (out_arg(out, "out")?, out_arg(defined, "defined")?);
        *defined = r.0.median_focus.is_some();
        *out = r.0.median_focus.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// JSON record of one instance; release it with [`dg_string_free`].
///
/// # Safety
/// `report` must be a live report handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dg_report_instance_json(
    report: *const DgReport,
    index: usize,
    out: *mut *mut c_char,
) -> DgStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        let out = out_arg(out, "out")?;
        let inst = r.0.instances.get(index).ok_or(Error::Index {
            what: "instance report",
            index,
            len: r.0.instances.len(),
        })?;
        *out = CString::new(inst.to_json()).unwrap_or_default().into_raw();
        Ok(())
    })
}

/// Writes `instances.jsonl` and `dataset.json` into `dir`.
///
/// # Safety
/// `report` must be a live report handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dg_report_write(report: *const DgReport, dir: *const c_char) -> DgStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        r.0.write(&PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a report handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dg_report_free(report: *mut DgReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
