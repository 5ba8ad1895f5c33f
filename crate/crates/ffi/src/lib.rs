//! C interface: opaque handles for bundles, runs and evaluation reports.
//!
//! Every fallible call returns a [`GraceStatus`]; on failure the message is
//! available from [`grace_last_error`] on the same thread. Handles are not
//! thread-safe; use one per thread or serialize access.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use grace_core::causal::MechanismKind;
use grace_core::encoder::GnnKind;
use grace_core::evalsuite::{evaluate, write_metrics_csv, write_oracle_json, EvalOptions, EvalReport};
use grace_core::model::composite_gradcheck;
use grace_core::scmsynth::{generate_benchmark, read_bundle, write_bundle, BenchmarkSpec, Bundle};
use grace_core::trainer::{
    final_temperature, load_checkpoint, save_checkpoint, standard_splits, train_until, write_train_log, TrainConfig,
    TrainState,
};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraceStatus {
    Ok = 0,
    /// Bad configuration or argument value.
    Usage = 1,
    /// Unreadable, malformed or inconsistent data.
    Data = 2,
    /// Non-finite values during training or evaluation.
    Numeric = 3,
    NullArgument = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// A dataset with its context network and, for synthetic data, ground truth.
pub struct GraceBundle(Bundle);

/// A configuration plus model and optimizer state.
pub struct GraceRun {
    cfg: TrainConfig,
    state: TrainState,
}

/// Held-out metrics of one run.
pub struct GraceReport(EvalReport);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GraceMetrics {
    pub n_real: usize,
    pub n_gen: usize,
    /// False when the real mean profile is flat and R² is undefined.
    pub r2_defined: bool,
    pub r2: f64,
    pub rmse: f64,
    pub mmd: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct GraceOracle {
    pub mean_abs_corr: f64,
    pub target_accuracy: f64,
    pub shd: usize,
    pub best_shd: usize,
    pub best_tau: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(GraceStatus, String);

impl From<grace_core::Error> for Failure {
    fn from(e: grace_core::Error) -> Self {
        let status = match e.exit_code() {
            1 => GraceStatus::Usage,
            3 => GraceStatus::Numeric,
            _ => GraceStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GraceStatus::NullArgument, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GraceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GraceStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal error: {msg}"));
            GraceStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GraceStatus::Usage, format!("{what} is not UTF-8")))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    text(p, what).map(PathBuf::from)
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn get<'a, T>(h: *const T, what: &str) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grace_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn grace_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generates a synthetic benchmark with default settings apart from the
/// given sizes.
///
/// # Safety
/// `out` must be a valid pointer to write a handle into.
#[no_mangle]
pub unsafe extern "C" fn grace_bundle_synth(
    p: usize,
    d: usize,
    n_obs: usize,
    n_per_intervention: usize,
    doubles: usize,
    seed: u64,
    out: *mut *mut GraceBundle,
) -> GraceStatus {
    guard(|| {
        let b = generate_benchmark(&BenchmarkSpec {
            p,
            d,
            n_obs,
            n_per_intervention,
            doubles,
            seed,
            ..BenchmarkSpec::default()
        })?;
        put(out, GraceBundle(Bundle::from_benchmark(b)?))
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn grace_bundle_open(dir: *const c_char, out: *mut *mut GraceBundle) -> GraceStatus {
    guard(|| {
        let dir = path(dir, "dir")?;
        put(out, GraceBundle(read_bundle(&dir)?))
    })
}

/// Writes the bundle layout into `dir`, which must not hold another bundle.
///
/// # Safety
/// `bundle` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn grace_bundle_write(bundle: *const GraceBundle, dir: *const c_char) -> GraceStatus {
    guard(|| {
        let b = &get(bundle, "bundle")?.0;
        let dir = path(dir, "dir")?;
        let truth = b
            .truth
            .clone()
            .ok_or_else(|| Failure(GraceStatus::Data, "only synthetic bundles can be written".into()))?;
        let spec = b.manifest.as_ref().and_then(|m| m.spec.clone()).unwrap_or_default();
        let bench = grace_core::scmsynth::Benchmark {
            spec,
            truth,
            data: b.data.clone(),
            context: b.context.clone(),
        };
        Ok(write_bundle(&bench, &dir)?)
    })
}

/// Number of observed features, or 0 for a NULL handle.
///
/// # Safety
/// `bundle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grace_bundle_features(bundle: *const GraceBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.data.d())
}

/// # Safety
/// `bundle` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn grace_bundle_free(bundle: *mut GraceBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Creates an untrained run. `config` holds `key = value` lines and may be
/// NULL for defaults.
///
/// # Safety
/// `bundle` must be a live handle, `config` NULL or NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn grace_run_new(
    bundle: *const GraceBundle,
    config: *const c_char,
    out: *mut *mut GraceRun,
) -> GraceStatus {
    guard(|| {
        let b = &get(bundle, "bundle")?.0;
        let cfg = if config.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::parse(text(config, "config")?, "<config>")?
        };
        let splits = standard_splits(&cfg, &b.data)?;
        let state = TrainState::new(&cfg, &splits.train, &b.context)?;
        put(out, GraceRun { cfg, state })
    })
}

/// Trains until `until` epochs are complete (at most the configured count).
/// `bundle` must be the one the run was created from.
///
/// # Safety
/// `run` and `bundle` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn grace_run_train(run: *mut GraceRun, bundle: *const GraceBundle, until: usize) -> GraceStatus {
    guard(|| {
        let r = run.as_mut().ok_or_else(|| null("run"))?;
        let b = &get(bundle, "bundle")?.0;
        let splits = standard_splits(&r.cfg, &b.data)?;
        Ok(train_until(&mut r.state, &splits.train, &r.cfg, until, |_| {})?)
    })
}

/// Completed epochs, or 0 for a NULL handle.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grace_run_epoch(run: *const GraceRun) -> usize {
    run.as_ref().map_or(0, |r| r.state.epoch)
}

/// Latent dimension, or 0 for a NULL handle.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grace_run_latent_dim(run: *const GraceRun) -> usize {
    run.as_ref().map_or(0, |r| r.state.model.cfg.p)
}

/// Copies the learned p×p adjacency, row-major, into `out` of length `len`.
///
/// # Safety
/// `run` must be a live handle and `out` point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn grace_run_dag(run: *const GraceRun, out: *mut f64, len: usize) -> GraceStatus {
    guard(|| {
        let r = get(run, "run")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = r.state.model.dag_matrix();
        if len != m.data().len() {
            return Err(Failure(
                GraceStatus::Usage,
                format!("buffer holds {len} values, adjacency has {}", m.data().len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(m.data());
        Ok(())
    })
}

/// Writes `config.cfg`, `checkpoint.bin` and `train_log.csv` into `dir`,
/// creating it if needed.
///
/// # Safety
/// `run` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn grace_run_save(run: *const GraceRun, dir: *const c_char) -> GraceStatus {
    guard(|| {
        let r = get(run, "run")?;
        let dir = path(dir, "dir")?;
        std::fs::create_dir_all(&dir).map_err(|e| grace_core::Error::io(&dir, e))?;
        r.cfg.write(&dir.join("config.cfg"))?;
        save_checkpoint(&r.state.to_checkpoint(&r.cfg), &dir.join("checkpoint.bin"))?;
        Ok(write_train_log(&dir.join("train_log.csv"), &r.state.log)?)
    })
}

/// Reopens a saved run against its bundle.
///
/// # Safety
/// `dir` must be NUL-terminated, `bundle` a live handle, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn grace_run_open(
    dir: *const c_char,
    bundle: *const GraceBundle,
    out: *mut *mut GraceRun,
) -> GraceStatus {
    guard(|| {
        let dir = path(dir, "dir")?;
        let b = &get(bundle, "bundle")?.0;
        let cfg = TrainConfig::read(&dir.join("config.cfg"))?;
        let ck = load_checkpoint(&dir.join("checkpoint.bin"), Some(&cfg.hash()))?;
        let splits = standard_splits(&cfg, &b.data)?;
        let state = TrainState::from_checkpoint(ck, &cfg, &splits.train, &b.context)?;
        put(out, GraceRun { cfg, state })
    })
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn grace_run_free(run: *mut GraceRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Scores the run on the held-out split of `bundle`.
///
/// # Safety
/// `run` and `bundle` must be live handles, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn grace_run_evaluate(
    run: *const GraceRun,
    bundle: *const GraceBundle,
    out: *mut *mut GraceReport,
) -> GraceStatus {
    guard(|| {
        let r = get(run, "run")?;
        let b = &get(bundle, "bundle")?.0;
        let splits = standard_splits(&r.cfg, &b.data)?;
        let report = evaluate(
            &r.state.model,
            &splits.test,
            b.truth.as_ref(),
            final_temperature(&r.cfg),
            &r.cfg.mmd()?,
            &EvalOptions::default(),
        )?;
        put(out, GraceReport(report))
    })
}

/// Number of scored interventional regimes, or 0 for a NULL handle.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn grace_report_len(report: *const GraceReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.rows.len())
}

/// # Safety
/// `report` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn grace_report_row(report: *const GraceReport, index: usize, out: *mut GraceMetrics) -> GraceStatus {
    guard(|| {
        let r = &get(report, "report")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let row = r
            .rows
            .get(index)
            .ok_or_else(|| Failure(GraceStatus::Usage, format!("row {index} out of range ({})", r.rows.len())))?;
        *out = GraceMetrics {
            n_real: row.n_real,
            n_gen: row.n_gen,
            r2_defined: row.r2.is_some(),
            r2: row.r2.unwrap_or(f64::NAN),
            rmse: row.rmse,
            mmd: row.mmd,
        };
        Ok(())
    })
}

/// Oracle scores; `GRACE_STATUS_DATA` when the bundle has no ground truth or
/// scoring was skipped.
///
/// # Safety
/// `report` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn grace_report_oracle(report: *const GraceReport, out: *mut GraceOracle) -> GraceStatus {
    guard(|| {
        let r = &get(report, "report")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let o = r.oracle.as_ref().ok_or_else(|| {
            let why = r.oracle_skipped.clone().unwrap_or_else(|| "no ground truth".into());
            Failure(GraceStatus::Data, why)
        })?;
        *out = GraceOracle {
            mean_abs_corr: o.mean_abs_corr,
            target_accuracy: o.target_accuracy,
            shd: o.shd,
            best_shd: o.best_shd,
            best_tau: o.best_tau,
        };
        Ok(())
    })
}

/// Writes `metrics.csv` and, when present, `oracle.json` into `dir`.
///
/// # Safety
/// `report` must be a live handle; `dir` a NUL-terminated existing directory.
#[no_mangle]
pub unsafe extern "C" fn grace_report_write(report: *const GraceReport, dir: *const c_char) -> GraceStatus {
    guard(|| {
        let r = &get(report, "report")?.0;
        let dir = path(dir, "dir")?;
        write_metrics_csv(&r.rows, &dir.join("metrics.csv"))?;
        if let Some(o) = &r.oracle {
            write_oracle_json(o, &dir.join("oracle.json"))?;
        }
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn grace_report_free(report: *mut GraceReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Worst relative gradient error of the training loss on a small model,
/// over both mechanisms and all encoder kinds.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn grace_gradcheck(eps: f64, seed: u64, out: *mut f64) -> GraceStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(eps > 0.0) {
            return Err(Failure(GraceStatus::Usage, format!("eps must be positive, got {eps}")));
        }
        let mut worst: f64 = 0.0;
        for mech in [MechanismKind::Linear, MechanismKind::Mlp] {
            for kind in [GnnKind::Sage, GnnKind::Gcn, GnnKind::Gat] {
                worst = worst.max(composite_gradcheck(mech, kind, eps, seed)?);
            }
        }
        *out = worst;
        Ok(())
    })
}
