//! C ABI over the `drdfl` library.
//!
//! Every function returns a [`DrdflStatus`]; on failure the message is
//! available from [`drdfl_last_error_message`] on the same thread. Handles are
//! opaque and owned by the caller, who releases them with the matching
//! `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use drdfl::data::{synth_generate, SynthKind, SynthParams, TraceDataset};
use drdfl::diffusion::{self, DiffusionModel};
use drdfl::harness::{run_experiment, ExperimentConfig};
use drdfl::predictor::PredictorParams;
use drdfl::provisioning::{self, ProvisioningParams};
use drdfl::trainer::evaluate_regret;
use drdfl::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrdflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad configuration, argument, file format or shape.
    Config = 3,
    Domain = 4,
    Io = 5,
    Optimization = 6,
    /// Training diverged; no checkpoint is returned across the boundary.
    Diverged = 7,
    BufferTooSmall = 8,
    Panic = 9,
    /// Regret is undefined because the oracle reward is not positive.
    Undefined = 10,
}

/// Mirror of the provisioning constants.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrdflProvisioningParams {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub omega: f64,
    pub p_act: f64,
    pub p_idle: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub n_slots: usize,
}

impl From<ProvisioningParams> for DrdflProvisioningParams {
    fn from(p: ProvisioningParams) -> Self {
        Self {
            a: p.a,
            b: p.b,
            gamma: p.gamma,
            omega: p.omega,
            p_act: p.p_act,
            p_idle: p.p_idle,
            a_min: p.a_min,
            a_max: p.a_max,
            n_slots: p.n_slots,
        }
    }
}

impl From<DrdflProvisioningParams> for ProvisioningParams {
    fn from(p: DrdflProvisioningParams) -> Self {
        Self {
            a: p.a,
            b: p.b,
            gamma: p.gamma,
            omega: p.omega,
            p_act: p.p_act,
            p_idle: p.p_idle,
            a_min: p.a_min,
            a_max: p.a_max,
            n_slots: p.n_slots,
        }
    }
}

/// Opaque workload dataset.
pub struct DrdflDataset(TraceDataset);
/// Opaque trained predictor.
pub struct DrdflPredictor(PredictorParams);
/// Opaque diffusion model.
pub struct DrdflDiffusion(DiffusionModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(DrdflStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            _ if e.is_config() => DrdflStatus::Config,
            Error::Domain(_) | Error::StepIndex { .. } => DrdflStatus::Domain,
            Error::Optimization(_) => DrdflStatus::Optimization,
            Error::PredictorDiverged { .. } | Error::DiffusionDiverged { .. } => DrdflStatus::Diverged,
            Error::Ingestion(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => DrdflStatus::Io,
            _ => DrdflStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: DrdflStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DrdflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            DrdflStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DrdflStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(fail(DrdflStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(DrdflStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(DrdflStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(DrdflStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(DrdflStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(DrdflStatus::NullPointer, format!("{what} is null")))
}

unsafe fn params_arg(p: *const DrdflProvisioningParams) -> Result<ProvisioningParams, Failure> {
    let p: ProvisioningParams = (*ref_arg(p, "params")?).into();
    p.validate()?;
    Ok(p)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn drdfl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length in
/// bytes, excluding the terminator. Returns 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn drdfl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Writes the default provisioning constants to `out`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn drdfl_params_default(out: *mut DrdflProvisioningParams) -> DrdflStatus {
    guard(|| {
        *out_arg(out, "out")? = ProvisioningParams::default().into();
        Ok(())
    })
}

/// Per-slot optimal capacities for predicted workloads `c_hat[0..n]`.
///
/// # Safety
/// `c_hat` and `out` must point to `n` readable / writable doubles.
#[no_mangle]
pub unsafe extern "C" fn drdfl_optimal_decision(
    params: *const DrdflProvisioningParams,
    c_hat: *const f64,
    n: usize,
    out: *mut f64,
) -> DrdflStatus {
    guard(|| {
        let p = params_arg(params)?;
        let c = slice_arg(c_hat, n, "c_hat")?;
        if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(fail(DrdflStatus::Domain, "predicted workloads must be finite and non-negative"));
        }
        let out = slice_out(out, n, "out")?;
        for (o, &ch) in out.iter_mut().zip(c) {
            *o = provisioning::optimal_capacity(ch, &p);
        }
        Ok(())
    })
}

/// Net reward of capacities `a` against workloads `c`, both of length `n`.
///
/// # Safety
/// `a` and `c` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_net_reward(
    params: *const DrdflProvisioningParams,
    a: *const f64,
    c: *const f64,
    n: usize,
    out: *mut f64,
) -> DrdflStatus {
    guard(|| {
        let p = params_arg(params)?;
        let a = slice_arg(a, n, "a")?;
        let c = slice_arg(c, n, "c")?;
        *out_arg(out, "out")? = provisioning::net_reward_slices(a, c, &p)?;
        Ok(())
    })
}

/// Oracle reward of workloads `c[0..n]`.
///
/// # Safety
/// `c` must point to `n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_oracle_reward(
    params: *const DrdflProvisioningParams,
    c: *const f64,
    n: usize,
    out: *mut f64,
) -> DrdflStatus {
    guard(|| {
        let p = params_arg(params)?;
        let c = slice_arg(c, n, "c")?;
        if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(fail(DrdflStatus::Domain, "workloads must be finite and non-negative"));
        }
        *out_arg(out, "out")? = provisioning::oracle_reward(c, &p);
        Ok(())
    })
}

/// Loads a dataset file written by the library or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_dataset_load(path: *const c_char, out: *mut *mut DrdflDataset) -> DrdflStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let d = TraceDataset::load(&path)?;
        *out = Box::into_raw(Box::new(DrdflDataset(d)));
        Ok(())
    })
}

/// Generates `count` synthetic sequences of the named kind (`ar1`,
/// `seasonal`, `bursty`) with default generator settings.
///
/// # Safety
/// `kind` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_dataset_synth(
    kind: *const c_char,
    count: usize,
    seed: u64,
    out: *mut *mut DrdflDataset,
) -> DrdflStatus {
    guard(|| {
        let kind: SynthKind = str_arg(kind, "kind")?.parse()?;
        let out = out_arg(out, "out")?;
        let d = synth_generate(kind, count, &SynthParams::default(), seed)?;
        *out = Box::into_raw(Box::new(DrdflDataset(d)));
        Ok(())
    })
}

/// Writes the dataset to `path`.
///
/// # Safety
/// `d` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn drdfl_dataset_save(d: *const DrdflDataset, path: *const c_char) -> DrdflStatus {
    guard(|| {
        let d = ref_arg(d, "dataset")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        d.0.save(&path)?;
        Ok(())
    })
}

/// Number of sequences and their length.
///
/// # Safety
/// `d` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_dataset_shape(
    d: *const DrdflDataset,
    count: *mut usize,
    seq_len: *mut usize,
) -> DrdflStatus {
    guard(|| {
        let d = ref_arg(d, "dataset")?;
        *out_arg(count, "count")? = d.0.len();
        *out_arg(seq_len, "seq_len")? = d.0.seq_len();
        Ok(())
    })
}

/// Copies sequence `index` into `out[0..len]`; `len` must equal the sequence
/// length.
///
/// # Safety
/// `d` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn drdfl_dataset_sequence(
    d: *const DrdflDataset,
    index: usize,
    out: *mut f64,
    len: usize,
) -> DrdflStatus {
    guard(|| {
        let d = ref_arg(d, "dataset")?;
        let seq = d
            .0
            .sequences
            .get(index)
            .ok_or_else(|| fail(DrdflStatus::Config, format!("sequence {index} out of range 0..{}", d.0.len())))?;
        if len < seq.len() {
            return Err(fail(
                DrdflStatus::BufferTooSmall,
                format!("buffer holds {len} values, sequence has {}", seq.len()),
            ));
        }
        slice_out(out, seq.len(), "out")?.copy_from_slice(seq);
        Ok(())
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `d` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drdfl_dataset_free(d: *mut DrdflDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Loads a predictor checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_predictor_load(path: *const c_char, out: *mut *mut DrdflPredictor) -> DrdflStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let p = PredictorParams::load(&path)?;
        *out = Box::into_raw(Box::new(DrdflPredictor(p)));
        Ok(())
    })
}

/// Context and horizon lengths of a predictor.
///
/// # Safety
/// `p` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_predictor_shape(
    p: *const DrdflPredictor,
    context: *mut usize,
    horizon: *mut usize,
) -> DrdflStatus {
    guard(|| {
        let p = ref_arg(p, "predictor")?;
        *out_arg(context, "context")? = p.0.context;
        *out_arg(horizon, "horizon")? = p.0.horizon;
        Ok(())
    })
}

/// Forecasts `horizon` workloads from `context` past values.
///
/// # Safety
/// `p` must be a live handle; `ctx` must hold `ctx_len` doubles and `out`
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn drdfl_predictor_predict(
    p: *const DrdflPredictor,
    ctx: *const f64,
    ctx_len: usize,
    out: *mut f64,
    out_len: usize,
) -> DrdflStatus {
    guard(|| {
        let p = ref_arg(p, "predictor")?;
        let ctx = slice_arg(ctx, ctx_len, "ctx")?;
        let pred = p.0.predict(ctx)?;
        if out_len < pred.len() {
            return Err(fail(
                DrdflStatus::BufferTooSmall,
                format!("buffer holds {out_len} values, forecast has {}", pred.len()),
            ));
        }
        slice_out(out, pred.len(), "out")?.copy_from_slice(&pred);
        Ok(())
    })
}

/// Normalized regret of the predictor's decisions on a dataset.
///
/// # Safety
/// Handles must be live; `params` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_evaluate_regret(
    p: *const DrdflPredictor,
    d: *const DrdflDataset,
    params: *const DrdflProvisioningParams,
    out: *mut f64,
) -> DrdflStatus {
    guard(|| {
        let p = ref_arg(p, "predictor")?;
        let d = ref_arg(d, "dataset")?;
        let params = params_arg(params)?;
        let out = out_arg(out, "out")?;
        let report = evaluate_regret(&p.0, &d.0, &params, "ffi")?;
        *out = report
            .regret
            .ok_or_else(|| fail(DrdflStatus::Undefined, "oracle reward is not positive"))?;
        Ok(())
    })
}

/// Releases a predictor handle. Null is ignored.
///
/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drdfl_predictor_free(p: *mut DrdflPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Loads a diffusion checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_diffusion_load(path: *const c_char, out: *mut *mut DrdflDiffusion) -> DrdflStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let m = DiffusionModel::load(&path)?;
        *out = Box::into_raw(Box::new(DrdflDiffusion(m)));
        Ok(())
    })
}

/// Draws `count` sequences from the model into a new dataset whose context
/// length is `context`.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_diffusion_sample(
    m: *const DrdflDiffusion,
    count: usize,
    context: usize,
    seed: u64,
    out: *mut *mut DrdflDataset,
) -> DrdflStatus {
    guard(|| {
        let m = ref_arg(m, "model")?;
        let out = out_arg(out, "out")?;
        if count == 0 {
            return Err(fail(DrdflStatus::Config, "sample count must be at least 1"));
        }
        if context == 0 || context >= m.0.seq_len() {
            return Err(fail(
                DrdflStatus::Config,
                format!("context {context} outside 1..{}", m.0.seq_len()),
            ));
        }
        let mut r = drdfl::rng::stream(seed);
        let s = diffusion::sample(&m.0, count, None, &mut r)?;
        let d = TraceDataset::new(
            s.sequences,
            context,
            m.0.seq_len() - context,
            m.0.norm,
            Default::default(),
        )?;
        *out = Box::into_raw(Box::new(DrdflDataset(d)));
        Ok(())
    })
}

/// Releases a diffusion handle. Null is ignored.
///
/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drdfl_diffusion_free(m: *mut DrdflDiffusion) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Runs the experiment described by a TOML file. `output_dir` may be null
/// to keep the configured directory. The mean regret of the first test set
/// is written to `mean_regret` when that pointer is non-null and the value
/// is defined.
///
/// # Safety
/// String arguments must be NUL-terminated; `mean_regret` null or writable.
#[no_mangle]
pub unsafe extern "C" fn drdfl_run_experiment(
    config_path: *const c_char,
    output_dir: *const c_char,
    mean_regret: *mut f64,
) -> DrdflStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(config_path, "config_path")?);
        let mut cfg = ExperimentConfig::load(&path)?;
        if !output_dir.is_null() {
            cfg.output_dir = PathBuf::from(str_arg(output_dir, "output_dir")?);
        }
        let manifest = run_experiment(&cfg)?;
        if let (Some(out), Some(id)) = (mean_regret.as_mut(), manifest.test_ids.first()) {
            if let Some(r) = manifest.mean_regret(id) {
                *out = r;
            }
        }
        Ok(())
    })
}
