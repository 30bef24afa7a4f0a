//! C interface to `dlrm-core`.
//!
//! Every function returns a [`DlrmStatus`]. On failure the message is kept
//! per thread and can be read with [`dlrm_last_error`]. Objects cross the
//! boundary as opaque pointers created by `*_new` and released by `*_free`.
//! Strings returned by the library are released with [`dlrm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dlrm_core::comms::TransportKind;
use dlrm_core::costmodel::{CommPlan, Regime, ScalingMode};
use dlrm_core::embedding::{
    embedding_backward, embedding_forward, embedding_update, EmbeddingTable, LookupBatch, UpdateStrategy,
};
use dlrm_core::harness::{preset, IndexDistribution, RunSpec, SyntheticData};
use dlrm_core::model::{Dlrm, TrainOptions};
use dlrm_core::optim::PrecisionMode;
use dlrm_core::tensor::DenseTensor;
use dlrm_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlrmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    IndexOutOfRange = 4,
    Config = 5,
    Infeasible = 6,
    Comm = 7,
    Io = 8,
    Panic = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlrmUpdateStrategy {
    Atomic = 0,
    Locked = 1,
    RaceFree = 2,
}

impl From<DlrmUpdateStrategy> for UpdateStrategy {
    fn from(s: DlrmUpdateStrategy) -> Self {
        match s {
            DlrmUpdateStrategy::Atomic => UpdateStrategy::AtomicExchange,
            DlrmUpdateStrategy::Locked => UpdateStrategy::LockedRowSimd,
            DlrmUpdateStrategy::RaceFree => UpdateStrategy::RaceFreePartitioned,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DlrmPrecision {
    Fp32 = 0,
    SplitBf16 = 1,
}

/// Predicted communication for one configuration and rank count.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DlrmCommPlan {
    pub ranks: usize,
    pub global_batch: usize,
    pub allreduce_elements: u64,
    pub allreduce_bytes_per_rank: f64,
    pub alltoall_total_bytes: u64,
    pub alltoall_bytes_per_rank: f64,
    pub alltoall_msg_bytes: f64,
    /// Bytes of table storage across all ranks.
    pub table_bytes: f64,
    /// 1 when allreduce traffic dominates at this rank count.
    pub allreduce_bound: i32,
}

/// An embedding table owned by the library.
pub struct DlrmTable {
    inner: EmbeddingTable,
}

/// A single-process model trained on synthetic data.
pub struct DlrmModel {
    model: Dlrm,
    data: SyntheticData,
    batch: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DlrmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) | Error::Blocking { .. } => DlrmStatus::Shape,
            Error::IndexOutOfRange { .. } | Error::InvalidBatch(_) => DlrmStatus::IndexOutOfRange,
            Error::Config(_) | Error::DuplicateParam(_) | Error::UnknownParam(_) => DlrmStatus::Config,
            Error::Infeasible(_) => DlrmStatus::Infeasible,
            Error::Comm(_) | Error::CollectiveMismatch(_) | Error::ForeignHandle { .. } => DlrmStatus::Comm,
            Error::Io(_) => DlrmStatus::Io,
            Error::Json(_) => DlrmStatus::InvalidArgument,
            Error::Invariant(_) => DlrmStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DlrmStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(DlrmStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DlrmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DlrmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DlrmStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn lookups(
    offsets: *const usize,
    batch: usize,
    indices: *const usize,
    nnz: usize,
) -> Result<LookupBatch, Failure> {
    let offsets = slice(offsets, batch + 1, "offsets")?;
    let indices = slice(indices, nnz, "indices")?;
    Ok(LookupBatch::new(offsets.to_vec(), indices.to_vec())?)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn dlrm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn dlrm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn dlrm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a `rows x dim` table from row-major `weights` (`rows * dim`
/// values, copied).
///
/// # Safety
/// `weights` must point to `rows * dim` floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dlrm_table_new(
    rows: usize,
    dim: usize,
    weights: *const f32,
    out: *mut *mut DlrmTable,
) -> DlrmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = rows.checked_mul(dim).ok_or_else(|| invalid("rows * dim overflows"))?;
        let w = slice(weights, len, "weights")?;
        let inner = EmbeddingTable::new(DenseTensor::from_vec(&[rows, dim], w.to_vec())?)?;
        *out = Box::into_raw(Box::new(DlrmTable { inner }));
        Ok(())
    })
}

/// # Safety
/// `table` must come from [`dlrm_table_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dlrm_table_free(table: *mut DlrmTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Copies the table into `out`, which holds `len` floats.
///
/// # Safety
/// `table` must be live and `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dlrm_table_weights(table: *const DlrmTable, out: *mut f32, len: usize) -> DlrmStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null("table"))?;
        let data = t.inner.weight().data();
        if len != data.len() {
            return Err(invalid(format!("buffer holds {len} values, table has {}", data.len())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(data);
        Ok(())
    })
}

/// Sums the rows of each bag. Bag `b` covers `indices[offsets[b]..offsets[b+1]]`;
/// `offsets` has `batch + 1` entries and `out` holds `batch * dim` floats.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dlrm_table_forward(
    table: *const DlrmTable,
    offsets: *const usize,
    batch: usize,
    indices: *const usize,
    nnz: usize,
    out: *mut f32,
) -> DlrmStatus {
    guard(|| {
        let t = table.as_ref().ok_or_else(|| null("table"))?;
        let lb = lookups(offsets, batch, indices, nnz)?;
        let y = embedding_forward(&t.inner, &lb)?;
        slice_mut(out, y.data().len(), "out")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Backward and SGD step in one call: every lookup's row receives
/// `-lr * dy[bag]`. `dy` holds `batch * dim` floats.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dlrm_table_sgd(
    table: *mut DlrmTable,
    offsets: *const usize,
    batch: usize,
    indices: *const usize,
    nnz: usize,
    dy: *const f32,
    lr: f32,
    strategy: DlrmUpdateStrategy,
    threads: usize,
) -> DlrmStatus {
    guard(|| {
        let t = table.as_mut().ok_or_else(|| null("table"))?;
        let lb = lookups(offsets, batch, indices, nnz)?;
        let dim = t.inner.dim();
        let dy = slice(dy, batch * dim, "dy")?;
        let grad = embedding_backward(&DenseTensor::from_vec(&[batch, dim], dy.to_vec())?, &lb)?;
        embedding_update(&mut t.inner, &grad, -lr, strategy.into(), threads)?;
        Ok(())
    })
}

/// Splits `len` floats into their upper (bf16) and lower 16-bit halves.
///
/// # Safety
/// `src`, `hi` and `lo` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn dlrm_bf16_split(src: *const f32, len: usize, hi: *mut u16, lo: *mut u16) -> DlrmStatus {
    guard(|| {
        let src = slice(src, len, "src")?;
        let hi = slice_mut(hi, len, "hi")?;
        let lo = slice_mut(lo, len, "lo")?;
        for ((v, h), l) in src.iter().zip(hi).zip(lo) {
            let b = v.to_bits();
            *h = (b >> 16) as u16;
            *l = b as u16;
        }
        Ok(())
    })
}

/// Inverse of [`dlrm_bf16_split`]; exact for every bit pattern.
///
/// # Safety
/// `hi`, `lo` and `out` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn dlrm_bf16_merge(hi: *const u16, lo: *const u16, len: usize, out: *mut f32) -> DlrmStatus {
    guard(|| {
        let hi = slice(hi, len, "hi")?;
        let lo = slice(lo, len, "lo")?;
        for ((o, &h), &l) in slice_mut(out, len, "out")?.iter_mut().zip(hi).zip(lo) {
            *o = f32::from_bits(((h as u32) << 16) | l as u32);
        }
        Ok(())
    })
}

/// Communication predicted for preset `config` at `ranks` ranks. `weak`
/// selects weak scaling (fixed per-rank batch).
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dlrm_costmodel_plan(
    config: *const c_char,
    ranks: usize,
    weak: bool,
    out: *mut DlrmCommPlan,
) -> DlrmStatus {
    guard(|| {
        let cfg = preset(string(config, "config")?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if ranks == 0 {
            return Err(invalid("ranks must be positive"));
        }
        let mode = if weak { ScalingMode::Weak } else { ScalingMode::Strong };
        let p = CommPlan::new(&cfg, ranks, mode);
        *out = DlrmCommPlan {
            ranks: p.ranks,
            global_batch: p.global_batch,
            allreduce_elements: p.allreduce_elements,
            allreduce_bytes_per_rank: p.allreduce_bytes_per_rank,
            alltoall_total_bytes: p.alltoall_total_bytes,
            alltoall_bytes_per_rank: p.alltoall_bytes_per_rank,
            alltoall_msg_bytes: p.alltoall_msg_bytes,
            table_bytes: p.table_bytes as f64,
            allreduce_bound: (p.regime() == Regime::AllreduceBound) as i32,
        };
        Ok(())
    })
}

/// Builds a single-process model for preset `config` with its own synthetic
/// data stream.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_new(
    config: *const c_char,
    seed: u64,
    lr: f32,
    precision: DlrmPrecision,
    out: *mut *mut DlrmModel,
) -> DlrmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = preset(string(config, "config")?)?;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(invalid("lr must be a non-negative number"));
        }
        let options = TrainOptions {
            precision: match precision {
                DlrmPrecision::Fp32 => PrecisionMode::Fp32,
                DlrmPrecision::SplitBf16 => PrecisionMode::SplitBf16,
            },
            lr,
            ..TrainOptions::default()
        };
        let data = SyntheticData::new(&cfg, seed.wrapping_add(1), IndexDistribution::Uniform)?;
        let batch = cfg.gn;
        let model = Dlrm::new_local(cfg, seed, options)?;
        *out = Box::into_raw(Box::new(DlrmModel { model, data, batch }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dlrm_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_free(model: *mut DlrmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trains `steps` iterations on fresh synthetic batches, writing each loss
/// to `losses` when it is not null.
///
/// # Safety
/// `model` must be live; `losses` is null or holds `steps` floats.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_train(model: *mut DlrmModel, steps: usize, losses: *mut f32) -> DlrmStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let mut out = if losses.is_null() {
            None
        } else {
            Some(slice_mut(losses, steps, "losses")?)
        };
        for i in 0..steps {
            let batch = m.data.next_batch(m.batch)?;
            let loss = m.model.train_step_local(&batch)?.loss;
            if let Some(o) = out.as_deref_mut() {
                o[i] = loss;
            }
        }
        Ok(())
    })
}

/// Hash of the model's dense parameters; equal models give equal values.
///
/// # Safety
/// `model` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dlrm_model_checksum(model: *const DlrmModel, out: *mut u64) -> DlrmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.dense_checksum();
        Ok(())
    })
}

/// Runs an in-process benchmark described by the JSON `spec` (fields of the
/// CLI run options; missing fields take defaults) and stores the JSON report
/// in `*report`, to be released with [`dlrm_string_free`].
///
/// # Safety
/// `spec` must be a NUL-terminated string and `report` writable.
#[no_mangle]
pub unsafe extern "C" fn dlrm_run_benchmark(spec: *const c_char, report: *mut *mut c_char) -> DlrmStatus {
    guard(|| {
        if report.is_null() {
            return Err(null("report"));
        }
        let spec: RunSpec = serde_json::from_str(string(spec, "spec")?).map_err(Error::from)?;
        if spec.transport == TransportKind::Tcp {
            // TCP ranks are child processes of the CLI binary.
            return Err(invalid("TCP runs are only available through the dlrm binary"));
        }
        let r = dlrm_core::harness::run_benchmark(&spec)?;
        let text = serde_json::to_string(&r).map_err(Error::from)?;
        *report = CString::new(text).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}
