//! EmbeddingBag forward/backward and the three sparse update strategies.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const DEFAULT_LOCK_STRIPES: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    weight: DenseTensor,
}

impl EmbeddingTable {
    pub fn new(weight: DenseTensor) -> Result<Self> {
        let (rows, dim) = weight.dims2()?;
        if rows == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "embedding table must be non-empty, got {rows}x{dim}"
            )));
        }
        Ok(Self { rows, dim, weight })
    }

    pub fn zeros(rows: usize, dim: usize) -> Result<Self> {
        Self::new(DenseTensor::zeros(&[rows, dim]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &DenseTensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut DenseTensor {
        &mut self.weight
    }

    pub fn into_weight(self) -> DenseTensor {
        self.weight
    }
}

/// Read access to table rows, so bags can be reduced out of FP32 tables and
/// BF16 hi planes alike.
pub trait RowSource: Sync {
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    /// `out += row[r]`
    fn accumulate_row(&self, r: usize, out: &mut [f32]);
}

impl RowSource for EmbeddingTable {
    fn rows(&self) -> usize {
        self.rows
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn accumulate_row(&self, r: usize, out: &mut [f32]) {
        for (o, w) in out.iter_mut().zip(self.weight.row(r)) {
            *o += *w;
        }
    }
}

/// Bags of indices described by offsets: bag `n` is `indices[offsets[n]..offsets[n+1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LookupBatch {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl LookupBatch {
    pub fn new(offsets: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) {
            return Err(Error::InvalidBatch("offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidBatch("offsets must be nondecreasing".into()));
        }
        if *offsets.last().unwrap() != indices.len() {
            return Err(Error::InvalidBatch(format!(
                "last offset {} != number of indices {}",
                offsets.last().unwrap(),
                indices.len()
            )));
        }
        Ok(Self { offsets, indices })
    }

    /// Fixed bag size, the layout the synthetic generator produces.
    pub fn uniform_bags(bag: usize, indices: Vec<usize>) -> Result<Self> {
        if bag == 0 || !indices.len().is_multiple_of(bag) {
            return Err(Error::InvalidBatch(format!(
                "{} indices do not split into bags of {bag}",
                indices.len()
            )));
        }
        let n = indices.len() / bag;
        Self::new((0..=n).map(|i| i * bag).collect(), indices)
    }

    pub fn batch_size(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_lookups(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn bag(&self, n: usize) -> &[usize] {
        &self.indices[self.offsets[n]..self.offsets[n + 1]]
    }

    pub fn validate(&self, rows: usize) -> Result<()> {
        match self.indices.iter().position(|&i| i >= rows) {
            Some(position) => Err(Error::IndexOutOfRange {
                position,
                index: self.indices[position],
                rows,
            }),
            None => Ok(()),
        }
    }

    /// Sub-batch of bags `[start, end)`, offsets rebased to zero.
    pub fn slice_bags(&self, start: usize, end: usize) -> LookupBatch {
        let base = self.offsets[start];
        let offsets = self.offsets[start..=end].iter().map(|o| o - base).collect();
        let indices = self.indices[base..self.offsets[end]].to_vec();
        LookupBatch { offsets, indices }
    }
}

/// Per-lookup gradient rows: `dw` row `s` belongs to table row `indices[s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad {
    indices: Vec<usize>,
    dw: DenseTensor,
}

impl SparseGrad {
    pub fn new(indices: Vec<usize>, dw: DenseTensor) -> Result<Self> {
        let (rows, _) = dw.dims2()?;
        if rows != indices.len() {
            return Err(Error::shape(format!(
                "{} indices for {rows} gradient rows",
                indices.len()
            )));
        }
        Ok(Self { indices, dw })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            dw: DenseTensor::zeros(&[0, dim]),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dw(&self) -> &DenseTensor {
        &self.dw
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dw.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateStrategy {
    /// FP32 add through a compare-and-swap loop on each element's bit pattern.
    #[serde(rename = "atomic")]
    AtomicExchange,
    /// Striped per-row locks around a vectorized row update.
    #[serde(rename = "locked")]
    LockedRowSimd,
    /// Rows partitioned across threads; every thread scans all lookups.
    #[serde(rename = "racefree")]
    RaceFreePartitioned,
}

impl std::str::FromStr for UpdateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "atomic" => Ok(Self::AtomicExchange),
            "locked" => Ok(Self::LockedRowSimd),
            "racefree" => Ok(Self::RaceFreePartitioned),
            other => Err(Error::config(format!("unknown update strategy '{other}'"))),
        }
    }
}

pub fn embedding_forward(table: &EmbeddingTable, batch: &LookupBatch) -> Result<DenseTensor> {
    embedding_forward_from(table, batch)
}

/// `Y[n] = sum of rows in bag n`; empty bags produce zero rows.
pub fn embedding_forward_from<R: RowSource + ?Sized>(table: &R, batch: &LookupBatch) -> Result<DenseTensor> {
    batch.validate(table.rows())?;
    let dim = table.dim();
    let n = batch.batch_size();
    let mut out = DenseTensor::zeros(&[n, dim]);
    out.data_mut()
        .par_chunks_mut(dim.max(1))
        .enumerate()
        .with_min_len(64)
        .for_each(|(bag, row)| {
            for &ind in batch.bag(bag) {
                table.accumulate_row(ind, row);
            }
        });
    Ok(out)
}

/// Expands `dY[N][E]` into one gradient row per lookup.
pub fn embedding_backward(dy: &DenseTensor, batch: &LookupBatch) -> Result<SparseGrad> {
    let (n, dim) = dy.dims2()?;
    if n != batch.batch_size() {
        return Err(Error::shape(format!(
            "gradient has {n} rows, batch has {} bags",
            batch.batch_size()
        )));
    }
    let offsets = batch.offsets();
    let mut dw = DenseTensor::zeros(&[batch.num_lookups(), dim]);
    if dim > 0 {
        dw.data_mut()
            .par_chunks_mut(dim)
            .enumerate()
            .with_min_len(256)
            .for_each(|(s, row)| {
                // bag containing lookup s
                let bag = offsets.partition_point(|&o| o <= s) - 1;
                row.copy_from_slice(dy.row(bag));
            });
    }
    SparseGrad::new(batch.indices().to_vec(), dw)
}

/// Half-open row range `[M*tid/T, M*(tid+1)/T)` owned by thread `tid`.
pub fn partition_rows(rows: usize, nthreads: usize, tid: usize) -> (usize, usize) {
    assert!(nthreads >= 1 && tid < nthreads, "tid {tid} outside 0..{nthreads}");
    ((rows * tid) / nthreads, (rows * (tid + 1)) / nthreads)
}

/// `W[I[i]] += alpha * dW[i]` for every lookup. `alpha` carries the sign, so
/// SGD passes `-lr`.
pub fn embedding_update(
    table: &mut EmbeddingTable,
    grad: &SparseGrad,
    alpha: f32,
    strategy: UpdateStrategy,
    nthreads: usize,
) -> Result<()> {
    embedding_update_with_stripes(table, grad, alpha, strategy, nthreads, DEFAULT_LOCK_STRIPES)
}

pub fn embedding_update_with_stripes(
    table: &mut EmbeddingTable,
    grad: &SparseGrad,
    alpha: f32,
    strategy: UpdateStrategy,
    nthreads: usize,
    stripes: usize,
) -> Result<()> {
    if nthreads == 0 {
        return Err(Error::config("embedding update needs at least one thread"));
    }
    if grad.dim() != table.dim {
        return Err(Error::shape(format!(
            "gradient dim {} != table dim {}",
            grad.dim(),
            table.dim
        )));
    }
    if grad.is_empty() {
        return Ok(());
    }
    if let Some(position) = grad.indices.iter().position(|&i| i >= table.rows) {
        return Err(Error::IndexOutOfRange {
            position,
            index: grad.indices[position],
            rows: table.rows,
        });
    }
    match strategy {
        UpdateStrategy::AtomicExchange => update_atomic(table, grad, alpha, nthreads),
        UpdateStrategy::LockedRowSimd => update_locked(table, grad, alpha, nthreads, stripes.max(1)),
        UpdateStrategy::RaceFreePartitioned => update_race_free(table, grad, alpha, nthreads),
    }
    Ok(())
}

#[inline]
fn axpy(row: &mut [f32], alpha: f32, g: &[f32]) {
    for (w, d) in row.iter_mut().zip(g) {
        *w += alpha * *d;
    }
}

fn lookup_chunks(ns: usize, nthreads: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..nthreads)
        .map(move |t| partition_rows(ns, nthreads, t))
        .filter(|(a, b)| a < b)
}

fn update_atomic(table: &mut EmbeddingTable, grad: &SparseGrad, alpha: f32, nthreads: usize) {
    let dim = table.dim;
    let data = table.weight.data_mut();
    // SAFETY: AtomicU32 has the size and alignment of u32, which matches f32,
    // and the exclusive borrow guarantees no other access for the call.
    let cells: &[AtomicU32] = unsafe { &*(data as *mut [f32] as *const [AtomicU32]) };
    std::thread::scope(|scope| {
        for (start, end) in lookup_chunks(grad.len(), nthreads) {
            scope.spawn(move || {
                for s in start..end {
                    let base = grad.indices[s] * dim;
                    for (e, d) in grad.dw.row(s).iter().enumerate() {
                        let cell = &cells[base + e];
                        let mut cur = cell.load(Ordering::Relaxed);
                        loop {
                            let next = (f32::from_bits(cur) + alpha * *d).to_bits();
                            match cell.compare_exchange_weak(cur, next, Ordering::AcqRel, Ordering::Relaxed) {
                                Ok(_) => break,
                                Err(seen) => cur = seen,
                            }
                        }
                    }
                }
            });
        }
    });
}

struct SharedRows {
    ptr: *mut f32,
    dim: usize,
}

// SAFETY: rows are only materialized while holding the row's stripe lock.
unsafe impl Sync for SharedRows {}

impl SharedRows {
    /// # Safety
    /// Caller must hold the lock that covers row `r`.
    #[allow(clippy::mut_from_ref)]
    unsafe fn row(&self, r: usize) -> &mut [f32] {
        std::slice::from_raw_parts_mut(self.ptr.add(r * self.dim), self.dim)
    }
}

fn update_locked(table: &mut EmbeddingTable, grad: &SparseGrad, alpha: f32, nthreads: usize, stripes: usize) {
    let locks: Vec<Mutex<()>> = (0..stripes).map(|_| Mutex::new(())).collect();
    let rows = SharedRows {
        ptr: table.weight.data_mut().as_mut_ptr(),
        dim: table.dim,
    };
    let (rows, locks) = (&rows, &locks);
    std::thread::scope(|scope| {
        for (start, end) in lookup_chunks(grad.len(), nthreads) {
            scope.spawn(move || {
                for s in start..end {
                    let ind = grad.indices[s];
                    let _guard = locks[ind % stripes].lock().unwrap_or_else(|p| p.into_inner());
                    // SAFETY: stripe lock for `ind` is held; every writer of the
                    // row takes the same stripe.
                    let row = unsafe { rows.row(ind) };
                    axpy(row, alpha, grad.dw.row(s));
                }
            });
        }
    });
}

fn update_race_free(table: &mut EmbeddingTable, grad: &SparseGrad, alpha: f32, nthreads: usize) {
    let (rows, dim) = (table.rows, table.dim);
    let mut shards: Vec<(usize, &mut [f32])> = Vec::with_capacity(nthreads);
    let mut rest = table.weight.data_mut();
    for tid in 0..nthreads {
        let (start, end) = partition_rows(rows, nthreads, tid);
        let (mine, tail) = rest.split_at_mut((end - start) * dim);
        shards.push((start, mine));
        rest = tail;
    }
    std::thread::scope(|scope| {
        for (start, shard) in shards {
            let end = start + shard.len() / dim;
            if start == end {
                continue;
            }
            scope.spawn(move || {
                for (s, &ind) in grad.indices.iter().enumerate() {
                    if ind >= start && ind < end {
                        let off = (ind - start) * dim;
                        axpy(&mut shard[off..off + dim], alpha, grad.dw.row(s));
                    }
                }
            });
        }
    });
}
