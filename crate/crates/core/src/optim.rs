//! Plain SGD and Split-SGD-BF16.
//!
//! In split mode every FP32 parameter is stored as two 16-bit planes: the
//! upper half (a valid BF16 value, used by forward and backward) and the lower
//! half (kept only for the update). The update reassembles the exact FP32
//! value, applies an ordinary FP32 step and splits again, so the trajectory is
//! bit-identical to FP32 SGD.

use serde::{Deserialize, Serialize};

use crate::embedding::{embedding_update, EmbeddingTable, LookupBatch, RowSource, SparseGrad, UpdateStrategy};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const HI_MASK: u32 = 0xFFFF_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    Fp32,
    #[serde(rename = "bf16split")]
    SplitBf16,
    /// BF16 plus only 8 low bits of state. Loses precision on every update;
    /// exists to demonstrate that 8 extra bits are not enough.
    #[serde(rename = "bf16split8")]
    SplitBf16Lo8,
}

impl std::str::FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Self::Fp32),
            "bf16split" => Ok(Self::SplitBf16),
            "bf16split8" => Ok(Self::SplitBf16Lo8),
            other => Err(Error::config(format!("unknown dtype '{other}'"))),
        }
    }
}

#[inline]
pub fn bf16_hi(v: f32) -> u16 {
    (v.to_bits() >> 16) as u16
}

#[inline]
pub fn bf16_to_f32(hi: u16) -> f32 {
    f32::from_bits((hi as u32) << 16)
}

/// Two 16-bit planes that together alias an FP32 tensor exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitTensorBF16 {
    shape: Vec<usize>,
    hi: Vec<u16>,
    lo: Vec<u16>,
}

impl SplitTensorBF16 {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn hi(&self) -> &[u16] {
        &self.hi
    }

    pub fn lo(&self) -> &[u16] {
        &self.lo
    }

    pub fn len(&self) -> usize {
        self.hi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hi.is_empty()
    }

    /// Bytes held by both planes.
    pub fn storage_bytes(&self) -> usize {
        (self.hi.len() + self.lo.len()) * std::mem::size_of::<u16>()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        f32::from_bits(((self.hi[i] as u32) << 16) | self.lo[i] as u32)
    }

    pub fn reconstruct(&self) -> DenseTensor {
        let data = (0..self.len()).map(|i| self.get(i)).collect();
        DenseTensor::from_vec(&self.shape, data).expect("planes match shape")
    }

    /// The hi plane widened to FP32, the values forward/backward see.
    pub fn hi_as_f32(&self) -> DenseTensor {
        let data = self.hi.iter().map(|&h| bf16_to_f32(h)).collect();
        DenseTensor::from_vec(&self.shape, data).expect("planes match shape")
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Exact FP32 update applied to element `i`.
    #[inline]
    fn update(&mut self, i: usize, f: impl FnOnce(f32) -> f32) {
        let bits = f(self.get(i)).to_bits();
        self.hi[i] = (bits >> 16) as u16;
        self.lo[i] = bits as u16;
    }
}

pub fn split(t: &DenseTensor) -> SplitTensorBF16 {
    let (hi, lo) = t
        .data()
        .iter()
        .map(|v| {
            let bits = v.to_bits();
            ((bits >> 16) as u16, bits as u16)
        })
        .unzip();
    SplitTensorBF16 {
        shape: t.shape().to_vec(),
        hi,
        lo,
    }
}

/// FP32 copy with the low 16 bits of every element cleared.
pub fn bf16_truncate_forward(t: &DenseTensor) -> DenseTensor {
    let data = t.data().iter().map(|v| f32::from_bits(v.to_bits() & HI_MASK)).collect();
    DenseTensor::from_vec(t.shape(), data).expect("same shape")
}

impl RowSource for SplitTensorBF16 {
    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn dim(&self) -> usize {
        self.cols()
    }

    fn accumulate_row(&self, r: usize, out: &mut [f32]) {
        let dim = self.cols();
        for (o, &h) in out.iter_mut().zip(&self.hi[r * dim..(r + 1) * dim]) {
            *o += bf16_to_f32(h);
        }
    }
}

/// A dense parameter tensor in one of the supported storage modes.
#[derive(Clone, Debug, PartialEq)]
pub enum DenseParam {
    Fp32(DenseTensor),
    SplitBf16(SplitTensorBF16),
    /// hi plane plus bits 8..16 of the original value.
    SplitBf16Lo8 {
        shape: Vec<usize>,
        hi: Vec<u16>,
        lo8: Vec<u8>,
    },
}

impl DenseParam {
    pub fn new(t: DenseTensor, mode: PrecisionMode) -> Self {
        match mode {
            PrecisionMode::Fp32 => DenseParam::Fp32(t),
            PrecisionMode::SplitBf16 => DenseParam::SplitBf16(split(&t)),
            PrecisionMode::SplitBf16Lo8 => {
                let (hi, lo8) = t
                    .data()
                    .iter()
                    .map(|v| {
                        let b = v.to_bits();
                        ((b >> 16) as u16, (b >> 8) as u8)
                    })
                    .unzip();
                DenseParam::SplitBf16Lo8 {
                    shape: t.shape().to_vec(),
                    hi,
                    lo8,
                }
            }
        }
    }

    pub fn mode(&self) -> PrecisionMode {
        match self {
            DenseParam::Fp32(_) => PrecisionMode::Fp32,
            DenseParam::SplitBf16(_) => PrecisionMode::SplitBf16,
            DenseParam::SplitBf16Lo8 { .. } => PrecisionMode::SplitBf16Lo8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DenseParam::Fp32(t) => t.shape(),
            DenseParam::SplitBf16(s) => s.shape(),
            DenseParam::SplitBf16Lo8 { shape, .. } => shape,
        }
    }

    /// Values as the optimizer sees them (the master weights).
    pub fn master(&self) -> DenseTensor {
        match self {
            DenseParam::Fp32(t) => t.clone(),
            DenseParam::SplitBf16(s) => s.reconstruct(),
            DenseParam::SplitBf16Lo8 { shape, hi, lo8 } => {
                let data = hi.iter().zip(lo8).map(|(&h, &l)| lo8_value(h, l)).collect();
                DenseTensor::from_vec(shape, data).expect("planes match shape")
            }
        }
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            DenseParam::Fp32(t) => t.len() * 4,
            DenseParam::SplitBf16(s) => s.storage_bytes(),
            DenseParam::SplitBf16Lo8 { hi, lo8, .. } => hi.len() * 2 + lo8.len(),
        }
    }
}

#[inline]
fn lo8_value(hi: u16, lo8: u8) -> f32 {
    f32::from_bits(((hi as u32) << 16) | ((lo8 as u32) << 8))
}

/// `p -= lr * g`, executed on the FP32 value the storage mode represents.
pub fn sgd_step_dense(param: &mut DenseParam, grad: &DenseTensor, lr: f32) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "parameter {:?} vs gradient {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let g = grad.data();
    match param {
        DenseParam::Fp32(t) => {
            for (p, d) in t.data_mut().iter_mut().zip(g) {
                *p -= lr * *d;
            }
        }
        DenseParam::SplitBf16(s) => {
            for (i, d) in g.iter().enumerate() {
                s.update(i, |p| p - lr * *d);
            }
        }
        DenseParam::SplitBf16Lo8 { hi, lo8, .. } => {
            for (i, d) in g.iter().enumerate() {
                let bits = (lo8_value(hi[i], lo8[i]) - lr * *d).to_bits();
                hi[i] = (bits >> 16) as u16;
                lo8[i] = (bits >> 8) as u8;
            }
        }
    }
    Ok(())
}

/// Embedding table storage as the optimizer manages it.
#[derive(Clone, Debug, PartialEq)]
pub enum SparseTable {
    Fp32(EmbeddingTable),
    SplitBf16(SplitTensorBF16),
}

impl SparseTable {
    pub fn new(table: EmbeddingTable, mode: PrecisionMode) -> Result<Self> {
        match mode {
            PrecisionMode::Fp32 => Ok(SparseTable::Fp32(table)),
            PrecisionMode::SplitBf16 => Ok(SparseTable::SplitBf16(split(table.weight()))),
            PrecisionMode::SplitBf16Lo8 => Err(Error::config("the 8-bit split variant is limited to dense parameters")),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            SparseTable::Fp32(t) => t.rows(),
            SparseTable::SplitBf16(s) => s.shape()[0],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SparseTable::Fp32(t) => t.dim(),
            SparseTable::SplitBf16(s) => s.shape()[1],
        }
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            SparseTable::Fp32(t) => t.weight().len() * 4,
            SparseTable::SplitBf16(s) => s.storage_bytes(),
        }
    }

    /// FP32 master values (exact in both modes).
    pub fn master(&self) -> DenseTensor {
        match self {
            SparseTable::Fp32(t) => t.weight().clone(),
            SparseTable::SplitBf16(s) => s.reconstruct(),
        }
    }

    /// Bag sums over the values the forward pass is allowed to see: the FP32
    /// table, or the hi plane in split mode.
    pub fn forward(&self, batch: &LookupBatch) -> Result<DenseTensor> {
        match self {
            SparseTable::Fp32(t) => crate::embedding::embedding_forward_from(t, batch),
            SparseTable::SplitBf16(s) => crate::embedding::embedding_forward_from(s, batch),
        }
    }
}

/// Sparse SGD: `W[I[i]] -= lr * dW[i]` through [`embedding_update`] with
/// `alpha = -lr`. In split mode the touched rows are reassembled to FP32,
/// updated with the same strategy and split back, preserving per-row update
/// order.
pub fn sgd_step_sparse(
    table: &mut SparseTable,
    grad: &SparseGrad,
    lr: f32,
    strategy: UpdateStrategy,
    nthreads: usize,
) -> Result<()> {
    if grad.is_empty() {
        return Ok(());
    }
    match table {
        SparseTable::Fp32(t) => embedding_update(t, grad, -lr, strategy, nthreads),
        SparseTable::SplitBf16(s) => split_sparse_step(s, grad, lr, strategy, nthreads),
    }
}

fn split_sparse_step(
    planes: &mut SplitTensorBF16,
    grad: &SparseGrad,
    lr: f32,
    strategy: UpdateStrategy,
    nthreads: usize,
) -> Result<()> {
    let rows = planes.shape[0];
    let dim = planes.cols();
    if let Some(position) = grad.indices().iter().position(|&i| i >= rows) {
        return Err(Error::IndexOutOfRange {
            position,
            index: grad.indices()[position],
            rows,
        });
    }
    let mut touched = grad.indices().to_vec();
    touched.sort_unstable();
    touched.dedup();
    let mut compact = DenseTensor::zeros(&[touched.len(), dim]);
    for (slot, &r) in touched.iter().enumerate() {
        for (e, v) in compact.row_mut(slot).iter_mut().enumerate() {
            *v = planes.get(r * dim + e);
        }
    }
    let remapped: Vec<usize> = grad
        .indices()
        .iter()
        .map(|r| touched.binary_search(r).expect("index is in touched set"))
        .collect();
    let compact_grad = SparseGrad::new(remapped, grad.dw().clone())?;
    let mut compact = EmbeddingTable::new(compact)?;
    embedding_update(&mut compact, &compact_grad, -lr, strategy, nthreads)?;
    for (slot, &r) in touched.iter().enumerate() {
        for (e, v) in compact.weight().row(slot).iter().enumerate() {
            planes.update(r * dim + e, |_| *v);
        }
    }
    Ok(())
}

/// Identifier of a registered trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

enum LowPlane {
    Bits16(Vec<u16>),
    Bits8(Vec<u8>),
}

/// Optimizer state for parameters whose hi plane lives in the model.
///
/// The model keeps each dense parameter as FP32 values with the low 16 bits
/// cleared (the BF16 weights the kernels consume); this state holds the low
/// bits. Tables are handled through [`SparseTable`].
pub struct OptimizerState {
    mode: PrecisionMode,
    lr: f32,
    low: std::collections::BTreeMap<ParamId, Option<LowPlane>>,
}

impl OptimizerState {
    pub fn new(mode: PrecisionMode, lr: f32) -> Self {
        Self {
            mode,
            lr,
            low: Default::default(),
        }
    }

    pub fn mode(&self) -> PrecisionMode {
        self.mode
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn num_registered(&self) -> usize {
        self.low.len()
    }

    pub fn is_registered(&self, id: ParamId) -> bool {
        self.low.contains_key(&id)
    }

    /// Registers a dense parameter. In split modes the values are truncated in
    /// place to their hi plane and the low bits move into optimizer state.
    pub fn register_dense(&mut self, id: ParamId, values: &mut [f32]) -> Result<()> {
        if self.low.contains_key(&id) {
            return Err(Error::DuplicateParam(id.0));
        }
        let plane = match self.mode {
            PrecisionMode::Fp32 => None,
            PrecisionMode::SplitBf16 => Some(LowPlane::Bits16(
                values
                    .iter_mut()
                    .map(|v| {
                        let bits = v.to_bits();
                        *v = f32::from_bits(bits & HI_MASK);
                        bits as u16
                    })
                    .collect(),
            )),
            PrecisionMode::SplitBf16Lo8 => Some(LowPlane::Bits8(
                values
                    .iter_mut()
                    .map(|v| {
                        let bits = v.to_bits();
                        *v = f32::from_bits(bits & HI_MASK);
                        (bits >> 8) as u8
                    })
                    .collect(),
            )),
        };
        self.low.insert(id, plane);
        Ok(())
    }

    /// Registers an embedding table, converting its storage to the mode.
    /// The 8-bit variant applies to dense parameters only; its tables stay FP32.
    pub fn register_table(&mut self, id: ParamId, table: EmbeddingTable) -> Result<SparseTable> {
        if self.low.contains_key(&id) {
            return Err(Error::DuplicateParam(id.0));
        }
        let mode = match self.mode {
            PrecisionMode::SplitBf16Lo8 => PrecisionMode::Fp32,
            m => m,
        };
        let table = SparseTable::new(table, mode)?;
        self.low.insert(id, None);
        Ok(table)
    }

    /// Dense SGD on a registered parameter. `lr_scale` multiplies the
    /// learning rate.
    pub fn step_dense(&mut self, id: ParamId, values: &mut [f32], grad: &[f32]) -> Result<()> {
        if values.len() != grad.len() {
            return Err(Error::shape(format!(
                "{} parameters vs {} gradients",
                values.len(),
                grad.len()
            )));
        }
        let lr = self.lr;
        match self.low.get_mut(&id).ok_or(Error::UnknownParam(id.0))? {
            None => {
                for (p, g) in values.iter_mut().zip(grad) {
                    *p -= lr * *g;
                }
            }
            Some(LowPlane::Bits16(lo)) => {
                if lo.len() != values.len() {
                    return Err(Error::shape("low plane length differs from parameter"));
                }
                for ((p, l), g) in values.iter_mut().zip(lo.iter_mut()).zip(grad) {
                    let full = f32::from_bits(p.to_bits() | *l as u32);
                    let bits = (full - lr * *g).to_bits();
                    *p = f32::from_bits(bits & HI_MASK);
                    *l = bits as u16;
                }
            }
            Some(LowPlane::Bits8(lo)) => {
                if lo.len() != values.len() {
                    return Err(Error::shape("low plane length differs from parameter"));
                }
                for ((p, l), g) in values.iter_mut().zip(lo.iter_mut()).zip(grad) {
                    let full = f32::from_bits(p.to_bits() | ((*l as u32) << 8));
                    let bits = (full - lr * *g).to_bits();
                    *p = f32::from_bits(bits & HI_MASK);
                    *l = (bits >> 8) as u8;
                }
            }
        }
        Ok(())
    }

    /// FP32 master value of a registered dense parameter.
    pub fn master_dense(&self, id: ParamId, values: &[f32]) -> Result<Vec<f32>> {
        Ok(match self.low.get(&id).ok_or(Error::UnknownParam(id.0))? {
            None => values.to_vec(),
            Some(LowPlane::Bits16(lo)) => values
                .iter()
                .zip(lo)
                .map(|(p, l)| f32::from_bits(p.to_bits() | *l as u32))
                .collect(),
            Some(LowPlane::Bits8(lo)) => values
                .iter()
                .zip(lo)
                .map(|(p, l)| f32::from_bits(p.to_bits() | ((*l as u32) << 8)))
                .collect(),
        })
    }

    /// Bytes of optimizer-held low planes.
    pub fn state_bytes(&self) -> usize {
        self.low
            .values()
            .map(|p| match p {
                None => 0,
                Some(LowPlane::Bits16(v)) => v.len() * 2,
                Some(LowPlane::Bits8(v)) => v.len(),
            })
            .sum()
    }

    pub fn step_sparse(
        &self,
        table: &mut SparseTable,
        grad: &SparseGrad,
        lr_scale: f32,
        strategy: UpdateStrategy,
        nthreads: usize,
    ) -> Result<()> {
        sgd_step_sparse(table, grad, self.lr * lr_scale, strategy, nthreads)
    }
}
