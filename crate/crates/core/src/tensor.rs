//! Dense FP32 storage and the 4-D blocked layouts used by the MLP kernels.
//!
//! Framework-facing tensors are plain row-major [`DenseTensor`]s. Inside the
//! MLP, 2-D matrices are re-tiled into [`BlockedTensor4`]:
//!
//! * weights `W[K][C]` become `[K_b][C_b][b_c][b_k]` (each block transposed),
//! * activations `X[N][C]` become `[C_b][N_b][b_n][b_c]`.
//!
//! In both cases `to_blocked(t, role, b_a, b_b)` blocks the dense rows by `b_a`
//! and the dense columns by `b_b`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {len} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Bounds-checked element read.
    pub fn get(&self, index: &[usize]) -> Option<f32> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return None;
        }
        let offset: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data.get(offset).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    /// `[rows_b][cols_b][b_cols][b_rows]`, i.e. `W[K_b][C_b][b_c][b_k]`.
    Weight,
    /// `[cols_b][rows_b][b_rows][b_cols]`, i.e. `X[C_b][N_b][b_n][b_c]`.
    Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockedTensor4 {
    role: BlockRole,
    rows: usize,
    cols: usize,
    b_rows: usize,
    b_cols: usize,
    data: Vec<f32>,
}

fn check_factor(what: &'static str, extent: usize, factor: usize) -> Result<()> {
    if factor == 0 || !extent.is_multiple_of(factor) {
        return Err(Error::Blocking { what, extent, factor });
    }
    Ok(())
}

impl BlockedTensor4 {
    pub fn zeros(role: BlockRole, rows: usize, cols: usize, b_rows: usize, b_cols: usize) -> Result<Self> {
        check_factor("rows", rows, b_rows)?;
        check_factor("cols", cols, b_cols)?;
        Ok(Self {
            role,
            rows,
            cols,
            b_rows,
            b_cols,
            data: vec![0.0; rows * cols],
        })
    }

    pub(crate) fn from_raw(
        role: BlockRole,
        rows: usize,
        cols: usize,
        b_rows: usize,
        b_cols: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        check_factor("rows", rows, b_rows)?;
        check_factor("cols", cols, b_cols)?;
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "blocked buffer of {} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self {
            role,
            rows,
            cols,
            b_rows,
            b_cols,
            data,
        })
    }

    pub fn role(&self) -> BlockRole {
        self.role
    }

    /// Logical dense extents `(rows, cols)`.
    pub fn dense_dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Blocking factors `(b_rows, b_cols)`.
    pub fn factors(&self) -> (usize, usize) {
        (self.b_rows, self.b_cols)
    }

    /// The four extents in storage order.
    pub fn extents(&self) -> [usize; 4] {
        let (rb, cb) = (self.rows / self.b_rows, self.cols / self.b_cols);
        match self.role {
            BlockRole::Weight => [rb, cb, self.b_cols, self.b_rows],
            BlockRole::Activation => [cb, rb, self.b_rows, self.b_cols],
        }
    }

    pub fn block_len(&self) -> usize {
        self.b_rows * self.b_cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Contiguous block at outer coordinates `(o1, o2)` in storage order.
    pub fn block(&self, o1: usize, o2: usize) -> &[f32] {
        let [_, e2, _, _] = self.extents();
        let len = self.block_len();
        let start = (o1 * e2 + o2) * len;
        &self.data[start..start + len]
    }

    /// Storage offset of dense element `(r, c)`.
    pub fn offset_of(&self, r: usize, c: usize) -> usize {
        let (rb, ri) = (r / self.b_rows, r % self.b_rows);
        let (cb, ci) = (c / self.b_cols, c % self.b_cols);
        let n_rb = self.rows / self.b_rows;
        let n_cb = self.cols / self.b_cols;
        match self.role {
            BlockRole::Weight => ((rb * n_cb + cb) * self.b_cols + ci) * self.b_rows + ri,
            BlockRole::Activation => ((cb * n_rb + rb) * self.b_rows + ri) * self.b_cols + ci,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f32> {
        if r >= self.rows || c >= self.cols {
            return None;
        }
        Some(self.data[self.offset_of(r, c)])
    }
}

/// Re-tiles a 2-D dense tensor. `b_a` blocks the rows and `b_b` the columns.
pub fn to_blocked(t: &DenseTensor, role: BlockRole, b_a: usize, b_b: usize) -> Result<BlockedTensor4> {
    let (rows, cols) = t.dims2()?;
    let mut out = BlockedTensor4::zeros(role, rows, cols, b_a, b_b)?;
    let src = t.data();
    for r in 0..rows {
        for c in 0..cols {
            let off = out.offset_of(r, c);
            out.data[off] = src[r * cols + c];
        }
    }
    Ok(out)
}

pub fn from_blocked(t: &BlockedTensor4) -> DenseTensor {
    let (rows, cols) = t.dense_dims();
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = t.data[t.offset_of(r, c)];
        }
    }
    DenseTensor {
        shape: vec![rows, cols],
        data,
    }
}

/// Divisor of `extent` closest to `target` on a log scale (ties go to the
/// smaller factor). Used to clamp the default blocking factor to a dimension.
pub fn blocking_factor(extent: usize, target: usize) -> usize {
    if extent == 0 {
        return 1;
    }
    let target = target.max(1) as f64;
    let mut best = 1;
    let mut best_dist = f64::INFINITY;
    for d in 1..=extent {
        if !extent.is_multiple_of(d) {
            continue;
        }
        let dist = ((d as f64) / target).ln().abs();
        if dist < best_dist - 1e-12 {
            best = d;
            best_dist = dist;
        }
    }
    best
}
