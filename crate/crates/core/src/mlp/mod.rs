//! Fully-connected layers over blocked layouts.
//!
//! Weights live as `W[K_b][C_b][b_c][b_k]` and activations as
//! `X[C_b][N_b][b_n][b_c]`. A layer's output `Y[K_b][N_b][b_n][b_k]` is already
//! in activation layout for the next layer, so consecutive layers stay blocked
//! and conversion happens only at the MLP boundary.
//!
//! Every output block is produced by exactly one task, which reduces over its
//! whole inner dimension sequentially. Results therefore do not depend on the
//! number of worker threads.

mod brgemm;

pub use brgemm::{batch_reduce_gemm, MicroShape};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{blocking_factor, from_blocked, to_blocked, BlockRole, BlockedTensor4, DenseTensor};

pub const DEFAULT_BLOCK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    #[inline]
    fn grad(self, pre: f32, upstream: f32) -> f32 {
        match self {
            Activation::None => upstream,
            Activation::Relu => {
                if pre > 0.0 {
                    upstream
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-pre).exp());
                upstream * s * (1.0 - s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer {
    c_in: usize,
    k_out: usize,
    b_c: usize,
    b_k: usize,
    weight: BlockedTensor4,
    bias: DenseTensor,
    activation: Activation,
}

/// Output of [`fc_forward`]. `pre_activation` is kept for the backward mask
/// whenever the activation is not the identity.
#[derive(Clone, Debug)]
pub struct FcOutput {
    pub output: BlockedTensor4,
    pub pre_activation: Option<BlockedTensor4>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcGrad {
    pub dw: BlockedTensor4,
    pub db: DenseTensor,
}

impl FcGrad {
    pub fn len(&self) -> usize {
        self.dw.data().len() + self.db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight gradient followed by bias gradient, the order parameters are
    /// flattened in for communication.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.dw.data());
        v.extend_from_slice(self.db.data());
        v
    }

    pub fn copy_from_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!(
                "flat gradient of {} for layer of {}",
                flat.len(),
                self.len()
            )));
        }
        let split = self.dw.data().len();
        self.dw.data_mut().copy_from_slice(&flat[..split]);
        self.db.data_mut().copy_from_slice(&flat[split..]);
        Ok(())
    }
}

impl FcLayer {
    /// Builds a layer from a dense `W[K][C]` and `bias[K]`.
    pub fn from_dense(
        weight: &DenseTensor,
        bias: DenseTensor,
        activation: Activation,
        b_c: usize,
        b_k: usize,
    ) -> Result<Self> {
        let (k_out, c_in) = weight.dims2()?;
        if bias.shape() != [k_out] {
            return Err(Error::shape(format!(
                "bias shape {:?} for {k_out} outputs",
                bias.shape()
            )));
        }
        let weight = to_blocked(weight, BlockRole::Weight, b_k, b_c)?;
        Ok(Self {
            c_in,
            k_out,
            b_c,
            b_k,
            weight,
            bias,
            activation,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        k_out: usize,
        activation: Activation,
        b_c: usize,
        b_k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_dist =
            Normal::new(0.0f32, (2.0 / (c_in + k_out) as f32).sqrt()).map_err(|e| Error::config(e.to_string()))?;
        let b_dist = Normal::new(0.0f32, (1.0 / k_out as f32).sqrt()).map_err(|e| Error::config(e.to_string()))?;
        let w = DenseTensor::from_fn(k_out, c_in, |_, _| w_dist.sample(rng));
        let b = DenseTensor::from_vec(&[k_out], (0..k_out).map(|_| b_dist.sample(rng)).collect())?;
        Self::from_dense(&w, b, activation, b_c, b_k)
    }

    pub fn in_features(&self) -> usize {
        self.c_in
    }

    pub fn out_features(&self) -> usize {
        self.k_out
    }

    pub fn factors(&self) -> (usize, usize) {
        (self.b_c, self.b_k)
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &BlockedTensor4 {
        &self.weight
    }

    pub fn bias(&self) -> &DenseTensor {
        &self.bias
    }

    pub fn weight_dense(&self) -> DenseTensor {
        from_blocked(&self.weight)
    }

    pub fn num_params(&self) -> usize {
        self.c_in * self.k_out + self.k_out
    }

    /// Mutable weight and bias buffers, in storage order.
    pub fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.weight.data_mut(), self.bias.data_mut())
    }

    pub fn params(&self) -> (&[f32], &[f32]) {
        (self.weight.data(), self.bias.data())
    }

    fn check_input(&self, x: &BlockedTensor4) -> Result<()> {
        let (_, c) = x.dense_dims();
        let (_, b_c) = x.factors();
        if x.role() != BlockRole::Activation || c != self.c_in || b_c != self.b_c {
            return Err(Error::shape(format!(
                "layer expects activations with C={} b_c={}, got {:?} C={c} b_c={b_c}",
                self.c_in,
                self.b_c,
                x.role()
            )));
        }
        Ok(())
    }

    fn check_output_grad(&self, dy: &BlockedTensor4, n: usize, b_n: usize) -> Result<()> {
        let (rows, k) = dy.dense_dims();
        let (bn, bk) = dy.factors();
        if dy.role() != BlockRole::Activation || rows != n || k != self.k_out || bn != b_n || bk != self.b_k {
            return Err(Error::shape(format!(
                "gradient must be {n}x{} blocked ({b_n},{}), got {rows}x{k} ({bn},{bk})",
                self.k_out, self.b_k
            )));
        }
        Ok(())
    }

    /// `Wᵀ` in weight layout for a K -> C map: blocks `[C_b][K_b][b_k][b_c]`.
    fn transposed_weight(&self) -> BlockedTensor4 {
        let (kb, cb) = (self.k_out / self.b_k, self.c_in / self.b_c);
        let (bk, bc) = (self.b_k, self.b_c);
        let mut data = vec![0.0; self.c_in * self.k_out];
        for ic in 0..cb {
            for ik in 0..kb {
                let src = self.weight.block(ik, ic); // [b_c][b_k]
                let dst = &mut data[(ic * kb + ik) * bk * bc..][..bk * bc]; // [b_k][b_c]
                for c in 0..bc {
                    for k in 0..bk {
                        dst[k * bc + c] = src[c * bk + k];
                    }
                }
            }
        }
        BlockedTensor4::from_raw(BlockRole::Weight, self.c_in, self.k_out, bc, bk, data)
            .expect("transposed weight keeps valid factors")
    }
}

/// Calls `f(o1, o2, block)` for each output block, statically partitioned
/// across the current pool. With a tile, blocks are grouped into
/// `tile.0 x tile.1` groups that are computed back to back by one worker.
fn for_each_block<F>(data: &mut [f32], outer: (usize, usize), block_len: usize, tile: Option<(usize, usize)>, f: F)
where
    F: Fn(usize, usize, &mut [f32]) + Sync,
{
    let (_, o2) = outer;
    let nblocks = data.len() / block_len.max(1);
    if nblocks == 0 {
        return;
    }
    match tile {
        None | Some((1, 1)) => {
            let per_thread = nblocks.div_ceil(rayon::current_num_threads());
            data.par_chunks_mut(block_len)
                .enumerate()
                .with_min_len(per_thread)
                .for_each(|(i, blk)| f(i / o2, i % o2, blk));
        }
        Some((t1, t2)) => {
            let (t1, t2) = (t1.max(1), t2.max(1));
            let tiles_2 = o2.div_ceil(t2);
            let tiles_1 = outer.0.div_ceil(t1);
            let mut tiles: Vec<Vec<(usize, usize, &mut [f32])>> = (0..tiles_1 * tiles_2).map(|_| Vec::new()).collect();
            for (i, blk) in data.chunks_mut(block_len).enumerate() {
                let (a, b) = (i / o2, i % o2);
                tiles[(a / t1) * tiles_2 + b / t2].push((a, b, blk));
            }
            tiles.into_par_iter().for_each(|tile| {
                for (a, b, blk) in tile {
                    f(a, b, blk);
                }
            });
        }
    }
}

pub fn fc_forward(layer: &FcLayer, x: &BlockedTensor4) -> Result<FcOutput> {
    fc_forward_tiled(layer, x, None)
}

pub fn fc_forward_tiled(layer: &FcLayer, x: &BlockedTensor4, tile: Option<(usize, usize)>) -> Result<FcOutput> {
    layer.check_input(x)?;
    let (n, _) = x.dense_dims();
    let (b_n, _) = x.factors();
    let (nb, kb, cb) = (n / b_n, layer.k_out / layer.b_k, layer.c_in / layer.b_c);
    let shape = MicroShape {
        bn: b_n,
        bc: layer.b_c,
        bk: layer.b_k,
    };
    let keep_pre = layer.activation != Activation::None;
    let mut out = BlockedTensor4::zeros(BlockRole::Activation, n, layer.k_out, b_n, layer.b_k)?;
    let mut pre = if keep_pre { Some(out.clone()) } else { None };
    let block_len = b_n * layer.b_k;

    // Pre-activations are written first; the activation is then applied into
    // the output buffer block by block.
    let pre_buf = match pre.as_mut() {
        Some(p) => p.data_mut(),
        None => out.data_mut(),
    };
    for_each_block(pre_buf, (kb, nb), block_len, tile, |ik, inb, blk| {
        let a: Vec<&[f32]> = (0..cb).map(|ic| layer.weight.block(ik, ic)).collect();
        let b: Vec<&[f32]> = (0..cb).map(|ic| x.block(ic, inb)).collect();
        batch_reduce_gemm(&a, &b, blk, shape);
        let bias = &layer.bias.data()[ik * layer.b_k..(ik + 1) * layer.b_k];
        for row in blk.chunks_exact_mut(layer.b_k) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += *bv;
                if !keep_pre {
                    *v = layer.activation.apply(*v);
                }
            }
        }
    });
    if let Some(p) = pre.as_ref() {
        let act = layer.activation;
        out.data_mut()
            .par_chunks_mut(block_len)
            .zip(p.data().par_chunks(block_len))
            .for_each(|(o, z)| {
                for (ov, zv) in o.iter_mut().zip(z) {
                    *ov = act.apply(*zv);
                }
            });
    }
    Ok(FcOutput {
        output: out,
        pre_activation: pre,
    })
}

fn masked_grad(layer: &FcLayer, dy: &BlockedTensor4, pre: Option<&BlockedTensor4>) -> Result<BlockedTensor4> {
    match (layer.activation, pre) {
        (Activation::None, _) => Ok(dy.clone()),
        (_, None) => Err(Error::shape("activation gradient needs cached pre-activations")),
        (act, Some(z)) => {
            if z.dense_dims() != dy.dense_dims() || z.factors() != dy.factors() {
                return Err(Error::shape("pre-activation cache does not match gradient layout"));
            }
            let mut g = dy.clone();
            g.data_mut()
                .par_chunks_mut(4096)
                .zip(z.data().par_chunks(4096))
                .for_each(|(gc, zc)| {
                    for (gv, zv) in gc.iter_mut().zip(zc) {
                        *gv = act.grad(*zv, *gv);
                    }
                });
            Ok(g)
        }
    }
}

fn backward_data_masked(layer: &FcLayer, g: &BlockedTensor4, tile: Option<(usize, usize)>) -> Result<BlockedTensor4> {
    let (n, _) = g.dense_dims();
    let (b_n, _) = g.factors();
    let (nb, kb, cb) = (n / b_n, layer.k_out / layer.b_k, layer.c_in / layer.b_c);
    let wt = layer.transposed_weight();
    let shape = MicroShape {
        bn: b_n,
        bc: layer.b_k,
        bk: layer.b_c,
    };
    let mut dx = BlockedTensor4::zeros(BlockRole::Activation, n, layer.c_in, b_n, layer.b_c)?;
    for_each_block(dx.data_mut(), (cb, nb), b_n * layer.b_c, tile, |ic, inb, blk| {
        let a: Vec<&[f32]> = (0..kb).map(|ik| wt.block(ic, ik)).collect();
        let b: Vec<&[f32]> = (0..kb).map(|ik| g.block(ik, inb)).collect();
        batch_reduce_gemm(&a, &b, blk, shape);
    });
    Ok(dx)
}

fn backward_weights_masked(
    layer: &FcLayer,
    x: &BlockedTensor4,
    g: &BlockedTensor4,
    tile: Option<(usize, usize)>,
) -> Result<FcGrad> {
    let (n, _) = x.dense_dims();
    let (b_n, b_c) = x.factors();
    let (b_k, c_in, k_out) = (layer.b_k, layer.c_in, layer.k_out);
    let (nb, kb, cb) = (n / b_n, k_out / b_k, c_in / b_c);

    // Activation blocks transposed to [b_c][b_n]; they play the role the
    // weights play in the forward pass.
    let mut xt = vec![0.0f32; n * c_in];
    xt.par_chunks_mut(b_c * b_n).enumerate().for_each(|(i, dst)| {
        let src = x.block(i / nb, i % nb); // [b_n][b_c]
        for r in 0..b_n {
            for c in 0..b_c {
                dst[c * b_n + r] = src[r * b_c + c];
            }
        }
    });
    let xt_block = |ic: usize, inb: usize| &xt[(ic * nb + inb) * b_c * b_n..][..b_c * b_n];

    let shape = MicroShape {
        bn: b_c,
        bc: b_n,
        bk: b_k,
    };
    let mut dw = BlockedTensor4::zeros(BlockRole::Weight, k_out, c_in, b_k, b_c)?;
    for_each_block(dw.data_mut(), (kb, cb), b_c * b_k, tile, |ik, ic, blk| {
        let a: Vec<&[f32]> = (0..nb).map(|inb| g.block(ik, inb)).collect();
        let b: Vec<&[f32]> = (0..nb).map(|inb| xt_block(ic, inb)).collect();
        batch_reduce_gemm(&a, &b, blk, shape);
    });

    let mut db = DenseTensor::zeros(&[k_out]);
    db.data_mut().par_chunks_mut(b_k).enumerate().for_each(|(ik, acc)| {
        for inb in 0..nb {
            for row in g.block(ik, inb).chunks_exact(b_k) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += *v;
                }
            }
        }
    });
    Ok(FcGrad { dw, db })
}

/// `dX = Wᵀ · (dY ⊙ act'(pre))` in activation layout.
pub fn fc_backward_data(layer: &FcLayer, dy: &BlockedTensor4, pre: Option<&BlockedTensor4>) -> Result<BlockedTensor4> {
    let (n, _) = dy.dense_dims();
    layer.check_output_grad(dy, n, dy.factors().0)?;
    let g = masked_grad(layer, dy, pre)?;
    backward_data_masked(layer, &g, None)
}

/// `dW = (dY ⊙ act'(pre)) · Xᵀ` and `db = row-sum` of the masked gradient.
pub fn fc_backward_weights(
    layer: &FcLayer,
    x: &BlockedTensor4,
    dy: &BlockedTensor4,
    pre: Option<&BlockedTensor4>,
) -> Result<FcGrad> {
    layer.check_input(x)?;
    let (n, _) = x.dense_dims();
    layer.check_output_grad(dy, n, x.factors().0)?;
    let g = masked_grad(layer, dy, pre)?;
    backward_weights_masked(layer, x, &g, None)
}

/// Both backward passes sharing one activation mask.
pub fn fc_backward(
    layer: &FcLayer,
    x: &BlockedTensor4,
    dy: &BlockedTensor4,
    pre: Option<&BlockedTensor4>,
    need_dx: bool,
    tile: Option<(usize, usize)>,
) -> Result<(Option<BlockedTensor4>, FcGrad)> {
    layer.check_input(x)?;
    let (n, _) = x.dense_dims();
    layer.check_output_grad(dy, n, x.factors().0)?;
    let g = masked_grad(layer, dy, pre)?;
    let grad = backward_weights_masked(layer, x, &g, tile)?;
    let dx = if need_dx {
        Some(backward_data_masked(layer, &g, tile)?)
    } else {
        None
    };
    Ok((dx, grad))
}

/// Ordered stack of FC layers with matching blocking factors at each boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<FcLayer>,
    block_target: usize,
    tile: Option<(usize, usize)>,
}

/// Per-layer state saved by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<BlockedTensor4>,
    pre: Vec<Option<BlockedTensor4>>,
    batch: usize,
    b_n: usize,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<FcGrad>,
    pub d_input: Option<DenseTensor>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; `activation(l)` picks layer `l`'s nonlinearity.
    pub fn random<R: Rng + ?Sized>(
        widths: &[usize],
        block_target: usize,
        activation: impl Fn(usize) -> Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        let factors: Vec<usize> = widths.iter().map(|&w| blocking_factor(w, block_target)).collect();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| FcLayer::random(w[0], w[1], activation(l), factors[l], factors[l + 1], rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, block_target)
    }

    pub fn from_layers(layers: Vec<FcLayer>, block_target: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].k_out != pair[1].c_in || pair[0].b_k != pair[1].b_c {
                return Err(Error::shape(format!(
                    "layer {l} ({}x{}, b_k={}) does not feed layer {} ({}x{}, b_c={})",
                    pair[0].c_in,
                    pair[0].k_out,
                    pair[0].b_k,
                    l + 1,
                    pair[1].c_in,
                    pair[1].k_out,
                    pair[1].b_c
                )));
            }
        }
        Ok(Self {
            layers,
            block_target,
            tile: None,
        })
    }

    /// Groups output blocks into `k_tile x n_tile` tiles per worker.
    pub fn with_tile(mut self, tile: Option<(usize, usize)>) -> Self {
        self.tile = tile;
        self
    }

    pub fn layers(&self) -> &[FcLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FcLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().k_out
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(FcLayer::num_params).sum()
    }

    /// `2·N·C·K` summed over layers, for one GEMM pass over a batch of `n`.
    pub fn pass_flops(&self, n: usize) -> f64 {
        self.layers.iter().map(|l| 2.0 * (n * l.c_in * l.k_out) as f64).sum()
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<(DenseTensor, MlpCache)> {
        let (n, c) = x.dims2()?;
        if c != self.input_width() {
            return Err(Error::shape(format!("MLP input width {} != {c}", self.input_width())));
        }
        let b_n = blocking_factor(n, self.block_target);
        let mut act = to_blocked(x, BlockRole::Activation, b_n, self.layers[0].b_c)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = fc_forward_tiled(layer, &act, self.tile)?;
            inputs.push(std::mem::replace(&mut act, out.output));
            pre.push(out.pre_activation);
        }
        Ok((
            from_blocked(&act),
            MlpCache {
                inputs,
                pre,
                batch: n,
                b_n,
            },
        ))
    }

    /// Walks the layers last to first, handing each layer's gradient to
    /// `on_layer` as soon as it is ready. Returns `dInput` when requested.
    pub fn backward_each<F>(
        &self,
        cache: &MlpCache,
        d_out: &DenseTensor,
        need_input_grad: bool,
        mut on_layer: F,
    ) -> Result<Option<DenseTensor>>
    where
        F: FnMut(usize, FcGrad) -> Result<()>,
    {
        let (n, k) = d_out.dims2()?;
        if n != cache.batch || k != self.output_width() {
            return Err(Error::shape(format!(
                "output gradient {n}x{k} for MLP {}x{}",
                cache.batch,
                self.output_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grad = to_blocked(d_out, BlockRole::Activation, cache.b_n, self.layers[last].b_k)?;
        for l in (0..self.layers.len()).rev() {
            let need_dx = l > 0 || need_input_grad;
            let (dx, g) = fc_backward(
                &self.layers[l],
                &cache.inputs[l],
                &grad,
                cache.pre[l].as_ref(),
                need_dx,
                self.tile,
            )?;
            on_layer(l, g)?;
            match dx {
                Some(dx) => grad = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(from_blocked(&grad)))
    }

    pub fn backward(&self, cache: &MlpCache, d_out: &DenseTensor, need_input_grad: bool) -> Result<MlpGrads> {
        let mut layers: Vec<Option<FcGrad>> = vec![None; self.layers.len()];
        let d_input = self.backward_each(cache, d_out, need_input_grad, |l, g| {
            layers[l] = Some(g);
            Ok(())
        })?;
        Ok(MlpGrads {
            layers: layers.into_iter().map(|g| g.expect("every layer visited")).collect(),
            d_input,
        })
    }
}
