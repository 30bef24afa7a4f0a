//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use dlrm_core::comms::{run_in_process, CommConfig, CommsTrace, RankContext};
use dlrm_core::embedding::{EmbeddingTable, LookupBatch, SparseGrad, UpdateStrategy};
use dlrm_core::harness::{generate_synthetic, IndexDistribution};
use dlrm_core::mlp::{fc_backward, fc_forward, Activation, FcLayer};
use dlrm_core::model::{CommVariant, Dlrm, DlrmConfig, InteractionKind, MiniBatch, TableShard, TrainOptions};
use dlrm_core::optim::{OptimizerState, ParamId, PrecisionMode, SparseTable};
use dlrm_core::tensor::{from_blocked, to_blocked, BlockRole, DenseTensor};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_table<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> EmbeddingTable {
    EmbeddingTable::new(DenseTensor::from_vec(&[rows, dim], uniform_vec(rng, rows * dim, -1.0, 1.0)).unwrap()).unwrap()
}

/// Bags of random sizes in `0..=max_bag`, so empty bags and repeats occur.
pub fn random_batch<R: Rng>(rng: &mut R, n: usize, rows: usize, max_bag: usize) -> LookupBatch {
    let mut offsets = vec![0];
    let mut indices = Vec::new();
    for _ in 0..n {
        let len = rng.random_range(0..=max_bag);
        indices.extend((0..len).map(|_| rng.random_range(0..rows)));
        offsets.push(indices.len());
    }
    LookupBatch::new(offsets, indices).unwrap()
}

/// Forward pass written as the textbook triple loop.
pub fn seq_forward(w: &DenseTensor, batch: &LookupBatch) -> Vec<f32> {
    let e = w.shape()[1];
    let n = batch.batch_size();
    let mut y = vec![0.0f32; n * e];
    for b in 0..n {
        for p in batch.offsets()[b]..batch.offsets()[b + 1] {
            let row = batch.indices()[p];
            for c in 0..e {
                y[b * e + c] += w.data()[row * e + c];
            }
        }
    }
    y
}

/// `dW[p] = dY[bag containing lookup p]`.
pub fn seq_backward(dy: &DenseTensor, batch: &LookupBatch) -> Vec<f32> {
    let e = dy.shape()[1];
    let mut dw = Vec::with_capacity(batch.num_lookups() * e);
    for b in 0..batch.batch_size() {
        for _ in batch.offsets()[b]..batch.offsets()[b + 1] {
            dw.extend_from_slice(&dy.data()[b * e..(b + 1) * e]);
        }
    }
    dw
}

/// Applies every lookup's gradient in lookup order.
pub fn seq_update(w: &mut DenseTensor, grad: &SparseGrad, alpha: f32) {
    let e = w.shape()[1];
    for (p, &row) in grad.indices().iter().enumerate() {
        for c in 0..e {
            let d = grad.dw().data()[p * e + c];
            w.data_mut()[row * e + c] += alpha * d;
        }
    }
}

/// Per element, `|w0| + sum |alpha * dw|` over the lookups that touch it:
/// the magnitude every partial sum of that element stays below.
pub fn update_magnitude(w0: &DenseTensor, grad: &SparseGrad, alpha: f32) -> Vec<f32> {
    let e = w0.shape()[1];
    let mut m: Vec<f32> = w0.data().iter().map(|v| v.abs()).collect();
    for (p, &row) in grad.indices().iter().enumerate() {
        for c in 0..e {
            m[row * e + c] += (alpha * grad.dw().data()[p * e + c]).abs();
        }
    }
    m
}

/// Spacing of f32 values at magnitude `x`.
pub fn ulp(x: f32) -> f32 {
    let x = x.abs();
    if x < f32::MIN_POSITIVE {
        return f32::from_bits(1);
    }
    f32::from_bits(x.to_bits() + 1) - x
}

/// Distance in representable steps between two finite floats.
pub fn ulps_apart(a: f32, b: f32) -> u64 {
    let key = |v: f32| {
        let bits = v.to_bits() as i64;
        if bits < 0x8000_0000 {
            bits
        } else {
            0x8000_0000 - bits
        }
    };
    (key(a) - key(b)).unsigned_abs()
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// `act(X W^T + b)` in f64; `x` is `[n][c]`, `w` is `[k][c]`.
pub fn naive_linear(x: &[f32], w: &[f32], b: &[f32], n: usize, c: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0f64; n * k];
    for i in 0..n {
        for o in 0..k {
            let mut acc = b[o] as f64;
            for j in 0..c {
                acc += x[i * c + j] as f64 * w[o * c + j] as f64;
            }
            y[i * k + o] = acc;
        }
    }
    y
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Two tables of eight four-wide rows on a four-sample batch.
pub fn tiny_config() -> DlrmConfig {
    DlrmConfig {
        n: 4,
        gn: 4,
        ln: 4,
        lookups: 2,
        tables: 2,
        dim: 4,
        rows: 8,
        bottom_mlp: vec![3, 8, 4],
        top_mlp: vec![8, 1],
        interaction: InteractionKind::Dot,
        block: 32,
    }
}

/// Small enough for many-rank runs in tests, large enough to block.
pub fn test_config(tables: usize, gn: usize) -> DlrmConfig {
    DlrmConfig {
        n: gn,
        gn,
        ln: gn,
        lookups: 3,
        tables,
        dim: 8,
        rows: 64,
        bottom_mlp: vec![16, 32, 8],
        top_mlp: vec![32, 16, 1],
        interaction: InteractionKind::Dot,
        block: 8,
    }
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

pub fn pick_divisor<R: Rng>(g: &mut R, n: usize) -> usize {
    let d = divisors(n);
    d[g.random_range(0..d.len())]
}

pub fn act_oracle(act: Activation, v: f64) -> f64 {
    match act {
        Activation::None => v,
        Activation::Relu => v.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
    }
}

/// Largest deviation of one blocked layer's forward, `dX`, `dW` and `db`
/// from f64 triple loops, with random block factors.
pub fn layer_vs_naive(seed: u64, n: usize, c: usize, k: usize, act: Activation) -> f64 {
    let mut g = rng(seed);
    let (bc, bk, bn) = (
        pick_divisor(&mut g, c),
        pick_divisor(&mut g, k),
        pick_divisor(&mut g, n),
    );
    let layer = FcLayer::random(c, k, act, bc, bk, &mut g).unwrap();
    let x = DenseTensor::from_vec(&[n, c], uniform_vec(&mut g, n * c, -1.0, 1.0)).unwrap();
    let xb = to_blocked(&x, BlockRole::Activation, bn, bc).unwrap();
    let w = layer.weight_dense();
    let out = fc_forward(&layer, &xb).unwrap();
    let pre = naive_linear(x.data(), w.data(), layer.bias().data(), n, c, k);
    let want: Vec<f64> = pre.iter().map(|&v| act_oracle(act, v)).collect();
    let got = from_blocked(&out.output);
    let mut worst = max_abs_diff(got.data(), &want);

    let dy = DenseTensor::from_vec(&[n, k], uniform_vec(&mut g, n * k, -1.0, 1.0)).unwrap();
    let dyb = to_blocked(&dy, BlockRole::Activation, bn, bk).unwrap();
    let (dx, grad) = fc_backward(&layer, &xb, &dyb, out.pre_activation.as_ref(), true, None).unwrap();
    let masked: Vec<f64> = (0..n * k)
        .map(|i| {
            let u = dy.data()[i] as f64;
            match act {
                Activation::None => u,
                Activation::Relu if got.data()[i] > 0.0 => u,
                Activation::Relu => 0.0,
                Activation::Sigmoid => {
                    let s = act_oracle(act, pre[i]);
                    u * s * (1.0 - s)
                }
            }
        })
        .collect();
    let mut dx_want = vec![0.0f64; n * c];
    let mut dw_want = vec![0.0f64; k * c];
    let mut db_want = vec![0.0f64; k];
    for i in 0..n {
        for o in 0..k {
            let m = masked[i * k + o];
            db_want[o] += m;
            for j in 0..c {
                dx_want[i * c + j] += m * w.data()[o * c + j] as f64;
                dw_want[o * c + j] += m * x.data()[i * c + j] as f64;
            }
        }
    }
    worst = worst.max(max_abs_diff(from_blocked(&dx.unwrap()).data(), &dx_want));
    worst = worst.max(max_abs_diff(from_blocked(&grad.dw).data(), &dw_want));
    worst.max(max_abs_diff(grad.db.data(), &db_want))
}

pub fn options(lr: f32) -> TrainOptions {
    TrainOptions {
        precision: PrecisionMode::Fp32,
        lr,
        strategy: UpdateStrategy::RaceFreePartitioned,
        update_threads: 2,
    }
}

/// Mean cross-entropy accumulated in f64 from the model's predictions.
pub fn loss64(model: &Dlrm, batch: &MiniBatch) -> f64 {
    let p = model.predict(batch).unwrap();
    let sum: f64 = p
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
            -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        })
        .sum();
    sum / p.len() as f64
}

/// Central differences on `checks` random parameters of the tiny model,
/// dense and embedding alike, against the analytic gradient at relative
/// tolerance `tol`. Returns the largest relative error seen.
pub fn full_model_fd(model_seed: u64, data_seed: u64, checks: usize, tol: f64) -> Result<f64, String> {
    let cfg = tiny_config();
    let batch = &generate_synthetic(&cfg, data_seed, IndexDistribution::Uniform, cfg.gn, 1).unwrap()[0];
    let mut model = Dlrm::new_local(cfg.clone(), model_seed, options(0.1)).unwrap();
    let (_, grads) = model.gradients(batch).unwrap();
    let mut g = rng(model_seed ^ data_seed);
    let mut candidates = Vec::new();
    for (l, lg) in grads.dense.iter().enumerate() {
        for (i, &v) in lg.to_flat().iter().enumerate() {
            candidates.push((Some(l), i, v));
        }
    }
    for (t, tg) in grads.tables.iter().enumerate() {
        let mut dense = vec![0.0f32; cfg.rows * cfg.dim];
        for (p, &row) in tg.indices().iter().enumerate() {
            for c in 0..cfg.dim {
                dense[row * cfg.dim + c] += tg.dw().data()[p * cfg.dim + c];
            }
        }
        for (i, &v) in dense.iter().enumerate() {
            candidates.push((None, t * cfg.rows * cfg.dim + i, v));
        }
    }
    // Smaller gradients drown in float32 rounding of the loss.
    let strong: Vec<_> = candidates.into_iter().filter(|c| c.2.abs() > 1e-2).collect();
    if strong.len() < checks {
        return Err(format!("only {} parameters with resolvable gradients", strong.len()));
    }
    let (mut checked, mut attempts, mut worst) = (0, 0, 0.0f64);
    let h = 4e-3f32;
    while checked < checks {
        attempts += 1;
        if attempts > 20 * checks {
            return Err(format!("only {checked} smooth points in {attempts} attempts"));
        }
        let (layer, i, want) = strong[g.random_range(0..strong.len())];
        let bump = |model: &mut Dlrm, d: f32| match layer {
            Some(l) => {
                let (w, b) = model.layer_mut(l).params_mut();
                if i < w.len() {
                    w[i] += d
                } else {
                    b[i - w.len()] += d
                }
            }
            None => {
                let per = cfg.rows * cfg.dim;
                if let SparseTable::Fp32(t) = &mut model.tables_mut()[i / per] {
                    t.weight_mut().data_mut()[i % per] += d;
                }
            }
        };
        let mut at = |d: f32| {
            bump(&mut model, d);
            let l = loss64(&model, batch);
            bump(&mut model, -d);
            l
        };
        let stencil: Vec<f64> = [2.0 * h, h, -h, -2.0 * h].iter().map(|&d| at(d)).collect();
        let wide = (stencil[0] - stencil[3]) / (4.0 * h as f64);
        let fd = (stencil[1] - stencil[2]) / (2.0 * h as f64);
        // A ReLU switching inside the stencil makes the two widths disagree.
        if (wide - fd).abs() > 2e-3 * fd.abs() {
            continue;
        }
        let rel = (fd - want as f64).abs() / fd.abs().max(want.abs() as f64);
        if rel > tol {
            return Err(format!("param {layer:?}/{i}: fd {fd} vs analytic {want}"));
        }
        worst = worst.max(rel);
        checked += 1;
    }
    Ok(worst)
}

pub struct RankRun {
    pub losses: Vec<f32>,
    pub checksums: Vec<u64>,
    pub master: Vec<f32>,
    pub tables: Vec<Vec<f32>>,
    pub trace: CommsTrace,
}

pub fn train_distributed(
    cfg: &DlrmConfig,
    world: usize,
    batches: &[MiniBatch],
    variant: CommVariant,
    blocking: bool,
    lr: f32,
) -> Vec<RankRun> {
    let comm = CommConfig {
        comm_workers: 1,
        ..CommConfig::default()
    };
    run_in_process(world, &comm, |ctx: RankContext| {
        let shard = TableShard::new(cfg.tables, world)?;
        let mut model = Dlrm::new(cfg.clone(), 7, options(lr), shard, ctx.rank())?;
        let mut losses = Vec::new();
        let mut checksums = Vec::new();
        for b in batches {
            losses.push(model.train_step_distributed(&ctx, b, variant, blocking)?.loss);
            checksums.push(model.dense_checksum());
        }
        Ok(RankRun {
            losses,
            checksums,
            master: model.dense_master(),
            tables: model.tables().iter().map(|t| t.master().into_vec()).collect(),
            trace: ctx.trace(),
        })
    })
    .unwrap()
}

pub fn batches_for(cfg: &DlrmConfig, count: usize) -> Vec<MiniBatch> {
    generate_synthetic(cfg, 99, IndexDistribution::Uniform, cfg.gn, count).unwrap()
}

/// A dense parameter driven through the optimizer alongside a plain float32
/// SGD reference, both fed the same gradient stream.
pub fn dense_trajectory(mode: PrecisionMode, steps: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut g = rng(seed);
    let len = 257;
    let init = uniform_vec(&mut g, len, -1.0, 1.0);
    let lr = 0.01;
    let mut reference = init.clone();
    let mut values = init;
    let mut opt = OptimizerState::new(mode, lr);
    opt.register_dense(ParamId(0), &mut values).unwrap();
    for _ in 0..steps {
        let grad = uniform_vec(&mut g, len, -1.0, 1.0);
        for (p, d) in reference.iter_mut().zip(&grad) {
            *p -= lr * *d;
        }
        opt.step_dense(ParamId(0), &mut values, &grad).unwrap();
        if mode != PrecisionMode::Fp32 {
            assert!(
                values.iter().all(|v| v.to_bits() & 0xFFFF == 0),
                "hi plane holds only bf16 values"
            );
        }
    }
    (reference, opt.master_dense(ParamId(0), &values).unwrap())
}
