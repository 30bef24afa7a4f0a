//! Feature interaction between the bottom MLP output and the embeddings.

use rayon::prelude::*;

use super::config::InteractionKind;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

fn check_inputs(bottom: &DenseTensor, emb: &[DenseTensor]) -> Result<(usize, usize)> {
    let (n, e) = bottom.dims2()?;
    for (t, x) in emb.iter().enumerate() {
        if x.shape() != [n, e] {
            return Err(Error::shape(format!(
                "embedding output {t} is {:?}, expected [{n}, {e}]",
                x.shape()
            )));
        }
    }
    Ok((n, e))
}

const LANES: usize = 8;

/// Dot product with `LANES` independent partial sums.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f32 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for j in 0..LANES {
            acc[j] += x[j] * y[j];
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Per sample: the bottom output followed by either every pairwise dot
/// product `z_i . z_j` for `i > j` over `z = [bottom, emb_0, ..]`, or the
/// embeddings concatenated.
pub fn interaction(kind: InteractionKind, bottom: &DenseTensor, emb: &[DenseTensor]) -> Result<DenseTensor> {
    let (n, e) = check_inputs(bottom, emb)?;
    let s = emb.len();
    let width = super::config::interaction_width(kind, s, e);
    let mut out = DenseTensor::zeros(&[n, width]);
    out.data_mut().par_chunks_mut(width).enumerate().for_each(|(i, row)| {
        let z = |f: usize| {
            if f == 0 {
                bottom.row(i)
            } else {
                emb[f - 1].row(i)
            }
        };
        row[..e].copy_from_slice(bottom.row(i));
        match kind {
            InteractionKind::Dot => {
                let mut k = e;
                for a in 1..=s {
                    for b in 0..a {
                        row[k] = dot(z(a), z(b));
                        k += 1;
                    }
                }
            }
            InteractionKind::Concat => {
                for t in 0..s {
                    row[e * (t + 1)..e * (t + 2)].copy_from_slice(emb[t].row(i));
                }
            }
        }
    });
    Ok(out)
}

/// Gradients with respect to the bottom output and each embedding output.
pub fn interaction_backward(
    kind: InteractionKind,
    bottom: &DenseTensor,
    emb: &[DenseTensor],
    d_out: &DenseTensor,
) -> Result<(DenseTensor, Vec<DenseTensor>)> {
    let (n, e) = check_inputs(bottom, emb)?;
    let s = emb.len();
    let width = super::config::interaction_width(kind, s, e);
    if d_out.shape() != [n, width] {
        return Err(Error::shape(format!(
            "interaction gradient {:?}, expected [{n}, {width}]",
            d_out.shape()
        )));
    }
    // One row of [bottom, emb_0, ..] gradients per sample, split afterwards.
    let feats = s + 1;
    let mut dz = vec![0.0f32; n * feats * e];
    dz.par_chunks_mut(feats * e).enumerate().for_each(|(i, dzi)| {
        let g = d_out.row(i);
        let z = |f: usize| {
            if f == 0 {
                bottom.row(i)
            } else {
                emb[f - 1].row(i)
            }
        };
        dzi[..e].copy_from_slice(&g[..e]);
        match kind {
            InteractionKind::Dot => {
                // dz_a += sum_b G[a][b] z_b with G the symmetric pair-gradient matrix.
                let mut gsym = vec![0.0f32; feats * feats];
                let mut k = e;
                for a in 1..feats {
                    for b in 0..a {
                        gsym[a * feats + b] = g[k];
                        gsym[b * feats + a] = g[k];
                        k += 1;
                    }
                }
                for (a, dza) in dzi.chunks_exact_mut(e).enumerate() {
                    for (b, &gab) in gsym[a * feats..][..feats].iter().enumerate() {
                        axpy(gab, z(b), dza);
                    }
                }
            }
            InteractionKind::Concat => {
                dzi[e..].copy_from_slice(&g[e..]);
            }
        }
    });
    let d_bottom = DenseTensor::from_fn(n, e, |i, c| dz[i * feats * e + c]);
    let d_emb = (1..feats)
        .map(|f| DenseTensor::from_fn(n, e, |i, c| dz[(i * feats + f) * e + c]))
        .collect();
    Ok((d_bottom, d_emb))
}
