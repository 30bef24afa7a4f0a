/// Extents of one batch-reduce GEMM call: `out[bn][bk] += sum_i B_i[bn][bc] * A_i[bc][bk]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MicroShape {
    pub bn: usize,
    pub bc: usize,
    pub bk: usize,
}

/// Accumulates `count = a_blocks.len()` small products into `out`.
///
/// Each output element is reduced over the blocks in order and, within a
/// block, over `c` in order, so a single block reproduces the naive
/// `for n, for k, for c` loop bit for bit. Register tiling only changes which
/// elements are in flight together, never the order of any one sum.
pub fn batch_reduce_gemm(a_blocks: &[&[f32]], b_blocks: &[&[f32]], out: &mut [f32], shape: MicroShape) {
    let MicroShape { bn, bc, bk } = shape;
    assert_eq!(a_blocks.len(), b_blocks.len(), "batch-reduce arity mismatch");
    debug_assert_eq!(out.len(), bn * bk);
    for (a, b) in a_blocks.iter().zip(b_blocks) {
        debug_assert_eq!(a.len(), bc * bk);
        debug_assert_eq!(b.len(), bn * bc);
    }
    let k_main = bk - bk % LANES;
    let n_main = bn - bn % ROWS;
    for n0 in (0..n_main).step_by(ROWS) {
        for k0 in (0..k_main).step_by(LANES) {
            tile::<ROWS>(a_blocks, b_blocks, out, shape, n0, k0);
        }
    }
    for n0 in n_main..bn {
        for k0 in (0..k_main).step_by(LANES) {
            tile::<1>(a_blocks, b_blocks, out, shape, n0, k0);
        }
    }
    if k_main < bk {
        for (a, b) in a_blocks.iter().zip(b_blocks) {
            for (out_row, b_row) in out.chunks_exact_mut(bk).zip(b.chunks_exact(bc)) {
                for (&bv, a_row) in b_row.iter().zip(a.chunks_exact(bk)) {
                    for (o, &av) in out_row[k_main..].iter_mut().zip(&a_row[k_main..]) {
                        *o += bv * av;
                    }
                }
            }
        }
    }
}

const LANES: usize = 8;
const ROWS: usize = 4;

/// `R x LANES` output tile at `(n0, k0)` held in registers across all blocks.
#[inline(always)]
fn tile<const R: usize>(
    a_blocks: &[&[f32]],
    b_blocks: &[&[f32]],
    out: &mut [f32],
    shape: MicroShape,
    n0: usize,
    k0: usize,
) {
    let MicroShape { bc, bk, .. } = shape;
    let mut acc = [[0.0f32; LANES]; R];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(n0 + r) * bk + k0..][..LANES]);
    }
    for (a, b) in a_blocks.iter().zip(b_blocks) {
        let b_rows: [&[f32]; R] = std::array::from_fn(|r| &b[(n0 + r) * bc..][..bc]);
        for c in 0..bc {
            let av: &[f32; LANES] = a[c * bk + k0..][..LANES].try_into().unwrap();
            for r in 0..R {
                let bv = b_rows[r][c];
                for j in 0..LANES {
                    acc[r][j] += bv * av[j];
                }
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(n0 + r) * bk + k0..][..LANES].copy_from_slice(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], out: &mut [f32], s: MicroShape) {
        for n in 0..s.bn {
            for k in 0..s.bk {
                let mut acc = out[n * s.bk + k];
                for c in 0..s.bc {
                    acc += b[n * s.bc + c] * a[c * s.bk + k];
                }
                out[n * s.bk + k] = acc;
            }
        }
    }

    #[test]
    fn scalar_blocks() {
        let (a0, a1, b0, b1) = ([2.0f32], [3.0f32], [5.0f32], [7.0f32]);
        let mut out = [0.0f32];
        batch_reduce_gemm(&[&a0, &a1], &[&b0, &b1], &mut out, MicroShape { bn: 1, bc: 1, bk: 1 });
        assert_eq!(out, [31.0]);
    }

    #[test]
    fn single_block_matches_naive_bitwise() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for s in [
            MicroShape { bn: 5, bc: 7, bk: 3 },
            MicroShape { bn: 9, bc: 5, bk: 19 },
            MicroShape { bn: 8, bc: 32, bk: 32 },
        ] {
            let a: Vec<f32> = (0..s.bc * s.bk).map(|_| rng.random::<f32>() - 0.5).collect();
            let b: Vec<f32> = (0..s.bn * s.bc).map(|_| rng.random::<f32>() - 0.5).collect();
            let init: Vec<f32> = (0..s.bn * s.bk).map(|_| rng.random::<f32>()).collect();
            let mut got = init.clone();
            let mut want = init;
            batch_reduce_gemm(&[&a], &[&b], &mut got, s);
            naive(&a, &b, &mut want, s);
            assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn zero_count_is_noop() {
        let mut out = [1.5f32, -2.0];
        batch_reduce_gemm(&[], &[], &mut out, MicroShape { bn: 1, bc: 4, bk: 2 });
        assert_eq!(out, [1.5, -2.0]);
    }
}
