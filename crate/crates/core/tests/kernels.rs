mod common;

use common::*;
use dlrm_core::embedding::*;
use dlrm_core::mlp::{fc_forward, Activation, FcLayer, Mlp};
use dlrm_core::tensor::{blocking_factor, from_blocked, to_blocked, BlockRole, BlockedTensor4, DenseTensor};
use proptest::prelude::*;
use rand::RngExt;

fn dims_and_factors() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..40, 1usize..40).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            proptest::sample::select(divisors(r)),
            proptest::sample::select(divisors(c)),
        )
    })
}

proptest! {
    #[test]
    fn blocked_round_trip((rows, cols, br, bc) in dims_and_factors(), weight in any::<bool>(), seed in any::<u64>()) {
        let mut g = rng(seed);
        let t = DenseTensor::from_vec(&[rows, cols], uniform_vec(&mut g, rows * cols, -1.0, 1.0)).unwrap();
        let role = if weight { BlockRole::Weight } else { BlockRole::Activation };
        let b = to_blocked(&t, role, br, bc).unwrap();
        prop_assert_eq!(b.dense_dims(), (rows, cols));
        prop_assert_eq!(b.data().len(), rows * cols);
        let back = from_blocked(&b);
        prop_assert_eq!(bits(back.data()), bits(t.data()));
        let mut seen = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let off = b.offset_of(r, c);
                prop_assert!(!seen[off]);
                seen[off] = true;
                prop_assert_eq!(b.get(r, c), t.get(&[r, c]));
            }
        }
    }

    #[test]
    fn non_dividing_factor_is_rejected(rows in 2usize..40, cols in 1usize..40) {
        let t = DenseTensor::zeros(&[rows, cols]);
        let bad = (2..=rows).find(|d| rows % d != 0);
        if let Some(f) = bad {
            prop_assert!(to_blocked(&t, BlockRole::Activation, f, 1).is_err());
        }
    }

    #[test]
    fn blocking_factor_divides_and_is_nearest(extent in 1usize..2000, target in 1usize..128) {
        let f = blocking_factor(extent, target);
        prop_assert_eq!(extent % f, 0);
        let dist = |d: usize| ((d as f64) / target as f64).ln().abs();
        for d in divisors(extent) {
            prop_assert!(dist(f) <= dist(d) + 1e-9);
        }
    }
}

#[test]
fn blocking_factor_examples() {
    assert_eq!(blocking_factor(512, 32), 32);
    assert_eq!(blocking_factor(13, 32), 13);
    assert_eq!(blocking_factor(1, 32), 1);
}

#[test]
fn partition_rows_examples() {
    let r: Vec<_> = (0..3).map(|t| partition_rows(10, 3, t)).collect();
    assert_eq!(r, [(0, 3), (3, 6), (6, 10)]);
    assert_eq!(partition_rows(7, 1, 0), (0, 7));
    let ranges: Vec<_> = (0..8).map(|t| partition_rows(4, 8, t)).collect();
    assert!(ranges.iter().any(|(s, e)| s == e));
    assert_eq!(ranges[0].0, 0);
    assert_eq!(ranges[7].1, 4);
    assert!(ranges.windows(2).all(|w| w[0].1 == w[1].0));
}

fn update_with(table: &EmbeddingTable, grad: &SparseGrad, alpha: f32, s: UpdateStrategy, threads: usize) -> Vec<f32> {
    let mut t = table.clone();
    embedding_update(&mut t, grad, alpha, s, threads).unwrap();
    t.weight().data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_backward_match_loops(seed in any::<u64>(), rows in 1usize..=64, dim in 1usize..=16, n in 1usize..=32) {
        let mut g = rng(seed);
        let table = random_table(&mut g, rows, dim);
        let batch = random_batch(&mut g, n, rows, 6);
        let y = embedding_forward(&table, &batch).unwrap();
        prop_assert_eq!(y.shape(), &[n, dim]);
        prop_assert_eq!(bits(y.data()), bits(&seq_forward(table.weight(), &batch)));
        let dy = DenseTensor::from_vec(&[n, dim], uniform_vec(&mut g, n * dim, -1.0, 1.0)).unwrap();
        let grad = embedding_backward(&dy, &batch).unwrap();
        prop_assert_eq!(grad.indices(), batch.indices());
        prop_assert_eq!(bits(grad.dw().data()), bits(&seq_backward(&dy, &batch)));
    }

    #[test]
    fn race_free_is_exact_for_any_thread_count(seed in any::<u64>(), rows in 1usize..=64, dim in 1usize..=16, n in 1usize..=32, threads in 1usize..=16) {
        let mut g = rng(seed);
        let table = random_table(&mut g, rows, dim);
        let batch = random_batch(&mut g, n, rows, 6);
        let dy = DenseTensor::from_vec(&[n, dim], uniform_vec(&mut g, n * dim, -1.0, 1.0)).unwrap();
        let grad = embedding_backward(&dy, &batch).unwrap();
        let mut want = table.weight().clone();
        seq_update(&mut want, &grad, -0.1);
        let got = update_with(&table, &grad, -0.1, UpdateStrategy::RaceFreePartitioned, threads);
        prop_assert_eq!(bits(&got), bits(want.data()));
    }

    #[test]
    fn contended_strategies_exact_without_repeats(seed in any::<u64>(), rows in 1usize..=64, dim in 1usize..=16, threads in 1usize..=8) {
        let mut g = rng(seed);
        let table = random_table(&mut g, rows, dim);
        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            perm.swap(i, g.random_range(0..=i));
        }
        let take = g.random_range(0..=rows);
        let batch = LookupBatch::uniform_bags(1, perm[..take].to_vec()).unwrap();
        let dy = DenseTensor::from_vec(&[take, dim], uniform_vec(&mut g, take * dim, -1.0, 1.0)).unwrap();
        let grad = embedding_backward(&dy, &batch).unwrap();
        let mut want = table.weight().clone();
        seq_update(&mut want, &grad, 0.5);
        for s in [UpdateStrategy::AtomicExchange, UpdateStrategy::LockedRowSimd] {
            prop_assert_eq!(bits(&update_with(&table, &grad, 0.5, s, threads)), bits(want.data()));
        }
    }

    #[test]
    fn contended_strategies_close_with_repeats(seed in any::<u64>(), rows in 1usize..=64, dim in 1usize..=16, n in 1usize..=32, threads in 1usize..=8) {
        let mut g = rng(seed);
        let table = random_table(&mut g, rows, dim);
        let batch = random_batch(&mut g, n, rows, 6);
        let dy = DenseTensor::from_vec(&[n, dim], uniform_vec(&mut g, n * dim, -1.0, 1.0)).unwrap();
        let grad = embedding_backward(&dy, &batch).unwrap();
        let mut want = table.weight().clone();
        seq_update(&mut want, &grad, -0.1);
        let scale = update_magnitude(table.weight(), &grad, -0.1);
        for s in [UpdateStrategy::AtomicExchange, UpdateStrategy::LockedRowSimd] {
            let got = update_with(&table, &grad, -0.1, s, threads);
            for ((a, b), m) in got.iter().zip(want.data()).zip(&scale) {
                prop_assert!((a - b).abs() <= 4.0 * ulp(*m), "{s:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_scales_with_table(seed in any::<u64>(), rows in 1usize..=16, dim in 1usize..=8, n in 1usize..=8) {
        let mut g = rng(seed);
        let table = random_table(&mut g, rows, dim);
        let batch = random_batch(&mut g, n, rows, 4);
        let y = embedding_forward(&table, &batch).unwrap();
        let doubled: Vec<f32> = table.weight().data().iter().map(|v| v * 2.0).collect();
        let t2 = EmbeddingTable::new(DenseTensor::from_vec(&[rows, dim], doubled).unwrap()).unwrap();
        let y2 = embedding_forward(&t2, &batch).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            prop_assert_eq!((a * 2.0).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), rows in 1usize..=8, dim in 1usize..=4, n in 1usize..=8) {
        let mut g = rng(seed);
        let table = random_table(&mut g, rows, dim);
        let batch = random_batch(&mut g, n, rows, 4);
        let r = uniform_vec(&mut g, n * dim, -1.0, 1.0);
        // loss = sum(Y * r), so dY = r.
        let loss = |t: &EmbeddingTable| -> f64 {
            let y = embedding_forward(t, &batch).unwrap();
            y.data().iter().zip(&r).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        let grad = embedding_backward(&DenseTensor::from_vec(&[n, dim], r.clone()).unwrap(), &batch).unwrap();
        let mut dense_grad = vec![0.0f64; rows * dim];
        for (p, &row) in grad.indices().iter().enumerate() {
            for c in 0..dim {
                dense_grad[row * dim + c] += grad.dw().data()[p * dim + c] as f64;
            }
        }
        let h = 0.5f32;
        for (i, &want) in dense_grad.iter().enumerate() {
            let mut plus = table.clone();
            plus.weight_mut().data_mut()[i] += h;
            let mut minus = table.clone();
            minus.weight_mut().data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
            prop_assert!((fd - want).abs() <= 1e-4 * want.abs().max(1.0), "element {i}: fd {fd} vs {want}");
        }
    }
}

#[test]
fn clustered_lookups_into_one_thread_range() {
    let mut g = rng(3);
    let table = random_table(&mut g, 64, 8);
    // Every index lands in the first thread's slice of the rows.
    let indices: Vec<usize> = (0..400).map(|_| g.random_range(0..4)).collect();
    let batch = LookupBatch::uniform_bags(4, indices).unwrap();
    let dy = DenseTensor::from_vec(&[100, 8], uniform_vec(&mut g, 800, -1.0, 1.0)).unwrap();
    let grad = embedding_backward(&dy, &batch).unwrap();
    let mut want = table.weight().clone();
    seq_update(&mut want, &grad, -0.05);
    let got = update_with(&table, &grad, -0.05, UpdateStrategy::RaceFreePartitioned, 16);
    assert_eq!(bits(&got), bits(want.data()));
}

#[test]
fn empty_bags_give_zero_rows() {
    let table = random_table(&mut rng(1), 4, 3);
    let batch = LookupBatch::new(vec![0, 0, 2, 2], vec![1, 1]).unwrap();
    let y = embedding_forward(&table, &batch).unwrap();
    assert_eq!(y.row(0), [0.0; 3]);
    assert_eq!(y.row(2), [0.0; 3]);
    let w = table.weight().row(1);
    let want: Vec<f32> = w.iter().map(|v| 0.0 + v + v).collect();
    assert_eq!(y.row(1), want.as_slice());
}

#[test]
fn bad_indices_are_rejected() {
    let table = random_table(&mut rng(1), 4, 3);
    let batch = LookupBatch::uniform_bags(1, vec![4]).unwrap();
    assert!(embedding_forward(&table, &batch).is_err());
    assert!(LookupBatch::new(vec![0, 2, 1], vec![0, 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blocked_layer_matches_naive_gemm(seed in any::<u64>(), n in 8usize..=128, c in 8usize..=128, k in 8usize..=128, act_id in 0usize..3) {
        let act = [Activation::None, Activation::Relu, Activation::Sigmoid][act_id];
        let worst = layer_vs_naive(seed, n, c, k, act);
        prop_assert!(worst <= 1e-5, "max deviation {worst}");
    }
}

#[test]
fn mismatched_input_is_rejected() {
    let mut g = rng(5);
    let layer = FcLayer::random(16, 8, Activation::Relu, 8, 8, &mut g).unwrap();
    let x = BlockedTensor4::zeros(BlockRole::Activation, 4, 12, 4, 4).unwrap();
    assert!(fc_forward(&layer, &x).is_err());
}

#[test]
fn mlp_is_independent_of_thread_count() {
    let mut g = rng(9);
    let mlp = Mlp::random(
        &[48, 64, 32, 1],
        16,
        |l| if l == 2 { Activation::Sigmoid } else { Activation::Relu },
        &mut g,
    )
    .unwrap();
    let x = DenseTensor::from_vec(&[64, 48], uniform_vec(&mut g, 64 * 48, 0.0, 1.0)).unwrap();
    let d_out = DenseTensor::from_vec(&[64, 1], uniform_vec(&mut g, 64, -1.0, 1.0)).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (y, cache) = mlp.forward(&x).unwrap();
            let grads = mlp.backward(&cache, &d_out, true).unwrap();
            let mut flat = y.into_vec();
            for l in &grads.layers {
                flat.extend(l.to_flat());
            }
            flat.extend(grads.d_input.unwrap().into_vec());
            bits(&flat)
        })
    };
    let one = run(1);
    for t in [2, 3, 4] {
        assert_eq!(run(t), one);
    }
}

#[test]
fn mlp_layer_widths_and_params() {
    let mut g = rng(2);
    let mlp = Mlp::random(&[13, 512, 256, 128], 32, |_| Activation::Relu, &mut g).unwrap();
    assert_eq!(mlp.input_width(), 13);
    assert_eq!(mlp.output_width(), 128);
    assert_eq!(mlp.num_params(), 13 * 512 + 512 + 512 * 256 + 256 + 256 * 128 + 128);
}
