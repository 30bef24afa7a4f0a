mod common;

use common::*;
use dlrm_core::embedding::{embedding_backward, EmbeddingTable, UpdateStrategy};
use dlrm_core::optim::*;
use dlrm_core::tensor::DenseTensor;
use dlrm_core::Error;
use proptest::prelude::*;

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>()
        .prop_map(f32::from_bits)
        .prop_filter("finite", |v| v.is_finite())
}

/// `2^-7 |v|` for normal values; below that the bf16 spacing is absolute.
fn truncation_bound(v: f32) -> f64 {
    (v.abs() as f64 * 2f64.powi(-7)).max(2f64.powi(-133))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn split_round_trip_any_bits(raw in proptest::collection::vec(any::<u32>(), 1..64)) {
        let vals: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).collect();
        let t = DenseTensor::from_vec(&[vals.len()], vals.clone()).unwrap();
        let s = split(&t);
        prop_assert_eq!(s.storage_bytes(), 4 * vals.len());
        for (i, &b) in raw.iter().enumerate() {
            prop_assert_eq!(((s.hi()[i] as u32) << 16) | s.lo()[i] as u32, b);
        }
        prop_assert_eq!(bits(s.reconstruct().data()), raw);
    }

    #[test]
    fn truncation_error_bound(v in finite_f32()) {
        let hi = bf16_to_f32(bf16_hi(v));
        prop_assert!((hi - v).abs() as f64 <= truncation_bound(v));
        // Truncation never moves away from zero.
        prop_assert!(hi.abs() <= v.abs());
    }

    #[test]
    fn truncated_forward_uses_hi_plane(raw in proptest::collection::vec(finite_f32(), 1..64)) {
        let t = DenseTensor::from_vec(&[raw.len()], raw).unwrap();
        let fwd = bf16_truncate_forward(&t);
        prop_assert_eq!(bits(fwd.data()), bits(split(&t).hi_as_f32().data()));
        for (a, b) in fwd.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits() & 0xFFFF, 0);
            prop_assert!((a - b).abs() as f64 <= truncation_bound(*b));
        }
    }

    #[test]
    fn dense_split_step_equals_fp32(seed in any::<u64>(), len in 1usize..200, lr in 1e-4f32..1.0) {
        let mut g = rng(seed);
        let init = uniform_vec(&mut g, len, -2.0, 2.0);
        let grad = DenseTensor::from_vec(&[len], uniform_vec(&mut g, len, -1.0, 1.0)).unwrap();
        let mut f = DenseParam::new(DenseTensor::from_vec(&[len], init.clone()).unwrap(), PrecisionMode::Fp32);
        let mut s = DenseParam::new(DenseTensor::from_vec(&[len], init).unwrap(), PrecisionMode::SplitBf16);
        sgd_step_dense(&mut f, &grad, lr).unwrap();
        sgd_step_dense(&mut s, &grad, lr).unwrap();
        prop_assert_eq!(bits(f.master().data()), bits(s.master().data()));
    }
}

#[test]
fn split_round_trip_special_values() {
    let vals = [
        0.0f32,
        -0.0,
        f32::INFINITY,
        f32::NEG_INFINITY,
        f32::MIN_POSITIVE,
        f32::MAX,
        f32::from_bits(1),
        1.5e-41,
    ];
    let t = DenseTensor::from_vec(&[vals.len()], vals.to_vec()).unwrap();
    assert_eq!(bits(split(&t).reconstruct().data()), bits(&vals));
    let nan = DenseTensor::from_vec(&[1], vec![f32::from_bits(0x7FC0_1234)]).unwrap();
    assert_eq!(split(&nan).reconstruct().data()[0].to_bits(), 0x7FC0_1234);
}

#[test]
fn split_examples() {
    let t = DenseTensor::from_vec(&[2], vec![1.0, 1.0 + 2f32.powi(-10)]).unwrap();
    let s = split(&t);
    assert_eq!(s.hi(), [0x3F80, 0x3F80]);
    assert_eq!(s.lo(), [0x0000, 0x2000]);
    assert_eq!(s.hi_as_f32().data(), [1.0, 1.0]);
}

#[test]
fn split_trajectory_is_bit_identical_over_1000_steps() {
    let (want, got) = dense_trajectory(PrecisionMode::SplitBf16, 1000, 7);
    assert_eq!(bits(&got), bits(&want));
}

#[test]
fn eight_bit_low_plane_drifts() {
    let (want, got) = dense_trajectory(PrecisionMode::SplitBf16Lo8, 200, 7);
    let differing = got
        .iter()
        .zip(&want)
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    let max_err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(
        differing > want.len() / 2,
        "only {differing} of {} values drifted",
        want.len()
    );
    assert!(max_err > 1e-5, "max drift {max_err}");
}

#[test]
fn sparse_split_step_equals_fp32() {
    let mut g = rng(11);
    let (rows, dim) = (50, 8);
    let table = random_table(&mut g, rows, dim);
    let mut fp = SparseTable::new(table.clone(), PrecisionMode::Fp32).unwrap();
    let mut sp = SparseTable::new(table, PrecisionMode::SplitBf16).unwrap();
    assert_eq!(sp.storage_bytes(), rows * dim * 4);
    for step in 0..300 {
        let batch = random_batch(&mut g, 16, rows, 5);
        let dy = DenseTensor::from_vec(&[16, dim], uniform_vec(&mut g, 16 * dim, -1.0, 1.0)).unwrap();
        let grad = embedding_backward(&dy, &batch).unwrap();
        let s = [UpdateStrategy::RaceFreePartitioned, UpdateStrategy::LockedRowSimd][step % 2];
        let threads = 1 + step % 4;
        if s == UpdateStrategy::LockedRowSimd && threads > 1 {
            // Locked updates may reorder repeats; keep the comparison exact.
            sgd_step_sparse(&mut fp, &grad, 0.05, UpdateStrategy::RaceFreePartitioned, 1).unwrap();
            sgd_step_sparse(&mut sp, &grad, 0.05, UpdateStrategy::RaceFreePartitioned, 1).unwrap();
        } else {
            sgd_step_sparse(&mut fp, &grad, 0.05, s, threads).unwrap();
            sgd_step_sparse(&mut sp, &grad, 0.05, s, threads).unwrap();
        }
        // Forward reads the truncated plane.
        let y = sp.forward(&batch).unwrap();
        let hi = EmbeddingTable::new(bf16_truncate_forward(&sp.master())).unwrap();
        assert_eq!(
            bits(y.data()),
            bits(dlrm_core::embedding::embedding_forward(&hi, &batch).unwrap().data())
        );
    }
    assert_eq!(bits(fp.master().data()), bits(sp.master().data()));
}

#[test]
fn registry_errors_and_memory() {
    let mut opt = OptimizerState::new(PrecisionMode::SplitBf16, 0.1);
    let mut a = vec![1.25f32; 10];
    opt.register_dense(ParamId(3), &mut a).unwrap();
    assert!(matches!(
        opt.register_dense(ParamId(3), &mut a),
        Err(Error::DuplicateParam(3))
    ));
    assert!(matches!(
        opt.step_dense(ParamId(4), &mut a, &[0.0; 10]),
        Err(Error::UnknownParam(4))
    ));
    assert!(opt.step_dense(ParamId(3), &mut a, &[0.0; 9]).is_err());
    assert_eq!(opt.state_bytes(), 20);
    let t = opt.register_table(ParamId(5), random_table(&mut rng(1), 6, 4)).unwrap();
    assert_eq!(t.storage_bytes(), 6 * 4 * 4);
    assert!(opt.is_registered(ParamId(5)));

    let mut lo8 = OptimizerState::new(PrecisionMode::SplitBf16Lo8, 0.1);
    lo8.register_dense(ParamId(0), &mut a).unwrap();
    assert_eq!(lo8.state_bytes(), 10);
    let mut fp = OptimizerState::new(PrecisionMode::Fp32, 0.1);
    fp.register_dense(ParamId(0), &mut a).unwrap();
    assert_eq!(fp.state_bytes(), 0);
}

#[test]
fn dense_param_storage() {
    let t = DenseTensor::zeros(&[4, 5]);
    assert_eq!(DenseParam::new(t.clone(), PrecisionMode::Fp32).storage_bytes(), 80);
    assert_eq!(DenseParam::new(t.clone(), PrecisionMode::SplitBf16).storage_bytes(), 80);
    assert_eq!(DenseParam::new(t, PrecisionMode::SplitBf16Lo8).storage_bytes(), 60);
}

#[test]
fn precision_names() {
    for (s, m) in [
        ("fp32", PrecisionMode::Fp32),
        ("bf16split", PrecisionMode::SplitBf16),
        ("bf16split8", PrecisionMode::SplitBf16Lo8),
    ] {
        assert_eq!(s.parse::<PrecisionMode>().unwrap(), m);
    }
    assert!("fp16".parse::<PrecisionMode>().is_err());
}
