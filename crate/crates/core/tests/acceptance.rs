//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its verdict even when captured output is discarded.

mod common;

use std::time::{Duration, Instant};

use common::*;
use dlrm_core::comms::OpKind;
use dlrm_core::costmodel::*;
use dlrm_core::embedding::*;
use dlrm_core::harness::{preset, run_benchmark, IndexDistribution, IndexSampler, IterationReport, RunSpec};
use dlrm_core::mlp::Activation;
use dlrm_core::model::CommVariant;
use dlrm_core::optim::{split, PrecisionMode};
use dlrm_core::tensor::DenseTensor;
use rand::RngExt;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < budget.as_secs_f64(), || {
        format!("took {secs:.1}s, budget {}s", budget.as_secs())
    })?;
    Ok(secs)
}

fn update_with(table: &EmbeddingTable, grad: &SparseGrad, alpha: f32, s: UpdateStrategy, threads: usize) -> Vec<f32> {
    let mut t = table.clone();
    embedding_update(&mut t, grad, alpha, s, threads).unwrap();
    t.weight().data().to_vec()
}

fn kernel_oracles() -> Outcome {
    let start = Instant::now();
    let mut g = rng(1001);
    let instances = 1000;
    let mut repeats = 0;
    for case in 0..instances {
        let rows = g.random_range(1..=64);
        let dim = g.random_range(1..=16);
        let n = g.random_range(1..=32);
        let table = random_table(&mut g, rows, dim);
        let batch = random_batch(&mut g, n, rows, 6);
        let y = embedding_forward(&table, &batch).map_err(|e| e.to_string())?;
        ensure(bits(y.data()) == bits(&seq_forward(table.weight(), &batch)), || {
            format!("forward differs on case {case}")
        })?;
        let dy = DenseTensor::from_vec(&[n, dim], uniform_vec(&mut g, n * dim, -1.0, 1.0)).unwrap();
        let grad = embedding_backward(&dy, &batch).map_err(|e| e.to_string())?;
        ensure(
            grad.indices() == batch.indices() && bits(grad.dw().data()) == bits(&seq_backward(&dy, &batch)),
            || format!("backward differs on case {case}"),
        )?;

        let alpha = -0.1;
        let mut want = table.weight().clone();
        seq_update(&mut want, &grad, alpha);
        let want = bits(want.data());
        for threads in 1..=16 {
            let got = update_with(&table, &grad, alpha, UpdateStrategy::RaceFreePartitioned, threads);
            ensure(bits(&got) == want, || {
                format!("race-free update not bit-exact on case {case} with {threads} threads")
            })?;
        }

        let mut seen = std::collections::HashSet::new();
        let repeated = !batch.indices().iter().all(|i| seen.insert(*i));
        repeats += repeated as usize;
        let scale = update_magnitude(table.weight(), &grad, alpha);
        let threads = g.random_range(1..=8);
        for s in [UpdateStrategy::AtomicExchange, UpdateStrategy::LockedRowSimd] {
            let got = update_with(&table, &grad, alpha, s, threads);
            if repeated {
                // Concurrent adds to one row may land in any order.
                for ((a, b), m) in got.iter().zip(want.iter().map(|&b| f32::from_bits(b))).zip(&scale) {
                    ensure((a - b).abs() <= 4.0 * ulp(*m), || {
                        format!("{s:?} off by {} on case {case}", (a - b).abs())
                    })?;
                }
            } else {
                ensure(bits(&got) == want, || format!("{s:?} not exact on case {case}"))?;
            }
        }
    }
    let secs = within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "{instances} instances ({repeats} with repeated rows), race-free exact for 1-16 threads, {secs:.1}s"
    ))
}

fn mlp_and_gradients() -> Outcome {
    let start = Instant::now();
    let mut g = rng(2002);
    let cases = 60;
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (n, c, k) = (
            g.random_range(8..=128),
            g.random_range(8..=128),
            g.random_range(8..=128),
        );
        let act = [Activation::None, Activation::Relu, Activation::Sigmoid][case % 3];
        let d = layer_vs_naive(g.random(), n, c, k, act);
        ensure(d <= 1e-5, || format!("N={n} C={c} K={k} {act:?}: max abs diff {d:e}"))?;
        worst = worst.max(d);
    }
    let mut fd_worst = 0.0f64;
    for (model_seed, data_seed) in [(3, 4), (5, 6), (8, 9)] {
        fd_worst = fd_worst.max(full_model_fd(model_seed, data_seed, 10, 1e-3)?);
    }
    let secs = within_budget(start, Duration::from_secs(120))?;
    Ok(format!(
        "{cases} shapes max diff {worst:.1e}; 30 finite-difference checks, worst rel err {fd_worst:.1e}; {secs:.1}s"
    ))
}

fn final_loss(r: &IterationReport) -> f64 {
    let tail = &r.loss_trace[r.loss_trace.len() - 10..];
    tail.iter().map(|&l| l as f64).sum::<f64>() / 10.0
}

fn split_sgd() -> Outcome {
    let mut g = rng(3003);
    let count = 1_000_000;
    let raw: Vec<u32> = (0..count).map(|_| g.random()).collect();
    let t = DenseTensor::from_vec(&[count], raw.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
    ensure(bits(split(&t).reconstruct().data()) == raw, || {
        "split/reconstruct round trip lost bits".into()
    })?;

    let (want, got) = dense_trajectory(PrecisionMode::SplitBf16, 1000, 17);
    ensure(bits(&got) == bits(&want), || "split trajectory left float32 SGD".into())?;

    let (want8, got8) = dense_trajectory(PrecisionMode::SplitBf16Lo8, 1000, 17);
    let drift = got8
        .iter()
        .zip(&want8)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    let differing = got8
        .iter()
        .zip(&want8)
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    ensure(differing > want8.len() / 2 && drift > 1e-5, || {
        format!("8-bit low plane stayed on track ({differing} differ, drift {drift:e})")
    })?;

    let spec = |dtype| RunSpec {
        config: "mini-mlperf".into(),
        iters: 500,
        warmup: 0,
        data_pool: 32,
        dtype,
        ..RunSpec::default()
    };
    let fp = run_benchmark(&spec(PrecisionMode::Fp32)).map_err(|e| e.to_string())?;
    let bf = run_benchmark(&spec(PrecisionMode::SplitBf16)).map_err(|e| e.to_string())?;
    let (lf, lb) = (final_loss(&fp), final_loss(&bf));
    let rel = (lb - lf).abs() / lf;
    ensure(rel <= 0.005, || {
        format!("final loss {lb:.5} vs {lf:.5} ({:.3}%)", rel * 100.0)
    })?;
    ensure(lf < fp.loss_trace[0] as f64, || "fp32 run did not learn".into())?;
    Ok(format!(
        "1e6 round trips exact; 1000 steps bit-identical; 8-bit plane drifts {drift:.1e}; \
         mini-mlperf final loss {lb:.5} vs {lf:.5} ({:.3}%)",
        rel * 100.0
    ))
}

fn distributed() -> Outcome {
    let start = Instant::now();
    let cfg = test_config(8, 64);
    let batches = batches_for(&cfg, 6);
    let reference = train_distributed(&cfg, 1, &batches, CommVariant::Alltoall, false, 0.1);
    for world in [1, 2, 4, 8] {
        let runs = train_distributed(&cfg, world, &batches, CommVariant::Alltoall, false, 0.1);
        for (r, run) in runs.iter().enumerate() {
            ensure(run.checksums == runs[0].checksums, || {
                format!("R={world}: rank {r} dense parameters diverged")
            })?;
        }
        if world == 2 {
            for (step, (a, b)) in runs[0].losses.iter().zip(&reference[0].losses).enumerate() {
                ensure(ulps_apart(*a, *b) <= 4, || format!("step {step}: loss {a} vs {b}"))?;
            }
        }
    }

    let world = 4;
    let cfg = test_config(8, 32);
    let batches = batches_for(&cfg, 3);
    let variants = [
        CommVariant::Alltoall,
        CommVariant::FusedScatter,
        CommVariant::ScatterList,
    ];
    let runs: Vec<_> = variants
        .iter()
        .map(|&v| train_distributed(&cfg, world, &batches, v, false, 0.1))
        .collect();
    let payload = |run: &[RankRun], label: &str| -> u64 {
        run.iter()
            .flat_map(|r| r.trace.records.iter())
            .filter(|r| r.label == label)
            .map(|r| r.bytes_sent)
            .sum()
    };
    for (v, run) in variants.iter().zip(&runs).skip(1) {
        for label in ["emb-fwd", "emb-bwd"] {
            ensure(payload(run, label) == payload(&runs[0], label), || {
                format!("{v:?} moves a different {label} payload")
            })?;
        }
        for (a, b) in run.iter().zip(&runs[0]) {
            ensure(a.checksums == b.checksums && bits(&a.losses) == bits(&b.losses), || {
                format!("{v:?} changed the numerics")
            })?;
        }
    }
    let steps = batches.len();
    let calls = |run: &[RankRun], kind: OpKind, label: &str| {
        run[0].trace.of_kind(kind).filter(|r| r.label == label).count() / steps
    };
    let counts = [
        (
            calls(&runs[2], OpKind::Scatter, "emb-fwd"),
            calls(&runs[2], OpKind::Gather, "emb-bwd"),
        ),
        (
            calls(&runs[1], OpKind::Scatter, "emb-fwd"),
            calls(&runs[1], OpKind::Gather, "emb-bwd"),
        ),
        (
            calls(&runs[0], OpKind::Alltoall, "emb-fwd"),
            calls(&runs[0], OpKind::Alltoall, "emb-bwd"),
        ),
    ];
    ensure(counts == [(cfg.tables, cfg.tables), (world, world), (1, 1)], || {
        format!("calls per direction {counts:?}")
    })?;
    let secs = within_budget(start, Duration::from_secs(180))?;
    Ok(format!(
        "replicas bit-identical at R=1,2,4,8; R=2 within 4 ulp; calls S={} / groups={world} / 1; {secs:.1}s",
        cfg.tables
    ))
}

fn cost_model() -> Outcome {
    let mut measured = 0;
    for config in ["mini-small", "mini-large", "mini-mlperf"] {
        for ranks in [2, 4, 8] {
            let spec = RunSpec {
                config: config.into(),
                ranks,
                iters: 1,
                warmup: 0,
                data_pool: 1,
                ..RunSpec::default()
            };
            let r = run_benchmark(&spec).map_err(|e| e.to_string())?;
            // Includes the summed exchange payload against the predicted volume.
            ensure(r.byte_checks.len() == 5, || "missing byte checks".into())?;
            for c in &r.byte_checks {
                ensure(c.ok(), || format!("{config} R={ranks}: {c:?}"))?;
            }
            measured += 1;
        }
    }
    let mib = |v: f64| v / MIB;
    let large = preset("large").unwrap();
    let mlperf = preset("mlperf").unwrap();
    let small = preset("small").unwrap();
    let large_a2a = mib(alltoall_volume(&large, large.gn) as f64);
    let mlperf_a2a = mib(alltoall_volume(&mlperf, mlperf.gn) as f64);
    let small_ar = mib(allreduce_size(&small) as f64 * 4.0);
    let large_ar = mib(allreduce_size(&large) as f64 * 4.0);
    ensure(large_a2a == 1024.0, || format!("large alltoall {large_a2a} MiB"))?;
    ensure(mlperf_a2a == 208.0, || format!("mlperf alltoall {mlperf_a2a} MiB"))?;
    ensure((small_ar - 9.5).abs() <= 0.05 * 9.5, || {
        format!("small allreduce {small_ar} MiB")
    })?;
    ensure((large_ar - 1047.0).abs() <= 0.05 * 1047.0, || {
        format!("large allreduce {large_ar} MiB")
    })?;
    for cfg in [&small, &large, &mlperf] {
        for r in 1..=64 {
            ensure(
                strong_scaling_msg_size(cfg, 2 * r) == strong_scaling_msg_size(cfg, r) / 4.0,
                || format!("msg(2R) != msg(R)/4 at R={r}"),
            )?;
        }
    }
    Ok(format!(
        "{measured} measured runs exact; alltoall large {large_a2a} / mlperf {mlperf_a2a} MiB, \
         allreduce small {small_ar:.2} / large {large_ar:.1} MiB; msg(2R)=msg(R)/4"
    ))
}

fn grad_allreduce_ms(r: &IterationReport) -> f64 {
    r.comms
        .iter()
        .filter(|c| c.kind == OpKind::Allreduce && c.group == "grad")
        .map(|c| c.pre_ms + c.wait_ms + c.post_ms)
        .sum()
}

fn overlap() -> Outcome {
    let spec = |blocking| RunSpec {
        config: "mini-large".into(),
        ranks: 4,
        iters: 4,
        warmup: 1,
        data_pool: 2,
        comm_workers: 1,
        blocking,
        ..RunSpec::default()
    };
    let overlapped = grad_allreduce_ms(&run_benchmark(&spec(false)).map_err(|e| e.to_string())?);
    let blocking = grad_allreduce_ms(&run_benchmark(&spec(true)).map_err(|e| e.to_string())?);
    ensure(blocking > 0.0, || "blocking allreduce took no time".into())?;
    let ratio = overlapped / blocking;
    ensure(ratio <= 0.5, || {
        format!("exposed {overlapped:.2} ms vs blocking {blocking:.2} ms ({ratio:.2}x)")
    })?;
    Ok(format!(
        "exposed gradient allreduce {overlapped:.2} ms/iter vs blocking {blocking:.2} ms/iter ({ratio:.3}x)"
    ))
}

fn median_update_ms(table: &EmbeddingTable, grad: &SparseGrad, s: UpdateStrategy, threads: usize) -> f64 {
    let mut times: Vec<f64> = (0..7)
        .map(|_| {
            let mut t = table.clone();
            let start = Instant::now();
            embedding_update(&mut t, grad, -0.01, s, threads).unwrap();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn contention() -> Outcome {
    let (rows, dim, n, bag, threads) = (100_000, 64, 2048, 20, 8);
    let mut g = rng(7007);
    let table = random_table(&mut g, rows, dim);
    let sampler = IndexSampler::new(rows, IndexDistribution::Clustered).unwrap();
    let indices: Vec<usize> = (0..n * bag).map(|_| sampler.sample(&mut g)).collect();
    let batch = LookupBatch::uniform_bags(bag, indices).unwrap();
    let dy = DenseTensor::from_vec(&[n, dim], uniform_vec(&mut g, n * dim, -1.0, 1.0)).unwrap();
    let grad = embedding_backward(&dy, &batch).unwrap();
    let race_free = median_update_ms(&table, &grad, UpdateStrategy::RaceFreePartitioned, threads);
    let atomic = median_update_ms(&table, &grad, UpdateStrategy::AtomicExchange, threads);
    let speedup = atomic / race_free;
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    let detail = format!("race-free {race_free:.2} ms vs atomic {atomic:.2} ms ({speedup:.2}x, {cores} cores)");
    ensure(speedup >= 1.5, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("kernel oracle equivalence", kernel_oracles),
        ("blocked MLP and model gradients", mlp_and_gradients),
        ("split-SGD-BF16", split_sgd),
        ("distributed correctness", distributed),
        ("cost model", cost_model),
        ("communication overlap", overlap),
        ("update contention", contention),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
