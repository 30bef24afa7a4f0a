use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use super::data::SyntheticData;
use super::report::{summarize_comms, ByteCheck, IterationReport, RankSummary, Summary, SCHEMA_VERSION};
use super::spec::RunSpec;
use crate::comms::{run_in_process, CommConfig, OpKind, RankContext, TraceRecord, TransportKind};
use crate::costmodel::{allreduce_size, alltoall_volume, global_batch, ring_allreduce_bytes_sent};
use crate::error::{Error, Result};
use crate::model::{Dlrm, DlrmConfig, MiniBatch, PhaseTimes, TableShard, TrainOptions};

/// Bytes the run is expected to allocate, dominated by the tables.
pub fn estimate_bytes(cfg: &DlrmConfig, spec: &RunSpec) -> u128 {
    let gb = global_batch(cfg, spec.scaling, spec.ranks) as u128;
    let pool = spec.data_pool.min(spec.iters + spec.warmup) as u128;
    let per_sample = (cfg.dense_width() + cfg.tables * cfg.lookups) as u128 * 8 + 8;
    let dense = cfg.layer_dims().iter().map(|&(i, o)| (i * o + o) as u128).sum::<u128>() * 4 * 4;
    let replicas = match spec.transport {
        TransportKind::InProcess => spec.ranks as u128,
        TransportKind::Tcp => 1,
    };
    let tables = match spec.transport {
        TransportKind::InProcess => cfg.table_bytes(),
        TransportKind::Tcp => cfg.table_bytes().div_ceil(spec.ranks as u128),
    };
    // The label generator keeps a full copy of the model.
    tables + cfg.table_bytes() + dense * (replicas + 1) + pool * gb * per_sample
}

fn available_memory() -> u64 {
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("MemAvailable:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map_or(4 << 30, |kb| kb * 1024)
}

/// Rejects runs that cannot work before anything large is allocated.
pub fn check_feasible(cfg: &DlrmConfig, spec: &RunSpec) -> Result<()> {
    spec.validate()?;
    cfg.validate()?;
    TableShard::new(cfg.tables, spec.ranks)?;
    let gb = global_batch(cfg, spec.scaling, spec.ranks);
    if gb == 0 || !gb.is_multiple_of(spec.ranks) {
        return Err(Error::config(format!(
            "global minibatch {gb} does not split over {} ranks",
            spec.ranks
        )));
    }
    let limit = if spec.mem_limit_bytes > 0 {
        spec.mem_limit_bytes
    } else {
        available_memory() / 10 * 8
    };
    let need = estimate_bytes(cfg, spec);
    if need > limit as u128 {
        return Err(Error::Infeasible(format!(
            "needs about {:.1} GiB ({:.1} GiB of tables), limit is {:.1} GiB",
            need as f64 / (1u64 << 30) as f64,
            cfg.table_bytes() as f64 / (1u64 << 30) as f64,
            limit as f64 / (1u64 << 30) as f64
        )));
    }
    Ok(())
}

fn make_pool(cfg: &DlrmConfig, spec: &RunSpec) -> Result<Vec<MiniBatch>> {
    let gb = global_batch(cfg, spec.scaling, spec.ranks);
    let count = spec.data_pool.min(spec.iters + spec.warmup);
    let mut gen = SyntheticData::new(cfg, spec.seed.wrapping_add(1), spec.distribution)?;
    (0..count).map(|_| gen.next_batch(gb)).collect()
}

fn compute_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build compute pool: {e}")))
}

/// Training loop of one rank.
pub fn run_rank(ctx: &RankContext, spec: &RunSpec, cfg: &DlrmConfig, pool: &[MiniBatch]) -> Result<RankSummary> {
    let shard = TableShard::new(cfg.tables, ctx.world_size())?;
    let options = TrainOptions {
        precision: spec.dtype,
        lr: spec.lr,
        strategy: spec.update_strategy,
        update_threads: spec.threads,
    };
    let mut model = Dlrm::new(cfg.clone(), spec.seed, options, shard, ctx.rank())?;
    let mut summary = RankSummary {
        rank: ctx.rank(),
        losses: Vec::new(),
        iteration_ms: Vec::new(),
        phases: Vec::new(),
        traces: Vec::new(),
        dense_checksum: 0,
        table_storage_bytes: model.table_storage_bytes() as u64,
    };
    for it in 0..spec.warmup + spec.iters {
        ctx.clear_trace();
        let batch = &pool[it % pool.len()];
        let start = Instant::now();
        let rep = model.train_step_distributed(ctx, batch, spec.comm_variant, spec.blocking)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        summary.losses.push(rep.loss);
        if it >= spec.warmup {
            summary.iteration_ms.push(ms);
            summary.phases.push(rep.times);
            summary.traces.push(ctx.trace().records);
        }
    }
    ctx.barrier()?;
    summary.dense_checksum = model.dense_checksum();
    Ok(summary)
}

/// Runs `spec` and returns a validated report. TCP runs launch one child
/// process per rank from the current executable.
pub fn run_benchmark(spec: &RunSpec) -> Result<IterationReport> {
    match spec.transport {
        TransportKind::InProcess => run_in_process_benchmark(spec),
        TransportKind::Tcp => launch_tcp(spec, &std::env::current_exe()?),
    }
}

fn comm_config(spec: &RunSpec) -> CommConfig {
    CommConfig {
        comm_workers: spec.comm_workers,
        ..CommConfig::default()
    }
}

fn run_in_process_benchmark(spec: &RunSpec) -> Result<IterationReport> {
    let cfg = spec.model_config()?;
    check_feasible(&cfg, spec)?;
    let pool = Arc::new(make_pool(&cfg, spec)?);
    let summaries = run_in_process(spec.ranks, &comm_config(spec), |ctx| {
        compute_pool(spec.threads)?.install(|| run_rank(&ctx, spec, &cfg, &pool))
    })?;
    build_report(spec, &cfg, summaries)
}

/// Body of one TCP rank (a child process or a thread in tests).
pub fn run_rank_tcp(spec: &RunSpec, rank: usize) -> Result<RankSummary> {
    let cfg = spec.model_config()?;
    check_feasible(&cfg, spec)?;
    let pool = make_pool(&cfg, spec)?;
    let ctx = RankContext::tcp(rank, spec.ranks, &spec.rendezvous, &comm_config(spec))?;
    compute_pool(spec.threads)?.install(|| run_rank(&ctx, spec, &cfg, &pool))
}

fn free_local_port() -> Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// Spawns `spec.ranks` copies of `exe` as TCP ranks and aggregates their
/// summaries. A rendezvous port of 0 picks a free local port.
pub fn launch_tcp(spec: &RunSpec, exe: &Path) -> Result<IterationReport> {
    let cfg = spec.model_config()?;
    check_feasible(&cfg, spec)?;
    let mut spec = spec.clone();
    if spec.rendezvous.ends_with(":0") {
        spec.rendezvous = format!("127.0.0.1:{}", free_local_port()?);
    }
    let dir = std::env::temp_dir().join(format!(
        "dlrm-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos())
    ));
    std::fs::create_dir_all(&dir)?;
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_vec(&spec)?)?;
    let children = (0..spec.ranks)
        .map(|r| {
            Command::new(exe)
                .arg("worker")
                .arg("--spec-file")
                .arg(&spec_path)
                .arg("--rank")
                .arg(r.to_string())
                .arg("--summary-out")
                .arg(dir.join(format!("rank{r}.json")))
                .stderr(std::process::Stdio::piped())
                .spawn()
        })
        .collect::<std::io::Result<Vec<_>>>()?;
    let mut failures = Vec::new();
    for (r, child) in children.into_iter().enumerate() {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            failures.push(format!("rank {r}: {}", String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    let result = if failures.is_empty() {
        (0..spec.ranks)
            .map(|r| {
                Ok(serde_json::from_slice(&std::fs::read(
                    dir.join(format!("rank{r}.json")),
                )?)?)
            })
            .collect::<Result<Vec<RankSummary>>>()
            .and_then(|s| build_report(&spec, &cfg, s))
    } else {
        Err(Error::Comm(format!("TCP ranks failed: {}", failures.join("; "))))
    };
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn records<'a>(it: &'a [TraceRecord], group: &'a str) -> impl Iterator<Item = &'a TraceRecord> {
    it.iter().filter(move |r| super::report::label_group(&r.label) == group)
}

/// Cross-checks one measured iteration of every rank against the cost model.
fn byte_checks(cfg: &DlrmConfig, gb: usize, ranks: usize, iteration: &[&[TraceRecord]]) -> Vec<ByteCheck> {
    let sum = |group: &str, f: &dyn Fn(&TraceRecord) -> u64| -> u64 {
        iteration.iter().flat_map(|t| records(t, group)).map(f).sum()
    };
    let grad_lens: Vec<u64> = records(iteration[0], "grad").map(|r| r.payload_bytes / 4).collect();
    let ring: u64 = (0..ranks)
        .map(|rank| {
            grad_lens
                .iter()
                .map(|&l| ring_allreduce_bytes_sent(l, ranks, rank))
                .sum::<u64>()
        })
        .sum();
    let volume = alltoall_volume(cfg, gb);
    let n = gb / ranks;
    vec![
        ByteCheck {
            what: "gradient allreduce elements per rank".into(),
            predicted: allreduce_size(cfg),
            measured: grad_lens.iter().sum(),
        },
        ByteCheck {
            what: "gradient allreduce bytes sent, all ranks".into(),
            predicted: ring,
            measured: sum("grad", &|r| r.bytes_sent),
        },
        ByteCheck {
            what: "forward embedding exchange payload, all ranks".into(),
            predicted: volume,
            measured: sum("emb-fwd", &|r| r.payload_bytes),
        },
        ByteCheck {
            what: "backward embedding exchange payload, all ranks".into(),
            predicted: volume,
            measured: sum("emb-bwd", &|r| r.payload_bytes),
        },
        ByteCheck {
            what: "forward embedding exchange bytes sent, all ranks".into(),
            predicted: (ranks as u64 - 1) * (cfg.tables * n * cfg.dim) as u64 * 4,
            measured: sum("emb-fwd", &|r| r.bytes_sent),
        },
    ]
}

fn mean_phases(p: &[PhaseTimes]) -> PhaseTimes {
    let k = p.len().max(1) as f64;
    let mut m = PhaseTimes::default();
    for t in p {
        m.bottom_fwd += t.bottom_fwd / k;
        m.emb_fwd += t.emb_fwd / k;
        m.exchange_fwd += t.exchange_fwd / k;
        m.interaction_fwd += t.interaction_fwd / k;
        m.top_fwd += t.top_fwd / k;
        m.loss += t.loss / k;
        m.top_bwd += t.top_bwd / k;
        m.interaction_bwd += t.interaction_bwd / k;
        m.exchange_bwd += t.exchange_bwd / k;
        m.bottom_bwd += t.bottom_bwd / k;
        m.emb_bwd += t.emb_bwd / k;
        m.emb_update += t.emb_update / k;
        m.allreduce_issue += t.allreduce_issue / k;
        m.allreduce_wait += t.allreduce_wait / k;
        m.dense_update += t.dense_update / k;
        m.total += t.total / k;
    }
    m
}

/// Merges per-rank summaries, failing with [`Error::Invariant`] on replica
/// divergence, byte-count mismatches or inconsistent timers.
pub fn build_report(spec: &RunSpec, cfg: &DlrmConfig, mut ranks: Vec<RankSummary>) -> Result<IterationReport> {
    ranks.sort_by_key(|r| r.rank);
    if ranks.len() != spec.ranks || ranks.iter().enumerate().any(|(i, r)| r.rank != i) {
        return Err(Error::Invariant(format!(
            "expected summaries from ranks 0..{}",
            spec.ranks
        )));
    }
    let checksums: Vec<u64> = ranks.iter().map(|r| r.dense_checksum).collect();
    if checksums.iter().any(|&c| c != checksums[0]) {
        return Err(Error::Invariant(format!(
            "dense parameters differ across ranks: {checksums:x?}"
        )));
    }
    if ranks.iter().any(|r| r.losses != ranks[0].losses) {
        return Err(Error::Invariant("ranks disagree on the loss trace".into()));
    }
    let gb = global_batch(cfg, spec.scaling, spec.ranks);
    let first: Vec<&[TraceRecord]> = ranks.iter().map(|r| r.traces[0].as_slice()).collect();
    let checks = byte_checks(cfg, gb, spec.ranks, &first);
    if let Some(bad) = checks.iter().find(|c| !c.ok()) {
        return Err(Error::Invariant(format!(
            "{}: predicted {} bytes, measured {}",
            bad.what, bad.predicted, bad.measured
        )));
    }
    let r0 = &ranks[0];
    for (i, (p, &ms)) in r0.phases.iter().zip(&r0.iteration_ms).enumerate() {
        if p.component_sum() > ms * 1.05 + 0.05 {
            return Err(Error::Invariant(format!(
                "iteration {i}: phase times sum to {:.3} ms, iteration took {ms:.3} ms",
                p.component_sum()
            )));
        }
    }
    let iteration_ms = Summary::of(&r0.iteration_ms);
    let calls = |kind: OpKind| first[0].iter().filter(|r| r.kind == kind).count();
    let mut notes = vec![
        "every rank generates the global minibatch and keeps its sample slice plus the lookups of the tables it owns"
            .to_string(),
        format!(
            "collective calls per iteration on rank 0: allreduce {}, alltoall {}, scatter {}, gather {}",
            calls(OpKind::Allreduce),
            calls(OpKind::Alltoall),
            calls(OpKind::Scatter),
            calls(OpKind::Gather)
        ),
    ];
    if spec.update_strategy != crate::embedding::UpdateStrategy::RaceFreePartitioned && spec.threads > 1 {
        notes.push("the chosen update strategy makes results depend on thread timing".into());
    }
    Ok(IterationReport {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        model: cfg.clone(),
        ranks: spec.ranks,
        global_batch: gb,
        local_batch: gb / spec.ranks,
        loss_trace: r0.losses.clone(),
        throughput_samples_per_s: gb as f64 / (iteration_ms.mean / 1e3),
        iteration_ms,
        phases: mean_phases(&r0.phases),
        comms: summarize_comms(&r0.traces),
        byte_checks: checks,
        replica_checksums: checksums,
        notes,
    })
}
