use serde::{Deserialize, Serialize};

use super::spec::RunSpec;
use crate::comms::{OpKind, TraceRecord};
use crate::error::{Error, Result};
use crate::model::{DlrmConfig, PhaseTimes};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        // Nearest-rank percentiles.
        let pick = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: pick(0.5),
            p95: pick(0.95),
            min: v[0],
            max: v[v.len() - 1],
        }
    }
}

/// Per-iteration averages for one group of collectives on one rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommSummary {
    pub kind: OpKind,
    /// `grad`, `loss`, `emb-fwd` or `emb-bwd`.
    pub group: String,
    pub calls_per_iter: f64,
    pub pre_ms: f64,
    pub wait_ms: f64,
    pub post_ms: f64,
    pub exec_ms: f64,
    pub bytes_sent_per_iter: f64,
    pub payload_bytes_per_iter: f64,
}

pub fn label_group(label: &str) -> &str {
    if label.starts_with("emb-") {
        label
    } else {
        label.split('-').next().unwrap_or(label)
    }
}

/// Summarises the traces of the measured iterations of one rank.
pub fn summarize_comms(traces: &[Vec<TraceRecord>]) -> Vec<CommSummary> {
    let iters = traces.len().max(1) as f64;
    let mut out: Vec<CommSummary> = Vec::new();
    for rec in traces.iter().flatten() {
        let group = label_group(&rec.label).to_string();
        let pos = out
            .iter()
            .position(|s| s.kind == rec.kind && s.group == group)
            .unwrap_or_else(|| {
                out.push(CommSummary {
                    kind: rec.kind,
                    group: group.clone(),
                    calls_per_iter: 0.0,
                    pre_ms: 0.0,
                    wait_ms: 0.0,
                    post_ms: 0.0,
                    exec_ms: 0.0,
                    bytes_sent_per_iter: 0.0,
                    payload_bytes_per_iter: 0.0,
                });
                out.len() - 1
            });
        let s = &mut out[pos];
        s.calls_per_iter += 1.0 / iters;
        s.pre_ms += rec.timings.pre_ms / iters;
        s.wait_ms += rec.timings.wait_ms / iters;
        s.post_ms += rec.timings.post_ms / iters;
        s.exec_ms += rec.exec_ms / iters;
        s.bytes_sent_per_iter += rec.bytes_sent as f64 / iters;
        s.payload_bytes_per_iter += rec.payload_bytes as f64 / iters;
    }
    out
}

/// One predicted-versus-measured byte count for a single iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByteCheck {
    pub what: String,
    pub predicted: u64,
    pub measured: u64,
}

impl ByteCheck {
    pub fn ok(&self) -> bool {
        self.predicted == self.measured
    }
}

/// What one rank measured; TCP ranks exchange this as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    pub losses: Vec<f32>,
    /// Measured (post-warmup) iterations only.
    pub iteration_ms: Vec<f64>,
    pub phases: Vec<PhaseTimes>,
    pub traces: Vec<Vec<TraceRecord>>,
    pub dense_checksum: u64,
    pub table_storage_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub schema_version: u32,
    pub spec: RunSpec,
    pub model: DlrmConfig,
    pub ranks: usize,
    pub global_batch: usize,
    pub local_batch: usize,
    /// Loss of every iteration, warmup included.
    pub loss_trace: Vec<f32>,
    pub iteration_ms: Summary,
    pub throughput_samples_per_s: f64,
    /// Mean per-phase times on rank 0.
    pub phases: PhaseTimes,
    /// Collective timings and volumes on rank 0.
    pub comms: Vec<CommSummary>,
    pub byte_checks: Vec<ByteCheck>,
    pub replica_checksums: Vec<u64>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub baseline_ranks: usize,
    pub candidate_ranks: usize,
    pub baseline_throughput: f64,
    pub candidate_throughput: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

/// Speedup and efficiency of `candidate` over `baseline`. Efficiency is the
/// speedup divided by the ratio of rank counts.
pub fn compare_reports(baseline: &IterationReport, candidate: &IterationReport) -> Result<ScalingRow> {
    if baseline.model != candidate.model {
        return Err(Error::config("reports are for different model configurations"));
    }
    if baseline.spec.scaling != candidate.spec.scaling {
        return Err(Error::config("reports use different scaling modes"));
    }
    if !(baseline.throughput_samples_per_s > 0.0 && candidate.throughput_samples_per_s > 0.0) {
        return Err(Error::config("reports need positive throughput"));
    }
    let speedup = candidate.throughput_samples_per_s / baseline.throughput_samples_per_s;
    Ok(ScalingRow {
        baseline_ranks: baseline.ranks,
        candidate_ranks: candidate.ranks,
        baseline_throughput: baseline.throughput_samples_per_s,
        candidate_throughput: candidate.throughput_samples_per_s,
        speedup,
        efficiency: speedup / (candidate.ranks as f64 / baseline.ranks as f64),
    })
}
