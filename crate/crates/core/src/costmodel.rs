//! Closed-form communication volumes for hybrid-parallel DLRM training.
//!
//! All byte counts assume FP32 payloads. Volumes are what the collectives
//! carry; framing and control traffic are not included.

use serde::{Deserialize, Serialize};

use crate::embedding::partition_rows;
use crate::model::DlrmConfig;

pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Global minibatch fixed, split across ranks.
    Strong,
    /// Per-rank minibatch fixed, global minibatch grows with ranks.
    Weak,
}

impl std::str::FromStr for ScalingMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "strong" => Ok(Self::Strong),
            "weak" => Ok(Self::Weak),
            other => Err(crate::Error::config(format!("unknown scaling mode '{other}'"))),
        }
    }
}

/// Elements in the gradient allreduce for the given `(fan_in, fan_out)` layers.
pub fn allreduce_size_layers(layers: &[(usize, usize)]) -> u64 {
    layers.iter().map(|&(i, o)| (i * o + o) as u64).sum()
}

/// Elements in the gradient allreduce: weights plus biases of every layer of
/// both MLPs. Independent of rank count and minibatch.
pub fn allreduce_size(cfg: &DlrmConfig) -> u64 {
    allreduce_size_layers(&cfg.layer_dims())
}

/// Bytes every rank's tables produce for one global batch of `global_n`
/// samples, summed over ranks.
pub fn alltoall_volume(cfg: &DlrmConfig, global_n: usize) -> u64 {
    cfg.tables as u64 * global_n as u64 * cfg.dim as u64 * 4
}

/// Bytes of one point-to-point message in strong scaling: the fixed volume
/// split over `R` senders and `R` receivers.
pub fn strong_scaling_msg_size(cfg: &DlrmConfig, ranks: usize) -> f64 {
    alltoall_volume(cfg, cfg.gn) as f64 / (ranks as f64 * ranks as f64)
}

/// Total alltoall bytes under weak scaling with `ranks` ranks.
pub fn weak_scaling_volume(cfg: &DlrmConfig, ranks: usize) -> u64 {
    alltoall_volume(cfg, cfg.ln * ranks)
}

/// Global minibatch for a scaling mode.
pub fn global_batch(cfg: &DlrmConfig, mode: ScalingMode, ranks: usize) -> usize {
    match mode {
        ScalingMode::Strong => cfg.gn,
        ScalingMode::Weak => cfg.ln * ranks,
    }
}

/// Bytes rank `rank` sends in a ring allreduce of `elements` FP32 values.
/// Equals `2(R-1)/R * elements * 4` whenever `R` divides `elements`.
pub fn ring_allreduce_bytes_sent(elements: u64, ranks: usize, rank: usize) -> u64 {
    if ranks <= 1 {
        return 0;
    }
    let chunk = |c: usize| {
        let (s, e) = partition_rows(elements as usize, ranks, c % ranks);
        (e - s) as u64
    };
    (2 * elements - chunk(rank + 1) - chunk(rank + 2)) * 4
}

/// Average per-rank allreduce bytes, `2(R-1)/R * elements * 4`.
pub fn allreduce_bytes_per_rank(elements: u64, ranks: usize) -> f64 {
    2.0 * (ranks as f64 - 1.0) / ranks as f64 * elements as f64 * 4.0
}

/// Average per-rank alltoall bytes leaving a rank, `(R-1)/R^2 * volume`.
pub fn alltoall_bytes_per_rank(volume: u64, ranks: usize) -> f64 {
    (ranks as f64 - 1.0) / (ranks as f64 * ranks as f64) * volume as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    AlltoallBound,
    AllreduceBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommPlan {
    pub mode: ScalingMode,
    pub ranks: usize,
    pub global_batch: usize,
    pub allreduce_elements: u64,
    pub allreduce_bytes_per_rank: f64,
    /// Forward-direction volume; backward moves the same amount back.
    pub alltoall_total_bytes: u64,
    pub alltoall_bytes_per_rank: f64,
    pub alltoall_msg_bytes: f64,
    pub table_bytes: u128,
}

impl CommPlan {
    pub fn new(cfg: &DlrmConfig, ranks: usize, mode: ScalingMode) -> Self {
        let ranks = ranks.max(1);
        let gb = global_batch(cfg, mode, ranks);
        let elements = allreduce_size(cfg);
        let volume = alltoall_volume(cfg, gb);
        CommPlan {
            mode,
            ranks,
            global_batch: gb,
            allreduce_elements: elements,
            allreduce_bytes_per_rank: allreduce_bytes_per_rank(elements, ranks),
            alltoall_total_bytes: volume,
            alltoall_bytes_per_rank: alltoall_bytes_per_rank(volume, ranks),
            alltoall_msg_bytes: volume as f64 / (ranks as f64 * ranks as f64),
            table_bytes: cfg.table_bytes(),
        }
    }

    /// Which collective moves more bytes per rank. Single-rank runs move
    /// nothing and count as alltoall-bound.
    pub fn regime(&self) -> Regime {
        if self.alltoall_bytes_per_rank >= self.allreduce_bytes_per_rank {
            Regime::AlltoallBound
        } else {
            Regime::AllreduceBound
        }
    }
}

/// Smallest rank count in `2..=max_ranks` at which the plan becomes
/// allreduce-bound, if any.
pub fn crossover_ranks(cfg: &DlrmConfig, mode: ScalingMode, max_ranks: usize) -> Option<usize> {
    (2..=max_ranks).find(|&r| CommPlan::new(cfg, r, mode).regime() == Regime::AllreduceBound)
}
