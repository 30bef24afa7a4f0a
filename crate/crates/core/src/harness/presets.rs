//! Named model configurations.
//!
//! `small`, `large` and `mlperf` are the published benchmark shapes. The
//! `mini-*` variants keep the table count and the shape of the MLPs but are
//! small enough to train on a workstation.

use crate::error::{Error, Result};
use crate::model::{DlrmConfig, InteractionKind};

pub const PRESET_NAMES: [&str; 6] = ["small", "large", "mlperf", "mini-small", "mini-large", "mini-mlperf"];

#[allow(clippy::too_many_arguments)]
fn cfg(
    n: usize,
    gn: usize,
    ln: usize,
    p: usize,
    s: usize,
    e: usize,
    m: usize,
    bottom: Vec<usize>,
    top: Vec<usize>,
) -> DlrmConfig {
    DlrmConfig {
        n,
        gn,
        ln,
        lookups: p,
        tables: s,
        dim: e,
        rows: m,
        bottom_mlp: bottom,
        top_mlp: top,
        interaction: InteractionKind::Dot,
        block: crate::mlp::DEFAULT_BLOCK,
    }
}

fn repeat(first: usize, width: usize, times: usize, last: usize) -> Vec<usize> {
    std::iter::once(first)
        .chain(std::iter::repeat_n(width, times))
        .chain(std::iter::once(last))
        .filter(|&w| w != 0)
        .collect()
}

pub fn preset(name: &str) -> Result<DlrmConfig> {
    Ok(match name {
        "small" => cfg(
            2048,
            8192,
            1024,
            50,
            8,
            64,
            1_000_000,
            vec![512, 512, 64],
            vec![1024, 1024, 1024, 1],
        ),
        // No single-socket minibatch is defined for this shape; the per-rank
        // weak-scaling minibatch stands in.
        "large" => cfg(512, 16384, 512, 100, 64, 256, 6_000_000, repeat(2048, 2048, 7, 256), {
            let mut v = vec![4096; 15];
            v.push(1);
            v
        }),
        "mlperf" => cfg(
            2048,
            16384,
            2048,
            1,
            26,
            128,
            40_000_000,
            vec![13, 512, 256, 128],
            vec![512, 512, 256, 1],
        ),
        "mini-small" => cfg(
            256,
            1024,
            128,
            50,
            8,
            16,
            10_000,
            vec![64, 64, 16],
            vec![128, 128, 128, 1],
        ),
        "mini-large" => cfg(128, 512, 64, 20, 64, 32, 2_048, repeat(128, 128, 7, 32), {
            let mut v = vec![256; 15];
            v.push(1);
            v
        }),
        "mini-mlperf" => cfg(
            128,
            4096,
            256,
            1,
            26,
            16,
            10_000,
            vec![13, 64, 32, 16],
            vec![128, 128, 64, 1],
        ),
        other => {
            return Err(Error::config(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}
