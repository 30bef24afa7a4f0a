//! Table ownership and the movement of embedding outputs between ranks.
//!
//! Forward: each owner holds its tables' outputs for the whole global batch
//! (table-major) and every rank needs all tables for its own sample slice
//! (sample-major). Backward moves the gradients the opposite way.

use serde::{Deserialize, Serialize};

use crate::comms::RankContext;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Round-robin assignment of tables to ranks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableShard {
    tables: usize,
    world: usize,
}

impl TableShard {
    pub fn new(tables: usize, world: usize) -> Result<Self> {
        if world == 0 {
            return Err(Error::config("world size must be positive"));
        }
        if world > tables {
            return Err(Error::config(format!(
                "{world} ranks but only {tables} tables; every rank must own at least one table"
            )));
        }
        Ok(Self { tables, world })
    }

    pub fn tables(&self) -> usize {
        self.tables
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn owner(&self, table: usize) -> usize {
        table % self.world
    }

    /// Position of `table` in its owner's list.
    pub fn slot(&self, table: usize) -> usize {
        table / self.world
    }

    pub fn owned(&self, rank: usize) -> Vec<usize> {
        (rank..self.tables).step_by(self.world).collect()
    }

    pub fn num_owned(&self, rank: usize) -> usize {
        self.tables.saturating_sub(rank).div_ceil(self.world)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommVariant {
    /// One scatter (forward) or gather (backward) per table.
    #[serde(rename = "scatterlist")]
    ScatterList,
    /// One scatter or gather per owning rank with its tables coalesced.
    #[serde(rename = "fused")]
    FusedScatter,
    /// A single personalized exchange per direction.
    Alltoall,
}

impl std::str::FromStr for CommVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scatterlist" => Ok(Self::ScatterList),
            "fused" => Ok(Self::FusedScatter),
            "alltoall" => Ok(Self::Alltoall),
            other => Err(Error::config(format!("unknown comm variant '{other}'"))),
        }
    }
}

fn rows_slice(t: &DenseTensor, start: usize, len: usize) -> &[f32] {
    let e = t.shape()[1];
    &t.data()[start * e..(start + len) * e]
}

/// `owned_out[k]` is the global-batch output `[n*R][E]` of this rank's k-th
/// table. Returns all `S` tables' outputs `[n][E]` for this rank's slice.
pub fn redistribute_forward(
    ctx: &RankContext,
    shard: &TableShard,
    variant: CommVariant,
    owned_out: &[DenseTensor],
    n: usize,
    dim: usize,
) -> Result<Vec<DenseTensor>> {
    let r = ctx.world_size();
    let me = ctx.rank();
    if shard.world() != r {
        return Err(Error::CollectiveMismatch(format!(
            "table shard for {} ranks used in a world of {r}",
            shard.world()
        )));
    }
    if owned_out.len() != shard.num_owned(me) {
        return Err(Error::shape(format!(
            "rank {me} owns {} tables, got {} outputs",
            shard.num_owned(me),
            owned_out.len()
        )));
    }
    if let Some(t) = owned_out.iter().find(|t| t.shape() != [n * r, dim]) {
        return Err(Error::shape(format!(
            "table output {:?}, expected [{}, {dim}]",
            t.shape(),
            n * r
        )));
    }
    let seg = n * dim;
    let pack = |dst: usize| -> Vec<f32> {
        let mut v = Vec::with_capacity(owned_out.len() * seg);
        for t in owned_out {
            v.extend_from_slice(rows_slice(t, dst * n, n));
        }
        v
    };
    let mut out: Vec<Option<DenseTensor>> = vec![None; shard.tables()];
    let mut place_coalesced = |src: usize, buf: &[f32]| -> Result<()> {
        for (k, t) in shard.owned(src).into_iter().enumerate() {
            out[t] = Some(DenseTensor::from_vec(&[n, dim], buf[k * seg..(k + 1) * seg].to_vec())?);
        }
        Ok(())
    };
    match variant {
        CommVariant::Alltoall => {
            let send = (0..r).map(pack).collect();
            let recv_sizes = (0..r).map(|src| shard.num_owned(src) * seg).collect();
            let mut h = ctx.alltoallv(send, recv_sizes, true, "emb-fwd")?;
            ctx.wait(&mut h)?;
            for (src, buf) in h.into_result()?.iter().enumerate() {
                place_coalesced(src, buf)?;
            }
        }
        CommVariant::FusedScatter => {
            for root in 0..r {
                let segs = (root == me).then(|| (0..r).map(pack).collect());
                let buf = ctx.scatter(root, segs, shard.num_owned(root) * seg, "emb-fwd")?;
                place_coalesced(root, &buf)?;
            }
        }
        CommVariant::ScatterList => {
            for t in 0..shard.tables() {
                let root = shard.owner(t);
                let segs = (root == me).then(|| {
                    let table = &owned_out[shard.slot(t)];
                    (0..r).map(|dst| rows_slice(table, dst * n, n).to_vec()).collect()
                });
                let buf = ctx.scatter(root, segs, seg, "emb-fwd")?;
                out[t] = Some(DenseTensor::from_vec(&[n, dim], buf)?);
            }
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every table received")).collect())
}

/// `d_emb[t]` is this rank's `[n][E]` gradient for table t. Returns, for each
/// owned table, the gradient over the global batch `[n*R][E]`.
pub fn redistribute_backward(
    ctx: &RankContext,
    shard: &TableShard,
    variant: CommVariant,
    d_emb: &[DenseTensor],
    n: usize,
    dim: usize,
) -> Result<Vec<DenseTensor>> {
    let r = ctx.world_size();
    let me = ctx.rank();
    if shard.world() != r {
        return Err(Error::CollectiveMismatch(format!(
            "table shard for {} ranks used in a world of {r}",
            shard.world()
        )));
    }
    if d_emb.len() != shard.tables() {
        return Err(Error::shape(format!(
            "{} table gradients for {} tables",
            d_emb.len(),
            shard.tables()
        )));
    }
    if let Some(t) = d_emb.iter().find(|t| t.shape() != [n, dim]) {
        return Err(Error::shape(format!(
            "table gradient {:?}, expected [{n}, {dim}]",
            t.shape()
        )));
    }
    let seg = n * dim;
    let k_me = shard.num_owned(me);
    let pack = |owner: usize| -> Vec<f32> {
        let mut v = Vec::with_capacity(shard.num_owned(owner) * seg);
        for t in shard.owned(owner) {
            v.extend_from_slice(d_emb[t].data());
        }
        v
    };
    // Per owned table, the global gradient assembled from every rank's slice.
    let mut global = vec![vec![0.0f32; r * seg]; k_me];
    let mut place_coalesced = |src: usize, buf: &[f32]| {
        for (k, g) in global.iter_mut().enumerate() {
            g[src * seg..(src + 1) * seg].copy_from_slice(&buf[k * seg..(k + 1) * seg]);
        }
    };
    match variant {
        CommVariant::Alltoall => {
            let send = (0..r).map(pack).collect();
            let mut h = ctx.alltoallv(send, vec![k_me * seg; r], true, "emb-bwd")?;
            ctx.wait(&mut h)?;
            for (src, buf) in h.into_result()?.iter().enumerate() {
                place_coalesced(src, buf);
            }
        }
        CommVariant::FusedScatter => {
            for root in 0..r {
                let expect = (root == me).then(|| vec![k_me * seg; r]);
                if let Some(parts) = ctx.gather(root, pack(root), expect, "emb-bwd")? {
                    for (src, buf) in parts.iter().enumerate() {
                        place_coalesced(src, buf);
                    }
                }
            }
        }
        CommVariant::ScatterList => {
            for (t, g) in d_emb.iter().enumerate() {
                let root = shard.owner(t);
                let expect = (root == me).then(|| vec![seg; r]);
                if let Some(parts) = ctx.gather(root, g.data().to_vec(), expect, "emb-bwd")? {
                    let slot = shard.slot(t);
                    for (src, buf) in parts.iter().enumerate() {
                        global[slot][src * seg..(src + 1) * seg].copy_from_slice(buf);
                    }
                }
            }
        }
    }
    global
        .into_iter()
        .map(|g| DenseTensor::from_vec(&[r * n, dim], g))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_ownership() {
        let s = TableShard::new(5, 2).unwrap();
        assert_eq!(s.owned(0), vec![0, 2, 4]);
        assert_eq!(s.owned(1), vec![1, 3]);
        assert_eq!((s.num_owned(0), s.num_owned(1)), (3, 2));
        assert_eq!((s.owner(3), s.slot(3)), (1, 1));
        assert!(TableShard::new(2, 3).is_err());
    }
}
