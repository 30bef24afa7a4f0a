//! Collective algorithms over point-to-point frames.
//!
//! Every collective starts with a metadata exchange: each rank sends a short
//! descriptor of its call to every peer, then all ranks validate the same set
//! of descriptors. A disagreement therefore produces the same diagnostic on
//! every rank instead of a hang on some of them.

use std::sync::Arc;
use std::time::Duration;

use super::mailbox::Mailbox;
use super::wire::{Body, Frame, OpKind};
use crate::embedding::partition_rows;
use crate::error::{Error, Result};

/// Sentinel for "no expectation" in descriptors.
const ANY: u64 = u64::MAX;

pub(crate) trait Transport: Send + Sync {
    fn send(&self, frame: Frame) -> Result<()>;
    fn mailbox(&self) -> &Mailbox;
}

/// Frames actually moved by one collective call. Control traffic and the
/// local segment are excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub messages: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Clone)]
pub(crate) struct Link {
    pub transport: Arc<dyn Transport>,
    pub rank: usize,
    pub world: usize,
    pub timeout: Duration,
}

impl Link {
    fn send_data(&self, seq: u32, kind: OpKind, dst: usize, data: Vec<f32>, stats: &mut OpStats) -> Result<()> {
        stats.messages += 1;
        stats.bytes_sent += data.len() as u64 * 4;
        self.transport
            .send(Frame::new(seq, kind, self.rank, dst, Body::Data(data)))
    }

    fn recv_data(&self, seq: u32, kind: OpKind, src: usize, stats: &mut OpStats) -> Result<Vec<f32>> {
        let frame = self.transport.mailbox().pop(src, seq, false, kind, self.timeout)?;
        match frame.body {
            Body::Data(v) => {
                stats.bytes_received += v.len() as u64 * 4;
                Ok(v)
            }
            _ => Err(Error::Comm(format!(
                "rank {src} sent a non-data frame in {} #{seq}",
                kind.name()
            ))),
        }
    }

    /// Exchanges descriptors with every rank; returns all of them indexed by rank.
    fn handshake(&self, seq: u32, kind: OpKind, desc: Vec<u64>) -> Result<Vec<Vec<u64>>> {
        for dst in (0..self.world).filter(|&d| d != self.rank) {
            self.transport
                .send(Frame::new(seq, kind, self.rank, dst, Body::Control(desc.clone())))?;
        }
        let mut all = Vec::with_capacity(self.world);
        for src in 0..self.world {
            if src == self.rank {
                all.push(desc.clone());
                continue;
            }
            let frame = self.transport.mailbox().pop(src, seq, true, kind, self.timeout)?;
            match frame.body {
                Body::Control(words) => all.push(words),
                _ => return Err(Error::Comm(format!("rank {src} sent a malformed descriptor"))),
            }
        }
        Ok(all)
    }

    pub fn barrier(&self, seq: u32) -> Result<OpStats> {
        self.handshake(seq, OpKind::Barrier, vec![])?;
        Ok(OpStats::default())
    }

    /// Ring reduce-scatter followed by ring allgather, in place.
    pub fn allreduce(&self, seq: u32, buf: &mut [f32]) -> Result<OpStats> {
        let kind = OpKind::Allreduce;
        let descs = self.handshake(seq, kind, vec![buf.len() as u64])?;
        if descs.iter().any(|d| d.len() != 1 || d[0] != descs[0][0]) {
            let lens: Vec<String> = descs
                .iter()
                .enumerate()
                .map(|(r, d)| format!("rank {r}: {}", d[0]))
                .collect();
            return Err(Error::CollectiveMismatch(format!(
                "allreduce #{seq} buffer lengths differ ({})",
                lens.join(", ")
            )));
        }
        let mut stats = OpStats::default();
        let r = self.world;
        if r == 1 {
            return Ok(stats);
        }
        let me = self.rank;
        let right = (me + 1) % r;
        let left = (me + r - 1) % r;
        let len = buf.len();
        let chunk = |c: usize| {
            let (s, e) = partition_rows(len, r, c);
            s..e
        };
        for step in 0..r - 1 {
            let send_c = (me + r - step) % r;
            let recv_c = (me + 2 * r - step - 1) % r;
            self.send_data(seq, kind, right, buf[chunk(send_c)].to_vec(), &mut stats)?;
            let incoming = self.recv_data(seq, kind, left, &mut stats)?;
            let dst = &mut buf[chunk(recv_c)];
            if incoming.len() != dst.len() {
                return Err(Error::Comm(format!(
                    "allreduce #{seq}: chunk of {} from rank {left}, expected {}",
                    incoming.len(),
                    dst.len()
                )));
            }
            for (d, v) in dst.iter_mut().zip(&incoming) {
                *d += *v;
            }
        }
        for step in 0..r - 1 {
            let send_c = (me + 1 + r - step) % r;
            let recv_c = (me + r - step) % r;
            self.send_data(seq, kind, right, buf[chunk(send_c)].to_vec(), &mut stats)?;
            let incoming = self.recv_data(seq, kind, left, &mut stats)?;
            let dst = &mut buf[chunk(recv_c)];
            if incoming.len() != dst.len() {
                return Err(Error::Comm(format!(
                    "allreduce #{seq}: chunk of {} from rank {left}, expected {}",
                    incoming.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&incoming);
        }
        Ok(stats)
    }

    /// Personalized exchange. `recv_sizes[j]` is the length expected from rank
    /// j, or `None` to require equal segment sizes everywhere.
    pub fn alltoall(
        &self,
        seq: u32,
        send: Vec<Vec<f32>>,
        recv_sizes: Option<&[usize]>,
    ) -> Result<(Vec<Vec<f32>>, OpStats)> {
        let kind = OpKind::Alltoall;
        let r = self.world;
        if send.len() != r {
            return Err(Error::shape(format!("alltoall needs {r} segments, got {}", send.len())));
        }
        if let Some(rs) = recv_sizes {
            if rs.len() != r {
                return Err(Error::shape(format!(
                    "alltoall needs {r} receive sizes, got {}",
                    rs.len()
                )));
            }
        }
        let mut desc = Vec::with_capacity(2 * r + 1);
        desc.push(recv_sizes.is_some() as u64);
        desc.extend(send.iter().map(|s| s.len() as u64));
        match recv_sizes {
            Some(rs) => desc.extend(rs.iter().map(|&s| s as u64)),
            None => desc.extend(std::iter::repeat_n(ANY, r)),
        }
        let descs = self.handshake(seq, kind, desc)?;
        validate_alltoall(seq, &descs, r)?;

        let mut stats = OpStats::default();
        let mut segments: Vec<Option<Vec<f32>>> = send.into_iter().map(Some).collect();
        for off in 1..r {
            let dst = (self.rank + off) % r;
            let seg = segments[dst].take().unwrap();
            self.send_data(seq, kind, dst, seg, &mut stats)?;
        }
        let mut recv: Vec<Vec<f32>> = vec![Vec::new(); r];
        recv[self.rank] = segments[self.rank].take().unwrap();
        for off in 1..r {
            let src = (self.rank + r - off) % r;
            recv[src] = self.recv_data(seq, kind, src, &mut stats)?;
        }
        Ok((recv, stats))
    }

    /// Root sends `segments[j]` to rank j. Every rank states the length it expects.
    pub fn scatter(
        &self,
        seq: u32,
        root: usize,
        segments: Option<Vec<Vec<f32>>>,
        expect: usize,
    ) -> Result<(Vec<f32>, OpStats)> {
        let kind = OpKind::Scatter;
        let r = self.world;
        let is_root = self.rank == root;
        match (&segments, is_root) {
            (Some(s), true) if s.len() != r => {
                return Err(Error::shape(format!(
                    "scatter root needs {r} segments, got {}",
                    s.len()
                )));
            }
            (None, true) => return Err(Error::shape("scatter root must supply segments")),
            (Some(_), false) => return Err(Error::shape("only the scatter root supplies segments")),
            _ => {}
        }
        let mut desc = vec![root as u64, expect as u64];
        match &segments {
            Some(s) => desc.extend(s.iter().map(|x| x.len() as u64)),
            None => desc.extend(std::iter::repeat_n(ANY, r)),
        }
        let descs = self.handshake(seq, kind, desc)?;
        validate_rooted(seq, "scatter", &descs, r, |root_desc, j, d| (root_desc[2 + j], d[1]))?;

        let mut stats = OpStats::default();
        if let Some(segs) = segments {
            let mut mine = Vec::new();
            for (j, seg) in segs.into_iter().enumerate() {
                if j == self.rank {
                    mine = seg;
                } else {
                    self.send_data(seq, kind, j, seg, &mut stats)?;
                }
            }
            Ok((mine, stats))
        } else {
            let v = self.recv_data(seq, kind, root, &mut stats)?;
            Ok((v, stats))
        }
    }

    /// Root receives every rank's `send`. `expect` (root only) lists lengths.
    pub fn gather(
        &self,
        seq: u32,
        root: usize,
        send: Vec<f32>,
        expect: Option<&[usize]>,
    ) -> Result<(Option<Vec<Vec<f32>>>, OpStats)> {
        let kind = OpKind::Gather;
        let r = self.world;
        let is_root = self.rank == root;
        if let Some(e) = expect {
            if !is_root || e.len() != r {
                return Err(Error::shape(
                    "gather expectations are supplied by the root, one per rank",
                ));
            }
        }
        let mut desc = vec![root as u64, send.len() as u64];
        match expect {
            Some(e) => desc.extend(e.iter().map(|&x| x as u64)),
            None => desc.extend(std::iter::repeat_n(ANY, r)),
        }
        let descs = self.handshake(seq, kind, desc)?;
        validate_rooted(seq, "gather", &descs, r, |root_desc, j, d| (root_desc[2 + j], d[1]))?;

        let mut stats = OpStats::default();
        if is_root {
            let mut out = vec![Vec::new(); r];
            out[root] = send;
            for src in (0..r).filter(|&s| s != root) {
                out[src] = self.recv_data(seq, kind, src, &mut stats)?;
            }
            Ok((Some(out), stats))
        } else {
            self.send_data(seq, kind, root, send, &mut stats)?;
            Ok((None, stats))
        }
    }
}

fn validate_alltoall(seq: u32, descs: &[Vec<u64>], r: usize) -> Result<()> {
    if descs.iter().any(|d| d.len() != 2 * r + 1) {
        return Err(Error::CollectiveMismatch(format!(
            "alltoall #{seq}: ranks disagree on world size"
        )));
    }
    let equal_mode = descs.iter().all(|d| d[0] == 0);
    if equal_mode {
        let first = descs[0][1];
        for (i, d) in descs.iter().enumerate() {
            if let Some(j) = (0..r).find(|&j| d[1 + j] != first) {
                return Err(Error::CollectiveMismatch(format!(
                    "alltoall #{seq}: rank {i} sends {} elements to rank {j}, rank 0 sends {first} per segment",
                    d[1 + j]
                )));
            }
        }
        return Ok(());
    }
    for (j, dj) in descs.iter().enumerate() {
        for (i, di) in descs.iter().enumerate() {
            let sent = di[1 + j];
            let expected = dj[1 + r + i];
            if expected != ANY && sent != expected {
                return Err(Error::CollectiveMismatch(format!(
                    "alltoall #{seq}: rank {i} sends {sent} elements to rank {j}, which expects {expected}"
                )));
            }
        }
    }
    Ok(())
}

fn validate_rooted(
    seq: u32,
    name: &str,
    descs: &[Vec<u64>],
    r: usize,
    pair: impl Fn(&[u64], usize, &[u64]) -> (u64, u64),
) -> Result<()> {
    if descs.iter().any(|d| d.len() != r + 2) {
        return Err(Error::CollectiveMismatch(format!(
            "{name} #{seq}: ranks disagree on world size"
        )));
    }
    let root = descs[0][0];
    if let Some((i, d)) = descs.iter().enumerate().find(|(_, d)| d[0] != root) {
        return Err(Error::CollectiveMismatch(format!(
            "{name} #{seq}: rank {i} names root {}, rank 0 names {root}",
            d[0]
        )));
    }
    if root as usize >= r {
        return Err(Error::CollectiveMismatch(format!(
            "{name} #{seq}: root {root} outside world of {r}"
        )));
    }
    let root_desc = &descs[root as usize];
    for (j, d) in descs.iter().enumerate() {
        let (at_root, at_rank) = pair(root_desc, j, d);
        if at_root != ANY && at_rank != ANY && at_root != at_rank {
            return Err(Error::CollectiveMismatch(format!(
                "{name} #{seq}: root {root} has {at_root} elements for rank {j}, which has {at_rank}"
            )));
        }
    }
    Ok(())
}
