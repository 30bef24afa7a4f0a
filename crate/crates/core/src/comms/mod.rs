//! Rank-based collectives: ring allreduce, alltoall, scatter, gather.
//!
//! Each rank owns a [`RankContext`]. Collectives must be issued in the same
//! order on every rank. Nonblocking collectives run on the context's
//! dedicated comm worker threads, which are separate from the compute pool.

mod collectives;
mod mailbox;
mod tcp;
mod wire;

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Serialize};

pub use collectives::OpStats;
pub use wire::{read_frame, write_frame, Body, Frame, Header, OpKind, FLAG_BYTES, FLAG_CONTROL, HEADER_LEN};

use crate::error::{Error, Result};
use collectives::{Link, Transport};
use mailbox::Mailbox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[serde(rename = "inproc")]
    InProcess,
    Tcp,
}

impl std::str::FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inproc" => Ok(Self::InProcess),
            "tcp" => Ok(Self::Tcp),
            other => Err(Error::config(format!("unknown transport '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CommConfig {
    pub comm_workers: usize,
    pub timeout: Duration,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            comm_workers: 1,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub pre_ms: f64,
    pub wait_ms: f64,
    pub post_ms: f64,
}

/// One collective call as seen by this rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub kind: OpKind,
    pub label: String,
    pub seq: u32,
    pub blocking: bool,
    /// Data frames sent by this rank.
    pub messages: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Size of the caller's buffer, including the part that stays local.
    pub payload_bytes: u64,
    /// Time the worker (or the caller, if blocking) spent executing.
    pub exec_ms: f64,
    pub timings: Timings,
}

#[derive(Clone, Debug, Default)]
pub struct CommsTrace {
    pub records: Vec<TraceRecord>,
}

impl CommsTrace {
    pub fn of_kind(&self, kind: OpKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn calls(&self, kind: OpKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn bytes_sent(&self, kind: OpKind) -> u64 {
        self.of_kind(kind).map(|r| r.bytes_sent).sum()
    }

    pub fn bytes_received(&self, kind: OpKind) -> u64 {
        self.of_kind(kind).map(|r| r.bytes_received).sum()
    }
}

type Job = Box<dyn FnOnce() + Send>;
type Outcome<T> = Result<(T, OpStats, f64)>;

enum HandleState<T> {
    Pending(Receiver<Outcome<T>>),
    Done(T),
    Failed(String),
    Taken,
}

/// A (possibly still running) collective. Results are available after
/// [`RankContext::wait`].
pub struct CollectiveHandle<T> {
    op_id: u64,
    owner: u64,
    record: usize,
    timings: Timings,
    state: HandleState<T>,
}

impl<T> CollectiveHandle<T> {
    pub fn op_id(&self) -> u64 {
        self.op_id
    }

    pub fn is_complete(&self) -> bool {
        match &self.state {
            HandleState::Pending(rx) => !rx.is_empty(),
            _ => true,
        }
    }

    pub fn timings(&self) -> Timings {
        self.timings
    }

    /// Adds caller-side preparation time (packing, flattening).
    pub fn add_pre_ms(&mut self, ms: f64) {
        self.timings.pre_ms += ms;
    }

    /// Takes the result. Fails if the collective failed, the handle was not
    /// waited on, or the result was already taken.
    pub fn into_result(mut self) -> Result<T> {
        match std::mem::replace(&mut self.state, HandleState::Taken) {
            HandleState::Done(v) => Ok(v),
            HandleState::Failed(msg) => Err(Error::Comm(msg)),
            HandleState::Pending(_) => Err(Error::Comm(format!("collective {} not waited on", self.op_id))),
            HandleState::Taken => Err(Error::Comm(format!(
                "result of collective {} already taken",
                self.op_id
            ))),
        }
    }
}

static NEXT_CONTEXT: AtomicU64 = AtomicU64::new(1);

pub struct RankContext {
    id: u64,
    kind: TransportKind,
    link: Link,
    seq: AtomicU32,
    next_op: AtomicU64,
    jobs: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
    comm_workers: usize,
    trace: Arc<Mutex<Vec<TraceRecord>>>,
}

struct InProcEndpoint {
    rank: usize,
    boxes: Arc<Vec<Mailbox>>,
}

impl Transport for InProcEndpoint {
    fn send(&self, frame: Frame) -> Result<()> {
        let dst = frame.header.dst as usize;
        self.boxes
            .get(dst)
            .ok_or_else(|| Error::Comm(format!("no rank {dst}")))?
            .push(frame);
        Ok(())
    }

    fn mailbox(&self) -> &Mailbox {
        &self.boxes[self.rank]
    }
}

fn check_world(world: usize) -> Result<()> {
    if world == 0 || world > 256 {
        return Err(Error::config(format!("world size must be in 1..=256, got {world}")));
    }
    Ok(())
}

impl RankContext {
    /// Contexts for `world` ranks connected in memory; hand one to each thread.
    pub fn in_process_world(world: usize, cfg: &CommConfig) -> Result<Vec<RankContext>> {
        check_world(world)?;
        let boxes: Arc<Vec<Mailbox>> = Arc::new((0..world).map(|_| Mailbox::default()).collect());
        (0..world)
            .map(|rank| {
                let t = Arc::new(InProcEndpoint {
                    rank,
                    boxes: boxes.clone(),
                });
                Self::with_transport(TransportKind::InProcess, t, rank, world, cfg)
            })
            .collect()
    }

    /// Joins a TCP world. Blocks until all `world` ranks are connected.
    pub fn tcp(rank: usize, world: usize, rendezvous: &str, cfg: &CommConfig) -> Result<RankContext> {
        check_world(world)?;
        if rank >= world {
            return Err(Error::config(format!("rank {rank} outside world of {world}")));
        }
        let t = Arc::new(tcp::TcpTransport::connect(rank, world, rendezvous, cfg.timeout)?);
        Self::with_transport(TransportKind::Tcp, t, rank, world, cfg)
    }

    fn with_transport(
        kind: TransportKind,
        transport: Arc<dyn Transport>,
        rank: usize,
        world: usize,
        cfg: &CommConfig,
    ) -> Result<Self> {
        if cfg.comm_workers == 0 {
            return Err(Error::config("at least one comm worker is required"));
        }
        let (tx, rx) = crossbeam_channel::unbounded::<Job>();
        let workers = (0..cfg.comm_workers)
            .map(|w| {
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("comm-{rank}-{w}"))
                    .spawn(move || {
                        for job in rx {
                            job();
                        }
                    })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(RankContext {
            id: NEXT_CONTEXT.fetch_add(1, Ordering::Relaxed),
            kind,
            link: Link {
                transport,
                rank,
                world,
                timeout: cfg.timeout,
            },
            seq: AtomicU32::new(1),
            next_op: AtomicU64::new(1),
            jobs: Some(tx),
            workers,
            comm_workers: cfg.comm_workers,
            trace: Arc::default(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn rank(&self) -> usize {
        self.link.rank
    }

    pub fn world_size(&self) -> usize {
        self.link.world
    }

    pub fn transport(&self) -> TransportKind {
        self.kind
    }

    pub fn comm_workers(&self) -> usize {
        self.comm_workers
    }

    pub fn trace(&self) -> CommsTrace {
        CommsTrace {
            records: self.trace.lock().unwrap().clone(),
        }
    }

    pub fn clear_trace(&self) {
        self.trace.lock().unwrap().clear();
    }

    fn issue<T, F>(
        &self,
        kind: OpKind,
        label: &str,
        payload_bytes: u64,
        blocking: bool,
        op: F,
    ) -> Result<CollectiveHandle<T>>
    where
        T: Send + 'static,
        F: FnOnce(&Link, u32) -> Result<(T, OpStats)> + Send + 'static,
    {
        let issued = Instant::now();
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let op_id = self.next_op.fetch_add(1, Ordering::Relaxed);
        let record = {
            let mut trace = self.trace.lock().unwrap();
            trace.push(TraceRecord {
                kind,
                label: label.to_string(),
                seq,
                blocking,
                messages: 0,
                bytes_sent: 0,
                bytes_received: 0,
                payload_bytes,
                exec_ms: 0.0,
                timings: Timings::default(),
            });
            trace.len() - 1
        };
        let trace = self.trace.clone();
        let run = move |link: &Link| -> Outcome<T> {
            let start = Instant::now();
            let (value, stats) = op(link, seq)?;
            let exec_ms = start.elapsed().as_secs_f64() * 1e3;
            if let Some(r) = trace.lock().unwrap().get_mut(record) {
                r.messages = stats.messages;
                r.bytes_sent = stats.bytes_sent;
                r.bytes_received = stats.bytes_received;
                r.exec_ms = exec_ms;
            }
            Ok((value, stats, exec_ms))
        };
        let mut handle = CollectiveHandle {
            op_id,
            owner: self.id,
            record,
            timings: Timings::default(),
            state: HandleState::Taken,
        };
        if blocking {
            let out = run(&self.link);
            handle.timings.wait_ms = issued.elapsed().as_secs_f64() * 1e3;
            handle.state = match out {
                Ok((v, _, _)) => HandleState::Done(v),
                Err(e) => return Err(e),
            };
            self.sync_record(&handle);
        } else {
            let (tx, rx) = crossbeam_channel::bounded(1);
            let link = self.link.clone();
            let job: Job = Box::new(move || {
                let _ = tx.send(run(&link));
            });
            self.jobs
                .as_ref()
                .expect("workers alive while context exists")
                .send(job)
                .map_err(|_| Error::Comm("comm workers have shut down".into()))?;
            handle.state = HandleState::Pending(rx);
            handle.timings.pre_ms = issued.elapsed().as_secs_f64() * 1e3;
        }
        Ok(handle)
    }

    fn sync_record<T>(&self, h: &CollectiveHandle<T>) {
        if let Some(r) = self.trace.lock().unwrap().get_mut(h.record) {
            r.timings = h.timings;
        }
    }

    fn check_owner<T>(&self, h: &CollectiveHandle<T>) -> Result<()> {
        if h.owner != self.id {
            return Err(Error::ForeignHandle {
                op: h.op_id,
                owner: h.owner,
                caller: self.id,
            });
        }
        Ok(())
    }

    /// Blocks until the collective finishes. Idempotent: later calls return
    /// the recorded timings immediately.
    pub fn wait<T>(&self, h: &mut CollectiveHandle<T>) -> Result<Timings> {
        self.check_owner(h)?;
        if let HandleState::Pending(rx) = &h.state {
            let start = Instant::now();
            let outcome = rx.recv().map_err(|_| Error::Comm("comm worker vanished".into()));
            h.timings.wait_ms += start.elapsed().as_secs_f64() * 1e3;
            h.state = match outcome.and_then(|o| o) {
                Ok((v, _, _)) => HandleState::Done(v),
                Err(e) => HandleState::Failed(e.to_string()),
            };
            self.sync_record(h);
        }
        match &h.state {
            HandleState::Failed(msg) => Err(Error::Comm(msg.clone())),
            _ => Ok(h.timings),
        }
    }

    /// Waits, then runs `post` on the result, timing it as post-processing.
    pub fn wait_post<T>(&self, h: &mut CollectiveHandle<T>, post: impl FnOnce(&mut T)) -> Result<Timings> {
        self.wait(h)?;
        if let HandleState::Done(v) = &mut h.state {
            let start = Instant::now();
            post(v);
            h.timings.post_ms += start.elapsed().as_secs_f64() * 1e3;
            self.sync_record(h);
        }
        Ok(h.timings)
    }

    /// Elementwise sum of `buf` across ranks.
    pub fn allreduce(&self, buf: Vec<f32>, blocking: bool, label: &str) -> Result<CollectiveHandle<Vec<f32>>> {
        let bytes = buf.len() as u64 * 4;
        self.issue(OpKind::Allreduce, label, bytes, blocking, move |link, seq| {
            let mut buf = buf;
            let stats = link.allreduce(seq, &mut buf)?;
            Ok((buf, stats))
        })
    }

    /// `recv[j]` on rank i is `send[i]` of rank j. All segments on all ranks
    /// must have the same length.
    pub fn alltoall(
        &self,
        send: Vec<Vec<f32>>,
        blocking: bool,
        label: &str,
    ) -> Result<CollectiveHandle<Vec<Vec<f32>>>> {
        let bytes = send.iter().map(|s| s.len() as u64 * 4).sum();
        self.issue(OpKind::Alltoall, label, bytes, blocking, move |link, seq| {
            link.alltoall(seq, send, None)
        })
    }

    /// Alltoall with per-peer segment sizes; `recv_sizes[j]` is the length
    /// expected from rank j.
    pub fn alltoallv(
        &self,
        send: Vec<Vec<f32>>,
        recv_sizes: Vec<usize>,
        blocking: bool,
        label: &str,
    ) -> Result<CollectiveHandle<Vec<Vec<f32>>>> {
        let bytes = send.iter().map(|s| s.len() as u64 * 4).sum();
        self.issue(OpKind::Alltoall, label, bytes, blocking, move |link, seq| {
            link.alltoall(seq, send, Some(&recv_sizes))
        })
    }

    /// Root distributes `segments[j]` to rank j; every rank states the length
    /// it expects and gets its own segment back.
    pub fn scatter(
        &self,
        root: usize,
        segments: Option<Vec<Vec<f32>>>,
        expect: usize,
        label: &str,
    ) -> Result<Vec<f32>> {
        let bytes = segments
            .as_ref()
            .map_or(0, |s| s.iter().map(|x| x.len() as u64 * 4).sum());
        let mut h = self.issue(OpKind::Scatter, label, bytes, true, move |link, seq| {
            link.scatter(seq, root, segments, expect)
        })?;
        self.wait(&mut h)?;
        h.into_result()
    }

    /// Root collects every rank's buffer, indexed by source rank.
    pub fn gather(
        &self,
        root: usize,
        send: Vec<f32>,
        expect: Option<Vec<usize>>,
        label: &str,
    ) -> Result<Option<Vec<Vec<f32>>>> {
        let bytes = if self.rank() == root {
            expect.as_ref().map_or(0, |e| e.iter().map(|&x| x as u64 * 4).sum())
        } else {
            0
        };
        let mut h = self.issue(OpKind::Gather, label, bytes, true, move |link, seq| {
            link.gather(seq, root, send, expect.as_deref())
        })?;
        self.wait(&mut h)?;
        h.into_result()
    }

    pub fn barrier(&self) -> Result<()> {
        let mut h = self.issue(OpKind::Barrier, "barrier", 0, true, |link, seq| {
            Ok(((), link.barrier(seq)?))
        })?;
        self.wait(&mut h)?;
        Ok(())
    }
}

impl Drop for RankContext {
    fn drop(&mut self) {
        self.jobs.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Runs `f` on one thread per rank of an in-process world and returns the
/// per-rank results in rank order.
pub fn run_in_process<T, F>(world: usize, cfg: &CommConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(RankContext) -> Result<T> + Sync,
{
    let ctxs = RankContext::in_process_world(world, cfg)?;
    std::thread::scope(|s| {
        let handles: Vec<_> = ctxs
            .into_iter()
            .map(|ctx| {
                let f = &f;
                std::thread::Builder::new()
                    .name(format!("rank-{}", ctx.rank()))
                    .spawn_scoped(s, move || f(ctx))
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(world);
        let mut first_err = None;
        for h in handles {
            match h.join() {
                Ok(Ok(v)) => out.push(v),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(Error::Comm("rank thread panicked".into()));
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    })
}
