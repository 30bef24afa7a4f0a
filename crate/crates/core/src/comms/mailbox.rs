use std::collections::{HashMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::wire::{Frame, OpKind};
use crate::error::{Error, Result};

type Key = (u8, u32, bool);

#[derive(Default)]
struct Inbox {
    queues: HashMap<Key, VecDeque<Frame>>,
    closed: Vec<u8>,
}

/// Incoming frames of one rank, keyed by (source, sequence, control).
#[derive(Default)]
pub(crate) struct Mailbox {
    inner: Mutex<Inbox>,
    ready: Condvar,
}

impl Mailbox {
    pub fn push(&self, frame: Frame) {
        let key = (frame.header.src, frame.header.seq, frame.is_control());
        let mut inbox = self.inner.lock().unwrap();
        inbox.queues.entry(key).or_default().push_back(frame);
        drop(inbox);
        self.ready.notify_all();
    }

    /// Marks a peer as gone; pending and future receives from it fail.
    pub fn close(&self, src: u8) {
        self.inner.lock().unwrap().closed.push(src);
        self.ready.notify_all();
    }

    pub fn pop(&self, src: usize, seq: u32, control: bool, kind: OpKind, timeout: Duration) -> Result<Frame> {
        let key = (src as u8, seq, control);
        let deadline = Instant::now() + timeout;
        let mut inbox = self.inner.lock().unwrap();
        loop {
            if let Some(q) = inbox.queues.get_mut(&key) {
                if let Some(frame) = q.pop_front() {
                    if q.is_empty() {
                        inbox.queues.remove(&key);
                    }
                    if frame.header.kind != kind as u8 {
                        let theirs = OpKind::from_code(frame.header.kind).map_or("unknown", OpKind::name);
                        return Err(Error::CollectiveMismatch(format!(
                            "rank {src} issued {theirs} as collective #{seq} while this rank issued {}",
                            kind.name()
                        )));
                    }
                    return Ok(frame);
                }
            }
            if inbox.closed.contains(&(src as u8)) {
                return Err(Error::Comm(format!(
                    "connection to rank {src} closed during collective #{seq}"
                )));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Comm(format!(
                    "timed out after {:.1}s waiting for rank {src} in {} #{seq}",
                    timeout.as_secs_f64(),
                    kind.name()
                )));
            }
            inbox = self.ready.wait_timeout(inbox, deadline - now).unwrap().0;
        }
    }
}
