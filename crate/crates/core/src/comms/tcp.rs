//! Stream-socket transport. Rank 0 listens on the rendezvous address, the
//! other ranks announce their own listeners to it and receive the full address
//! table back; rank j then connects to every rank i with 0 < i < j.

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::collectives::Transport;
use super::mailbox::Mailbox;
use super::wire::{read_frame, write_frame, Body, Frame, OpKind};
use crate::error::{Error, Result};

pub(crate) struct TcpTransport {
    rank: usize,
    mailbox: Arc<Mailbox>,
    writers: Vec<Option<Mutex<BufWriter<TcpStream>>>>,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

fn bytes_frame(src: usize, dst: usize, text: String) -> Frame {
    Frame::new(0, OpKind::Bootstrap, src, dst, Body::Bytes(text.into_bytes()))
}

fn read_text(stream: &mut TcpStream) -> Result<String> {
    let frame = read_frame(stream)?;
    match (OpKind::from_code(frame.header.kind), frame.body) {
        (Some(OpKind::Bootstrap), Body::Bytes(b)) => {
            String::from_utf8(b).map_err(|e| Error::Comm(format!("bootstrap message is not text: {e}")))
        }
        _ => Err(Error::Comm("unexpected frame during bootstrap".into())),
    }
}

fn connect_retry(addr: &str, deadline: Instant) -> Result<TcpStream> {
    loop {
        let target = addr
            .to_socket_addrs()
            .map_err(|e| Error::Comm(format!("cannot resolve {addr}: {e}")))?
            .next()
            .ok_or_else(|| Error::Comm(format!("no address for {addr}")))?;
        match TcpStream::connect_timeout(&target, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect to {addr} failed ({e}), retrying");
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(Error::Comm(format!("cannot reach {addr}: {e}"))),
        }
    }
}

fn parse_hello(text: &str, world: usize) -> Result<(usize, String)> {
    let mut parts = text.split_whitespace();
    let bad = || Error::Comm(format!("malformed hello '{text}'"));
    let rank: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let their_world: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let addr = parts.next().unwrap_or("").to_string();
    if their_world != world {
        return Err(Error::CollectiveMismatch(format!(
            "rank {rank} was launched with world size {their_world}, expected {world}"
        )));
    }
    if rank == 0 || rank >= world {
        return Err(Error::Comm(format!("hello from invalid rank {rank}")));
    }
    Ok((rank, addr))
}

impl TcpTransport {
    pub fn connect(rank: usize, world: usize, rendezvous: &str, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        let mut peers: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        if rank == 0 {
            let listener = TcpListener::bind(rendezvous)
                .map_err(|e| Error::Comm(format!("cannot listen on {rendezvous}: {e}")))?;
            let mut table = vec![String::new(); world];
            table[0] = listener.local_addr()?.to_string();
            for _ in 1..world {
                let (mut s, _) = listener.accept()?;
                let (r, addr) = parse_hello(&read_text(&mut s)?, world)?;
                if peers[r].is_some() {
                    return Err(Error::Comm(format!("rank {r} joined twice")));
                }
                table[r] = addr;
                peers[r] = Some(s);
            }
            let joined = table.join(" ");
            for (r, s) in peers.iter_mut().enumerate().skip(1) {
                write_frame(s.as_mut().unwrap(), &bytes_frame(0, r, joined.clone()))?;
            }
        } else {
            let host = rendezvous.rsplit_once(':').map_or("127.0.0.1", |(h, _)| h);
            let listener =
                TcpListener::bind((host, 0)).map_err(|e| Error::Comm(format!("cannot bind on {host}: {e}")))?;
            let mine = listener.local_addr()?.to_string();
            let mut s0 = connect_retry(rendezvous, deadline)?;
            write_frame(&mut s0, &bytes_frame(rank, 0, format!("{rank} {world} {mine}")))?;
            let table: Vec<String> = read_text(&mut s0)?.split_whitespace().map(str::to_string).collect();
            if table.len() != world {
                return Err(Error::Comm(format!(
                    "address table has {} entries, expected {world}",
                    table.len()
                )));
            }
            peers[0] = Some(s0);
            for (i, addr) in table.iter().enumerate().take(rank).skip(1) {
                let mut s = connect_retry(addr, deadline)?;
                write_frame(&mut s, &bytes_frame(rank, i, format!("{rank} {world}")))?;
                peers[i] = Some(s);
            }
            for _ in rank + 1..world {
                let (mut s, _) = listener.accept()?;
                let (r, _) = parse_hello(&read_text(&mut s)?, world)?;
                if r <= rank || peers[r].is_some() {
                    return Err(Error::Comm(format!("unexpected connection from rank {r}")));
                }
                peers[r] = Some(s);
            }
        }

        let mailbox = Arc::new(Mailbox::default());
        let mut writers = Vec::with_capacity(world);
        let mut readers = Vec::new();
        for (peer, s) in peers.into_iter().enumerate() {
            let Some(s) = s else {
                writers.push(None);
                continue;
            };
            s.set_nodelay(true)?;
            let rs = s.try_clone()?;
            let mb = mailbox.clone();
            readers.push(
                std::thread::Builder::new()
                    .name(format!("tcp-rx-{rank}-{peer}"))
                    .spawn(move || {
                        let mut r = BufReader::with_capacity(1 << 16, rs);
                        while let Ok(frame) = read_frame(&mut r) {
                            mb.push(frame);
                        }
                        mb.close(peer as u8);
                    })?,
            );
            writers.push(Some(Mutex::new(BufWriter::with_capacity(1 << 16, s))));
        }
        Ok(TcpTransport {
            rank,
            mailbox,
            writers,
            readers: Mutex::new(readers),
        })
    }
}

impl Transport for TcpTransport {
    fn send(&self, frame: Frame) -> Result<()> {
        let dst = frame.header.dst as usize;
        if dst == self.rank {
            self.mailbox.push(frame);
            return Ok(());
        }
        let w = self
            .writers
            .get(dst)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Comm(format!("no connection to rank {dst}")))?;
        let mut w = w.lock().unwrap();
        write_frame(&mut *w, &frame).map_err(|e| Error::Comm(format!("send to rank {dst} failed: {e}")))
    }

    fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for w in self.writers.iter().flatten() {
            if let Ok(w) = w.lock() {
                let _ = w.get_ref().shutdown(Shutdown::Both);
            }
        }
        for h in self.readers.get_mut().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}
