//! Frame format shared by all transports.
//!
//! A frame is a 16-byte little-endian header followed by the payload:
//! `u32 seq, u8 kind, u8 src, u8 dst, u8 flags, u64 payload_len`.

use std::io::{self, Read, Write};

pub const HEADER_LEN: usize = 16;

/// Payload holds `u64` metadata words instead of FP32 data.
pub const FLAG_CONTROL: u8 = 1;
/// Payload is opaque bytes (bootstrap only).
pub const FLAG_BYTES: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum OpKind {
    Allreduce = 1,
    Alltoall = 2,
    Scatter = 3,
    Gather = 4,
    Barrier = 5,
    Bootstrap = 6,
}

impl OpKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => OpKind::Allreduce,
            2 => OpKind::Alltoall,
            3 => OpKind::Scatter,
            4 => OpKind::Gather,
            5 => OpKind::Barrier,
            6 => OpKind::Bootstrap,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Allreduce => "allreduce",
            OpKind::Alltoall => "alltoall",
            OpKind::Scatter => "scatter",
            OpKind::Gather => "gather",
            OpKind::Barrier => "barrier",
            OpKind::Bootstrap => "bootstrap",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub seq: u32,
    pub kind: u8,
    pub src: u8,
    pub dst: u8,
    pub flags: u8,
    pub payload_len: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&self.seq.to_le_bytes());
        b[4] = self.kind;
        b[5] = self.src;
        b[6] = self.dst;
        b[7] = self.flags;
        b[8..16].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; HEADER_LEN]) -> Self {
        Header {
            seq: u32::from_le_bytes(b[0..4].try_into().unwrap()),
            kind: b[4],
            src: b[5],
            dst: b[6],
            flags: b[7],
            payload_len: u64::from_le_bytes(b[8..16].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Data(Vec<f32>),
    Control(Vec<u64>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub header: Header,
    pub body: Body,
}

impl Frame {
    pub fn new(seq: u32, kind: OpKind, src: usize, dst: usize, body: Body) -> Self {
        let (flags, payload_len) = match &body {
            Body::Data(v) => (0, v.len() * 4),
            Body::Control(v) => (FLAG_CONTROL, v.len() * 8),
            Body::Bytes(v) => (FLAG_BYTES, v.len()),
        };
        Frame {
            header: Header {
                seq,
                kind: kind as u8,
                src: src as u8,
                dst: dst as u8,
                flags,
                payload_len: payload_len as u64,
            },
            body,
        }
    }

    pub fn is_control(&self) -> bool {
        !matches!(self.body, Body::Data(_))
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.header.encode())?;
    let mut payload = Vec::with_capacity(frame.header.payload_len as usize);
    match &frame.body {
        Body::Data(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        Body::Control(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
        Body::Bytes(v) => payload.extend_from_slice(v),
    }
    w.write_all(&payload)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Frame> {
    let mut hb = [0u8; HEADER_LEN];
    r.read_exact(&mut hb)?;
    let header = Header::decode(&hb);
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload)?;
    let body = if header.flags & FLAG_BYTES != 0 {
        Body::Bytes(payload)
    } else if header.flags & FLAG_CONTROL != 0 {
        if !payload.len().is_multiple_of(8) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "control payload not a multiple of 8 bytes",
            ));
        }
        Body::Control(
            payload
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        if !payload.len().is_multiple_of(4) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "data payload not a multiple of 4 bytes",
            ));
        }
        Body::Data(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    Ok(Frame { header, body })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let h = Header {
            seq: 0x0102_0304,
            kind: 2,
            src: 3,
            dst: 4,
            flags: 1,
            payload_len: 40,
        };
        let b = h.encode();
        assert_eq!(&b[0..4], &[4, 3, 2, 1]);
        assert_eq!(&b[4..8], &[2, 3, 4, 1]);
        assert_eq!(b[8], 40);
        assert_eq!(Header::decode(&b), h);
    }

    #[test]
    fn frames_round_trip() {
        for body in [
            Body::Data(vec![1.5, -0.0, f32::MIN_POSITIVE]),
            Body::Control(vec![7, u64::MAX]),
            Body::Bytes(b"127.0.0.1:9".to_vec()),
            Body::Data(vec![]),
        ] {
            let f = Frame::new(9, OpKind::Gather, 1, 0, body);
            let mut buf = Vec::new();
            write_frame(&mut buf, &f).unwrap();
            assert_eq!(buf.len(), HEADER_LEN + f.header.payload_len as usize);
            assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), f);
        }
    }
}
