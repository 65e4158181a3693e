//! Wire format: a 4-byte big-endian payload length followed by one JSON
//! envelope.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use wbcast_core::message::Message;
use wbcast_core::types::ProcessId;

/// Largest accepted payload.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub from: ProcessId,
    pub to: ProcessId,
    /// Per-channel sequence number of a protocol message, starting at 1.
    /// Zero for acknowledgements and heartbeats.
    pub seq: u64,
    pub body: Body,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Body {
    Protocol(Message),
    /// Every protocol message with a smaller sequence number has arrived.
    Ack {
        upto: u64,
    },
    Heartbeat,
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("incomplete frame, {0} more bytes needed")]
    NeedMore(usize),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME} byte limit")]
    TooLarge(u64),
    #[error("malformed envelope: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

pub fn encode(env: &Envelope) -> Result<Vec<u8>, FrameError> {
    let payload = serde_json::to_vec(env)?;
    if payload.len() > MAX_FRAME {
        return Err(FrameError::TooLarge(payload.len() as u64));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn check_len(header: [u8; 4]) -> Result<usize, FrameError> {
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len as u64));
    }
    Ok(len)
}

/// Decodes the frame at the start of `buf`, returning it and the bytes used.
pub fn decode(buf: &[u8]) -> Result<(Envelope, usize), FrameError> {
    let Some(header) = buf.get(..4) else { return Err(FrameError::NeedMore(4 - buf.len())) };
    let len = check_len(header.try_into().expect("four bytes"))?;
    let Some(payload) = buf.get(4..4 + len) else { return Err(FrameError::NeedMore(4 + len - buf.len())) };
    Ok((serde_json::from_slice(payload)?, 4 + len))
}

pub fn write_frame(w: &mut impl Write, env: &Envelope) -> Result<(), FrameError> {
    w.write_all(&encode(env)?)?;
    Ok(())
}

/// Reads one frame. A clean end of stream before a header is `Closed`.
pub fn read_frame(r: &mut impl Read) -> Result<Envelope, FrameError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::NeedMore(4 - got)),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = check_len(header)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(serde_json::from_slice(&payload)?)
}
