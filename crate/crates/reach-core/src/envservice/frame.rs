//! Length-prefixed framing: 4-byte big-endian payload length, then the
//! payload bytes. The decoder is total — any byte string yields either a
//! frame or a typed error, never a panic.

use std::io::{Read, Write};

use crate::error::{ReachError, Result};

/// Hard cap on a single frame's payload.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;

/// Frames `payload` into `buf`-shaped bytes: length prefix plus payload.
pub fn encode_frame(payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > MAX_FRAME_BYTES {
        return Err(ReachError::Protocol(format!(
            "frame payload of {} bytes exceeds the {} byte cap",
            payload.len(),
            MAX_FRAME_BYTES
        )));
    }
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits one frame off the front of `bytes`, returning the payload and the
/// number of bytes consumed. Errors name the fault: truncated prefix,
/// truncated payload, or an oversize declaration.
pub fn decode_frame(bytes: &[u8]) -> Result<(&[u8], usize)> {
    if bytes.len() < 4 {
        return Err(ReachError::Protocol(format!(
            "truncated frame: {} bytes, need 4 for the length prefix",
            bytes.len()
        )));
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ReachError::Protocol(format!(
            "declared frame length {len} exceeds the {MAX_FRAME_BYTES} byte cap"
        )));
    }
    if bytes.len() < 4 + len {
        return Err(ReachError::Protocol(format!(
            "truncated frame: payload declares {len} bytes, {} available",
            bytes.len() - 4
        )));
    }
    Ok((&bytes[4..4 + len], 4 + len))
}

/// Writes one frame to a stream and flushes it.
pub fn write_frame(w: &mut dyn Write, payload: &[u8]) -> Result<()> {
    let frame = encode_frame(payload)?;
    w.write_all(&frame)
        .and_then(|()| w.flush())
        .map_err(|e| ReachError::Transport(format!("writing frame: {e}")))?;
    Ok(())
}

/// Reads one complete frame from a stream. I/O failures (including read
/// timeouts and mid-frame disconnects) surface as transport errors; an
/// oversize length prefix is a protocol error.
pub fn read_frame(r: &mut dyn Read) -> Result<Vec<u8>> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix)
        .map_err(|e| ReachError::Transport(format!("reading frame length: {e}")))?;
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ReachError::Protocol(format!(
            "declared frame length {len} exceeds the {MAX_FRAME_BYTES} byte cap"
        )));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|e| ReachError::Transport(format!("reading frame payload: {e}")))?;
    Ok(payload)
}
