//! The mover's framed wire protocol, version 1.
//!
//! Every message on a connection is one frame: a 1-byte type tag, a 4-byte
//! little-endian payload length, then the payload. Lengths are explicit (no
//! delimiters) and capped at 16 MiB. Typed payload layouts are defined
//! below; all integers are little-endian.
//!
//! ```text
//! +-----+-------------+----------------+
//! | tag | len u32 LE  | payload (len)  |
//! +-----+-------------+----------------+
//! ```

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Digest;

pub const PROTOCOL_VERSION: u32 = 1;

/// Frame header size: tag byte plus length word.
pub const FRAME_HEADER_LEN: usize = 5;

/// Hard cap on a frame payload.
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

/// CHUNK payload prefix: file_index u64 + offset u64.
pub const CHUNK_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte frame cap")]
    Oversize(usize),
    #[error("unknown frame tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("malformed {frame:?} payload: {msg}")]
    Malformed { frame: FrameType, msg: String },
    #[error("connection closed mid-frame")]
    TruncatedStream,
    #[error("peer closed the connection")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Hello = 0x01,
    Manifest = 0x02,
    FileOpen = 0x03,
    Chunk = 0x04,
    FileClose = 0x05,
    GrowthMark = 0x06,
    EndOfSource = 0x07,
    Ack = 0x08,
    Nack = 0x09,
    Bye = 0x0a,
}

impl FrameType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0x01 => FrameType::Hello,
            0x02 => FrameType::Manifest,
            0x03 => FrameType::FileOpen,
            0x04 => FrameType::Chunk,
            0x05 => FrameType::FileClose,
            0x06 => FrameType::GrowthMark,
            0x07 => FrameType::EndOfSource,
            0x08 => FrameType::Ack,
            0x09 => FrameType::Nack,
            0x0a => FrameType::Bye,
            _ => return None,
        })
    }
}

/// One wire frame. Payload interpretation depends on the type tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Frame { frame_type, payload }
    }

    pub fn empty(frame_type: FrameType) -> Self {
        Frame {
            frame_type,
            payload: Vec::new(),
        }
    }
}

/// Serialize a frame: tag, LE length, payload. Total is `5 + len` bytes.
pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, ProtocolError> {
    if f.payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(f.payload.len()));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + f.payload.len());
    out.push(f.frame_type as u8);
    out.extend_from_slice(&(f.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&f.payload);
    Ok(out)
}

/// Outcome of decoding from a byte buffer that may hold a partial frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    /// A complete frame and the number of bytes it consumed.
    Frame { frame: Frame, consumed: usize },
    /// Not enough bytes yet; retry once more input arrives.
    Incomplete,
}

/// Exact inverse of [`encode_frame`] on valid input. Truncated input is
/// reported as [`Decoded::Incomplete`], never an error; unknown tags and
/// oversize lengths are protocol errors.
pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, ProtocolError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Ok(Decoded::Incomplete);
    }
    let frame_type = FrameType::from_tag(bytes[0]).ok_or(ProtocolError::UnknownTag(bytes[0]))?;
    let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(len));
    }
    if bytes.len() < FRAME_HEADER_LEN + len {
        return Ok(Decoded::Incomplete);
    }
    Ok(Decoded::Frame {
        frame: Frame {
            frame_type,
            payload: bytes[FRAME_HEADER_LEN..FRAME_HEADER_LEN + len].to_vec(),
        },
        consumed: FRAME_HEADER_LEN + len,
    })
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Blocking frame read from a stream. A clean EOF before any header byte is
/// [`ProtocolError::Closed`]; EOF mid-frame is a truncation error.
///
/// Read timeouts surface only on the frame boundary (before the first
/// header byte); once a frame has started arriving the reader persists
/// through timeouts, so idle ticks can never desynchronize the stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, ProtocolError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(ProtocolError::Closed),
            Ok(0) => return Err(ProtocolError::TruncatedStream),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) if is_timeout(&e) && got > 0 => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let frame_type = FrameType::from_tag(header[0]).ok_or(ProtocolError::UnknownTag(header[0]))?;
    let len = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(len));
    }
    let mut payload = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        match r.read(&mut payload[filled..]) {
            Ok(0) => return Err(ProtocolError::TruncatedStream),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted || is_timeout(&e) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Frame { frame_type, payload })
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> Result<(), ProtocolError> {
    let bytes = encode_frame(f)?;
    w.write_all(&bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Bulk,
    Streaming,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransferMode::Bulk => f.write_str("bulk"),
            TransferMode::Streaming => f.write_str("streaming"),
        }
    }
}

impl std::str::FromStr for TransferMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bulk" => Ok(TransferMode::Bulk),
            "streaming" => Ok(TransferMode::Streaming),
            other => Err(format!("unknown transfer mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encryption {
    None,
    Tls,
}

impl fmt::Display for Encryption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Encryption::None => f.write_str("none"),
            Encryption::Tls => f.write_str("tls"),
        }
    }
}

impl std::str::FromStr for Encryption {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Encryption::None),
            "tls" => Ok(Encryption::Tls),
            other => Err(format!("unknown encryption {other:?}")),
        }
    }
}

/// Connection role declared in the HELLO: one control connection per
/// session plus its data connections, keyed by the manifest digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ConnectionRole {
    Control = 0,
    Data = 1,
}

/// Session handshake. Version negotiation is monotone: both peers proceed
/// at the lower of the two announced versions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionHello {
    pub protocol_version: u32,
    pub role: ConnectionRole,
    pub mode: TransferMode,
    pub stream_count: u32,
    pub encryption: Encryption,
    pub manifest_digest: Digest,
}

impl SessionHello {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(43);
        out.extend_from_slice(&self.protocol_version.to_le_bytes());
        out.push(self.role as u8);
        out.push(match self.mode {
            TransferMode::Bulk => 0,
            TransferMode::Streaming => 1,
        });
        out.extend_from_slice(&self.stream_count.to_le_bytes());
        out.push(match self.encryption {
            Encryption::None => 0,
            Encryption::Tls => 1,
        });
        out.extend_from_slice(&self.manifest_digest.0);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        let malformed = |msg: &str| ProtocolError::Malformed {
            frame: FrameType::Hello,
            msg: msg.to_string(),
        };
        if payload.len() != 43 {
            return Err(malformed(&format!("expected 43 bytes, got {}", payload.len())));
        }
        let protocol_version = u32::from_le_bytes(payload[0..4].try_into().unwrap());
        let role = match payload[4] {
            0 => ConnectionRole::Control,
            1 => ConnectionRole::Data,
            v => return Err(malformed(&format!("bad role {v}"))),
        };
        let mode = match payload[5] {
            0 => TransferMode::Bulk,
            1 => TransferMode::Streaming,
            v => return Err(malformed(&format!("bad mode {v}"))),
        };
        let stream_count = u32::from_le_bytes(payload[6..10].try_into().unwrap());
        if stream_count == 0 {
            return Err(malformed("stream_count must be >= 1"));
        }
        let encryption = match payload[10] {
            0 => Encryption::None,
            1 => Encryption::Tls,
            v => return Err(malformed(&format!("bad encryption {v}"))),
        };
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&payload[11..43]);
        Ok(SessionHello {
            protocol_version,
            role,
            mode,
            stream_count,
            encryption,
            manifest_digest: Digest(digest),
        })
    }
}

/// Lower of the two announced versions.
pub fn negotiate_version(local: u32, remote: u32) -> u32 {
    local.min(remote)
}

/// One slice of the manifest's canonical serialization. The manifest can
/// exceed the frame cap, so it travels as byte ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestChunk {
    pub total_len: u64,
    pub offset: u64,
    pub data: Vec<u8>,
}

impl ManifestChunk {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len());
        out.extend_from_slice(&self.total_len.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        if payload.len() < 16 {
            return Err(ProtocolError::Malformed {
                frame: FrameType::Manifest,
                msg: format!("expected >= 16 bytes, got {}", payload.len()),
            });
        }
        Ok(ManifestChunk {
            total_len: u64::from_le_bytes(payload[0..8].try_into().unwrap()),
            offset: u64::from_le_bytes(payload[8..16].try_into().unwrap()),
            data: payload[16..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileOpen {
    pub file_index: u64,
    /// Size at open time; in streaming mode the file may grow past this.
    pub announced_size: u64,
    pub relative_path: String,
}

impl FileOpen {
    pub fn encode(&self) -> Vec<u8> {
        let path = self.relative_path.as_bytes();
        let mut out = Vec::with_capacity(18 + path.len());
        out.extend_from_slice(&self.file_index.to_le_bytes());
        out.extend_from_slice(&self.announced_size.to_le_bytes());
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        let malformed = |msg: String| ProtocolError::Malformed {
            frame: FrameType::FileOpen,
            msg,
        };
        if payload.len() < 18 {
            return Err(malformed(format!("expected >= 18 bytes, got {}", payload.len())));
        }
        let file_index = u64::from_le_bytes(payload[0..8].try_into().unwrap());
        let announced_size = u64::from_le_bytes(payload[8..16].try_into().unwrap());
        let path_len = u16::from_le_bytes(payload[16..18].try_into().unwrap()) as usize;
        if payload.len() != 18 + path_len {
            return Err(malformed(format!(
                "path length {} disagrees with payload size {}",
                path_len,
                payload.len()
            )));
        }
        let relative_path = std::str::from_utf8(&payload[18..])
            .map_err(|_| malformed("path is not UTF-8".into()))?
            .to_string();
        Ok(FileOpen {
            file_index,
            announced_size,
            relative_path,
        })
    }
}

/// Positioned data chunk header; the data bytes follow it in the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub file_index: u64,
    pub offset: u64,
    pub chunk_len: u32,
}

/// Build a CHUNK frame payload. Chunks are never empty.
pub fn encode_chunk(file_index: u64, offset: u64, data: &[u8]) -> Result<Frame, ProtocolError> {
    if data.is_empty() {
        return Err(ProtocolError::Malformed {
            frame: FrameType::Chunk,
            msg: "chunk_len must be >= 1".into(),
        });
    }
    if CHUNK_HEADER_LEN + data.len() > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(CHUNK_HEADER_LEN + data.len()));
    }
    let mut payload = Vec::with_capacity(CHUNK_HEADER_LEN + data.len());
    payload.extend_from_slice(&file_index.to_le_bytes());
    payload.extend_from_slice(&offset.to_le_bytes());
    payload.extend_from_slice(data);
    Ok(Frame::new(FrameType::Chunk, payload))
}

/// Split a CHUNK payload into its header and data slice.
pub fn decode_chunk(payload: &[u8]) -> Result<(ChunkHeader, &[u8]), ProtocolError> {
    if payload.len() <= CHUNK_HEADER_LEN {
        return Err(ProtocolError::Malformed {
            frame: FrameType::Chunk,
            msg: format!("expected > {CHUNK_HEADER_LEN} bytes, got {}", payload.len()),
        });
    }
    let header = ChunkHeader {
        file_index: u64::from_le_bytes(payload[0..8].try_into().unwrap()),
        offset: u64::from_le_bytes(payload[8..16].try_into().unwrap()),
        chunk_len: (payload.len() - CHUNK_HEADER_LEN) as u32,
    };
    Ok((header, &payload[CHUNK_HEADER_LEN..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CloseStatus {
    Ok = 0,
    /// Source abandoned the file (e.g. it shrank mid-stream); the receiver
    /// must discard and NACK.
    Aborted = 1,
}

/// End of one file: the receiver checks size and digest and replies ACK or
/// NACK. Integrity rides at file granularity, not per chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileClose {
    pub file_index: u64,
    pub final_size: u64,
    pub status: CloseStatus,
    pub digest: Digest,
}

impl FileClose {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(49);
        out.extend_from_slice(&self.file_index.to_le_bytes());
        out.extend_from_slice(&self.final_size.to_le_bytes());
        out.push(self.status as u8);
        out.extend_from_slice(&self.digest.0);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        let malformed = |msg: String| ProtocolError::Malformed {
            frame: FrameType::FileClose,
            msg,
        };
        if payload.len() != 49 {
            return Err(malformed(format!("expected 49 bytes, got {}", payload.len())));
        }
        let status = match payload[16] {
            0 => CloseStatus::Ok,
            1 => CloseStatus::Aborted,
            v => return Err(malformed(format!("bad close status {v}"))),
        };
        let mut digest = [0u8; 32];
        digest.copy_from_slice(&payload[17..49]);
        Ok(FileClose {
            file_index: u64::from_le_bytes(payload[0..8].try_into().unwrap()),
            final_size: u64::from_le_bytes(payload[8..16].try_into().unwrap()),
            status,
            digest: Digest(digest),
        })
    }
}

/// Streaming-mode growth announcement: all bytes up to `committed_size`
/// have been sent. The receiver never polls its filesystem for growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrowthMark {
    pub file_index: u64,
    pub committed_size: u64,
}

impl GrowthMark {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16);
        out.extend_from_slice(&self.file_index.to_le_bytes());
        out.extend_from_slice(&self.committed_size.to_le_bytes());
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        if payload.len() != 16 {
            return Err(ProtocolError::Malformed {
                frame: FrameType::GrowthMark,
                msg: format!("expected 16 bytes, got {}", payload.len()),
            });
        }
        Ok(GrowthMark {
            file_index: u64::from_le_bytes(payload[0..8].try_into().unwrap()),
            committed_size: u64::from_le_bytes(payload[8..16].try_into().unwrap()),
        })
    }
}

/// ACK: empty payload acknowledges the preceding control action (or serves
/// as an RTT echo); an 8-byte payload acknowledges one file by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub file_index: Option<u64>,
}

impl Ack {
    pub fn encode(&self) -> Vec<u8> {
        match self.file_index {
            None => Vec::new(),
            Some(i) => i.to_le_bytes().to_vec(),
        }
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        match payload.len() {
            0 => Ok(Ack { file_index: None }),
            8 => Ok(Ack {
                file_index: Some(u64::from_le_bytes(payload.try_into().unwrap())),
            }),
            n => Err(ProtocolError::Malformed {
                frame: FrameType::Ack,
                msg: format!("expected 0 or 8 bytes, got {n}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum NackReason {
    DigestMismatch = 1,
    SizeMismatch = 2,
    WriteFailure = 3,
    Aborted = 4,
    SessionRejected = 5,
    ProtocolViolation = 6,
}

impl NackReason {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => NackReason::DigestMismatch,
            2 => NackReason::SizeMismatch,
            3 => NackReason::WriteFailure,
            4 => NackReason::Aborted,
            5 => NackReason::SessionRejected,
            6 => NackReason::ProtocolViolation,
            _ => return None,
        })
    }
}

/// Negative acknowledgment; `file_index` is absent for session-level
/// rejections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Nack {
    pub file_index: Option<u64>,
    pub reason: NackReason,
    pub message: String,
}

impl Nack {
    pub fn encode(&self) -> Vec<u8> {
        let msg = self.message.as_bytes();
        let mut out = Vec::with_capacity(12 + msg.len());
        out.extend_from_slice(&self.file_index.unwrap_or(u64::MAX).to_le_bytes());
        out.push(self.reason as u8);
        out.push(self.file_index.is_some() as u8);
        out.extend_from_slice(&(msg.len() as u16).to_le_bytes());
        out.extend_from_slice(msg);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        let malformed = |msg: String| ProtocolError::Malformed {
            frame: FrameType::Nack,
            msg,
        };
        if payload.len() < 12 {
            return Err(malformed(format!("expected >= 12 bytes, got {}", payload.len())));
        }
        let raw_index = u64::from_le_bytes(payload[0..8].try_into().unwrap());
        let reason =
            NackReason::from_code(payload[8]).ok_or_else(|| malformed(format!("bad reason {}", payload[8])))?;
        let has_index = match payload[9] {
            0 => false,
            1 => true,
            v => return Err(malformed(format!("bad index flag {v}"))),
        };
        let msg_len = u16::from_le_bytes(payload[10..12].try_into().unwrap()) as usize;
        if payload.len() != 12 + msg_len {
            return Err(malformed(format!(
                "message length {} disagrees with payload size {}",
                msg_len,
                payload.len()
            )));
        }
        let message = std::str::from_utf8(&payload[12..])
            .map_err(|_| malformed("message is not UTF-8".into()))?
            .to_string();
        Ok(Nack {
            file_index: has_index.then_some(raw_index),
            reason,
            message,
        })
    }
}
