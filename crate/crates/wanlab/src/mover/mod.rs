//! The concurrent TCP data mover.
//!
//! One control connection plus `stream_count` data connections per session.
//! Bulk sessions move a manifest of files at rest; streaming sessions follow
//! a growing source directory and deliver bytes as they are written.
//! Integrity rides at file granularity: the receiver re-digests every file
//! and acknowledges (or rejects) it on FILE_CLOSE. Local burst-buffer
//! staging and discard/synthetic endpoints isolate storage from network
//! bottlenecks.

mod client;
mod conn;
mod server;
mod socket;
mod staging;
mod streaming;
pub mod tls;

pub use client::{rtt_probe, synthetic_manifest, transfer};
pub use server::{serve, ServeConfig, ServerHandle, SessionSummary};
pub use socket::{
    apply_socket_options, available_ccas, bind_listener, connect_with_options, SocketOptions,
    SocketOptionsReport,
};
pub use staging::stage;
pub use streaming::transfer_streaming;

use std::fmt;
use std::io;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetSpec};
use crate::protocol::{Encryption, ProtocolError, TransferMode};

/// Default data chunk: large enough to amortize framing, equal to the
/// smallest streaming file size.
pub const DEFAULT_CHUNK_SIZE: u64 = 4 * 1024 * 1024;

/// Smallest permitted chunk.
pub const MIN_CHUNK_SIZE: u64 = 4 * 1024;

#[derive(Debug, Error)]
pub enum MoverError {
    #[error("invalid transfer spec: {0}")]
    InvalidSpec(String),
    #[error("cannot reach peer {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("session rejected by peer: {0}")]
    SessionRejected(String),
    #[error("peer violated the protocol: {0}")]
    PeerError(String),
    #[error("source file {path} missing or wrong size: {detail}")]
    SourceInvalid { path: PathBuf, detail: String },
    #[error("congestion control {requested:?} not available (host offers: {available})")]
    UnknownCca { requested: String, available: String },
    #[error("TLS failure: {0}")]
    Tls(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where bytes come from: a directory of real files, or a synthetic
/// generator that produces the dataset on the fly without touching disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceEndpoint {
    Directory(PathBuf),
    Synthetic(DatasetSpec),
}

/// Where bytes go on the receiver: a directory root, or a discard sink that
/// digests and drops them (for isolating storage from network bottlenecks).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SinkEndpoint {
    Directory(PathBuf),
    Discard,
}

/// Everything needed to run one transfer.
///
/// `sink` names the intent for the remote side; the receiving server's own
/// configuration is authoritative for where bytes land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub source: SourceEndpoint,
    pub sink: SinkEndpoint,
    pub peer_address: String,
    pub mode: TransferMode,
    pub stream_count: u32,
    pub chunk_size: u64,
    pub encryption: Encryption,
    /// Kernel congestion control set per connection (e.g. "cubic", "bbr",
    /// "reno").
    pub cca: String,
    /// When set, SO_SNDBUF/SO_RCVBUF are clamped to this before connecting,
    /// fixing the TCP window.
    pub socket_buffer: Option<u64>,
    /// Read timeout on mover connections.
    pub io_timeout: Duration,
}

impl TransferSpec {
    pub fn new(peer_address: impl Into<String>, source: SourceEndpoint, sink: SinkEndpoint) -> Self {
        TransferSpec {
            source,
            sink,
            peer_address: peer_address.into(),
            mode: TransferMode::Bulk,
            stream_count: 1,
            chunk_size: DEFAULT_CHUNK_SIZE,
            encryption: Encryption::None,
            cca: "cubic".into(),
            socket_buffer: None,
            io_timeout: Duration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<(), MoverError> {
        if self.stream_count == 0 {
            return Err(MoverError::InvalidSpec("stream_count must be >= 1".into()));
        }
        if self.chunk_size < MIN_CHUNK_SIZE {
            return Err(MoverError::InvalidSpec(format!(
                "chunk_size {} below the {} minimum",
                self.chunk_size, MIN_CHUNK_SIZE
            )));
        }
        if self.chunk_size + crate::protocol::CHUNK_HEADER_LEN as u64
            > crate::protocol::MAX_PAYLOAD as u64
        {
            return Err(MoverError::InvalidSpec(format!(
                "chunk_size {} exceeds the frame payload cap",
                self.chunk_size
            )));
        }
        if self.mode == TransferMode::Streaming
            && !matches!(self.source, SourceEndpoint::Directory(_))
        {
            return Err(MoverError::InvalidSpec(
                "streaming mode requires a directory source".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrityStatus {
    Verified,
    Failed,
    /// Nothing was checked (an empty session moves no files).
    Skipped,
}

impl fmt::Display for IntegrityStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntegrityStatus::Verified => f.write_str("verified"),
            IntegrityStatus::Failed => f.write_str("failed"),
            IntegrityStatus::Skipped => f.write_str("skipped"),
        }
    }
}

/// Measured outcome of one transfer. Immutable once returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub bytes_moved: u64,
    pub wall_time_us: u64,
    /// `bytes_moved * 8 / wall_time` in bits per second.
    pub throughput_bps: f64,
    pub files_ok: u64,
    pub files_failed: u64,
    pub integrity: IntegrityStatus,
    pub per_stream_bytes: Vec<u64>,
    /// Human diagnostics for failed files; empty on success.
    pub failures: Vec<String>,
}

impl TransferResult {
    pub fn new(
        bytes_moved: u64,
        wall_time: Duration,
        files_ok: u64,
        files_failed: u64,
        integrity: IntegrityStatus,
        per_stream_bytes: Vec<u64>,
        failures: Vec<String>,
    ) -> Self {
        let wall_time_us = wall_time.as_micros().max(1) as u64;
        TransferResult {
            bytes_moved,
            wall_time_us,
            throughput_bps: bytes_moved as f64 * 8.0 / (wall_time_us as f64 / 1e6),
            files_ok,
            files_failed,
            integrity,
            per_stream_bytes,
            failures,
        }
    }

    pub fn wall_time(&self) -> Duration {
        Duration::from_micros(self.wall_time_us)
    }

    pub fn is_success(&self) -> bool {
        self.files_failed == 0 && self.integrity != IntegrityStatus::Failed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageDirection {
    StageIn,
    StageOut,
}

/// A local staging job between production storage and a burst buffer.
#[derive(Debug, Clone)]
pub struct StagingJob {
    pub from: PathBuf,
    pub to: PathBuf,
    pub manifest: crate::dataset::DatasetManifest,
    pub direction: StageDirection,
}

impl StagingJob {
    pub fn validate(&self) -> Result<(), MoverError> {
        if self.from == self.to {
            return Err(MoverError::InvalidSpec(
                "staging source and destination must differ".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMode;

    fn base_spec() -> TransferSpec {
        TransferSpec::new(
            "127.0.0.1:0",
            SourceEndpoint::Directory(PathBuf::from("/tmp/src")),
            SinkEndpoint::Discard,
        )
    }

    #[test]
    fn spec_validation_catches_bad_fields() {
        assert!(base_spec().validate().is_ok());

        let mut s = base_spec();
        s.stream_count = 0;
        assert!(s.validate().is_err());

        let mut s = base_spec();
        s.chunk_size = 1024;
        assert!(s.validate().is_err());

        let mut s = base_spec();
        s.chunk_size = crate::protocol::MAX_PAYLOAD as u64;
        assert!(s.validate().is_err());

        let mut s = base_spec();
        s.mode = TransferMode::Streaming;
        s.source = SourceEndpoint::Synthetic(DatasetSpec {
            file_size: 1024,
            file_count: 1,
            root_path: PathBuf::new(),
            content_seed: 0,
            mode: DatasetMode::Bulk,
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn result_throughput_matches_definition() {
        let r = TransferResult::new(
            1_000_000,
            Duration::from_secs(2),
            4,
            0,
            IntegrityStatus::Verified,
            vec![500_000, 500_000],
            Vec::new(),
        );
        assert!((r.throughput_bps - 4_000_000.0).abs() < 1e-6);
        assert_eq!(r.per_stream_bytes.iter().sum::<u64>(), r.bytes_moved);
        assert!(r.is_success());
    }

    #[test]
    fn staging_job_rejects_equal_paths() {
        let manifest = crate::dataset::DatasetManifest {
            spec: DatasetSpec {
                file_size: 1024,
                file_count: 1,
                root_path: PathBuf::from("/a"),
                content_seed: 0,
                mode: DatasetMode::Bulk,
            },
            entries: Vec::new(),
            total_bytes: 0,
        };
        let job = StagingJob {
            from: PathBuf::from("/a"),
            to: PathBuf::from("/a"),
            manifest,
            direction: StageDirection::StageIn,
        };
        assert!(job.validate().is_err());
    }
}
