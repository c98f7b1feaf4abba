//! The sending side of bulk transfers.
//!
//! Files are bin-packed onto `stream_count` data connections
//! longest-processing-time-first, so stream completion times stay balanced.
//! Each file travels as FILE_OPEN, ordered CHUNKs, FILE_CLOSE carrying the
//! source digest, then waits for the receiver's verdict. Retry policy: one
//! reconnect per broken connection, one re-send per digest-mismatched file,
//! then the file is failed.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::conn::Conn;
use super::socket::{connect_with_options, SocketOptions};
use super::{IntegrityStatus, MoverError, SourceEndpoint, TransferResult, TransferSpec};
use crate::dataset::{ContentStream, DatasetManifest, DatasetSpec, Digest, DigestState};
use crate::protocol::{
    Ack, CloseStatus, ConnectionRole, Encryption, FileClose, FileOpen, Frame, FrameType,
    ManifestChunk, Nack, SessionHello, TransferMode, PROTOCOL_VERSION,
};

const MANIFEST_CHUNK: usize = 4 * 1024 * 1024;

/// Synthesize the manifest for an on-the-fly source: sizes and paths are
/// known, content digests are left zero (the wire digest computed while
/// sending is authoritative).
pub fn synthetic_manifest(spec: &DatasetSpec) -> DatasetManifest {
    let entries = (0..spec.file_count)
        .map(|i| crate::dataset::ManifestEntry {
            relative_path: DatasetSpec::entry_path(i),
            size: spec.file_size,
            digest: Digest::ZERO,
        })
        .collect::<Vec<_>>();
    let total_bytes = entries.iter().map(|e| e.size).sum();
    DatasetManifest {
        spec: spec.clone(),
        entries,
        total_bytes,
    }
}

pub(super) fn open_session_conn(
    spec_addr: &str,
    opts: &SocketOptions,
    io_timeout: Duration,
    hello: &SessionHello,
) -> Result<Conn, MoverError> {
    let (stream, _report) = connect_with_options(spec_addr, opts, io_timeout)?;
    stream.set_read_timeout(Some(io_timeout))?;
    let mut conn = Conn::Plain(stream);
    conn.send(&Frame::new(FrameType::Hello, hello.encode()))?;
    let reply = conn.recv()?;
    match reply.frame_type {
        FrameType::Hello => {
            let their = SessionHello::decode(&reply.payload)?;
            if their.protocol_version > PROTOCOL_VERSION {
                return Err(MoverError::PeerError(format!(
                    "peer failed to negotiate the version down ({} > {})",
                    their.protocol_version, PROTOCOL_VERSION
                )));
            }
        }
        FrameType::Nack => {
            let nack = Nack::decode(&reply.payload)?;
            return Err(MoverError::SessionRejected(nack.message));
        }
        other => {
            return Err(MoverError::PeerError(format!(
                "expected HELLO or NACK, got {other:?}"
            )))
        }
    }
    if hello.encryption == Encryption::Tls {
        conn = conn.upgrade_client()?;
    }
    Ok(conn)
}

fn hello_for(spec: &TransferSpec, role: ConnectionRole, digest: Digest) -> SessionHello {
    SessionHello {
        protocol_version: PROTOCOL_VERSION,
        role,
        mode: spec.mode,
        stream_count: spec.stream_count,
        encryption: spec.encryption,
        manifest_digest: digest,
    }
}

pub(super) fn socket_options(spec: &TransferSpec) -> SocketOptions {
    SocketOptions {
        cca: Some(spec.cca.clone()),
        buffer: spec.socket_buffer,
    }
}

/// Send the canonical manifest (or session descriptor) text and wait for
/// the receiver to acknowledge it.
pub(super) fn send_manifest_text(conn: &mut Conn, text: &[u8]) -> Result<(), MoverError> {
    let total = text.len() as u64;
    let mut offset = 0usize;
    loop {
        let end = (offset + MANIFEST_CHUNK).min(text.len());
        let chunk = ManifestChunk {
            total_len: total,
            offset: offset as u64,
            data: text[offset..end].to_vec(),
        };
        conn.send(&Frame::new(FrameType::Manifest, chunk.encode()))?;
        offset = end;
        if offset >= text.len() {
            break;
        }
    }
    match conn.recv()? {
        f if f.frame_type == FrameType::Ack => Ok(()),
        f if f.frame_type == FrameType::Nack => {
            let nack = Nack::decode(&f.payload)?;
            Err(MoverError::SessionRejected(nack.message))
        }
        f => Err(MoverError::PeerError(format!(
            "expected ACK for manifest, got {:?}",
            f.frame_type
        ))),
    }
}

/// Longest-processing-time-first bin packing of entry indices onto streams.
pub(super) fn partition_files(sizes: &[u64], streams: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(sizes[i]), i));
    let mut bins: Vec<(u64, Vec<usize>)> = vec![(0, Vec::new()); streams.max(1)];
    for idx in order {
        let bin = bins
            .iter_mut()
            .min_by_key(|(load, _)| *load)
            .expect("at least one bin");
        bin.0 += sizes[idx];
        bin.1.push(idx);
    }
    bins.into_iter()
        .map(|(_, mut v)| {
            v.sort_unstable();
            v
        })
        .collect()
}

enum FileSource {
    Disk(File),
    Synthetic { stream: ContentStream, remaining: u64 },
}

impl FileSource {
    fn open(source: &SourceEndpoint, entry_index: u64, rel: &str, size: u64) -> Result<Self, MoverError> {
        match source {
            SourceEndpoint::Directory(root) => {
                let path = root.join(rel);
                Ok(FileSource::Disk(File::open(&path).map_err(|e| {
                    MoverError::SourceInvalid {
                        path,
                        detail: e.to_string(),
                    }
                })?))
            }
            SourceEndpoint::Synthetic(ds) => Ok(FileSource::Synthetic {
                stream: ContentStream::new(ds.content_seed, entry_index),
                remaining: size,
            }),
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<usize, MoverError> {
        match self {
            FileSource::Disk(f) => Ok(f.read(buf)?),
            FileSource::Synthetic { stream, remaining } => {
                let n = (*remaining).min(buf.len() as u64) as usize;
                stream.fill(&mut buf[..n]);
                *remaining -= n as u64;
                Ok(n)
            }
        }
    }
}

pub(super) enum FileVerdict {
    Acked,
    Nacked(Nack),
}

/// Ship one whole file and wait for the receiver's verdict.
pub(super) fn send_file(
    conn: &mut Conn,
    spec: &TransferSpec,
    index: u64,
    rel: &str,
    size: u64,
) -> Result<FileVerdict, MoverError> {
    let mut src = FileSource::open(&spec.source, index, rel, size)?;
    conn.send(&Frame::new(
        FrameType::FileOpen,
        FileOpen {
            file_index: index,
            announced_size: size,
            relative_path: rel.to_string(),
        }
        .encode(),
    ))?;
    let mut digest = DigestState::new();
    let mut sent = 0u64;
    let mut buf = vec![0u8; spec.chunk_size.min(size.max(1)) as usize];
    while sent < size {
        let want = ((size - sent).min(buf.len() as u64)) as usize;
        let n = src.fill(&mut buf[..want])?;
        if n == 0 {
            // source shrank under us
            conn.send(&Frame::new(
                FrameType::FileClose,
                FileClose {
                    file_index: index,
                    final_size: sent,
                    status: CloseStatus::Aborted,
                    digest: Digest::ZERO,
                }
                .encode(),
            ))?;
            return await_verdict(conn, index);
        }
        digest.update(&buf[..n]);
        conn.send(&crate::protocol::encode_chunk(index, sent, &buf[..n])?)?;
        sent += n as u64;
    }
    conn.send(&Frame::new(
        FrameType::FileClose,
        FileClose {
            file_index: index,
            final_size: sent,
            status: CloseStatus::Ok,
            digest: digest.finish(),
        }
        .encode(),
    ))?;
    await_verdict(conn, index)
}

pub(super) fn await_verdict(conn: &mut Conn, index: u64) -> Result<FileVerdict, MoverError> {
    loop {
        let frame = conn.recv()?;
        match frame.frame_type {
            FrameType::Ack => {
                let ack = Ack::decode(&frame.payload)?;
                if ack.file_index == Some(index) {
                    return Ok(FileVerdict::Acked);
                }
            }
            FrameType::Nack => {
                let nack = Nack::decode(&frame.payload)?;
                if nack.file_index == Some(index) || nack.file_index.is_none() {
                    return Ok(FileVerdict::Nacked(nack));
                }
            }
            other => {
                return Err(MoverError::PeerError(format!(
                    "expected file verdict, got {other:?}"
                )))
            }
        }
    }
}

#[derive(Default)]
pub(super) struct StreamOutcome {
    pub delivered_bytes: u64,
    pub files_ok: u64,
    pub failures: Vec<String>,
    pub last_ack: Option<Instant>,
}

struct StreamJob<'a> {
    spec: &'a TransferSpec,
    digest: Digest,
    files: Vec<(u64, String, u64)>, // (index, rel, size)
}

fn run_stream(job: StreamJob<'_>) -> StreamOutcome {
    let mut out = StreamOutcome::default();
    let opts = socket_options(job.spec);
    let hello = hello_for(job.spec, ConnectionRole::Data, job.digest);
    let mut conn = match open_session_conn(&job.spec.peer_address, &opts, job.spec.io_timeout, &hello) {
        Ok(c) => c,
        Err(e) => {
            for (_, rel, _) in &job.files {
                out.failures.push(format!("{rel}: no data connection: {e}"));
            }
            return out;
        }
    };
    'files: for (index, rel, size) in &job.files {
        let mut resent_after_mismatch = false;
        let mut reconnected_this_break = false;
        loop {
            match send_file(&mut conn, job.spec, *index, rel, *size) {
                Ok(FileVerdict::Acked) => {
                    out.files_ok += 1;
                    out.delivered_bytes += size;
                    out.last_ack = Some(Instant::now());
                    continue 'files;
                }
                Ok(FileVerdict::Nacked(nack)) => {
                    use crate::protocol::NackReason;
                    if nack.reason == NackReason::DigestMismatch && !resent_after_mismatch {
                        resent_after_mismatch = true;
                        continue; // one re-send
                    }
                    out.failures
                        .push(format!("{rel}: {:?}: {}", nack.reason, nack.message));
                    continue 'files;
                }
                Err(MoverError::SourceInvalid { path, detail }) => {
                    out.failures.push(format!("{}: {detail}", path.display()));
                    continue 'files;
                }
                Err(e) => {
                    // broken connection: one reconnect per break
                    if reconnected_this_break {
                        out.failures.push(format!("{rel}: {e}"));
                        for (_, r, _) in job.files.iter().skip_while(|(i, _, _)| i != index).skip(1) {
                            out.failures.push(format!("{r}: stream abandoned after reconnect failure"));
                        }
                        return out;
                    }
                    reconnected_this_break = true;
                    match open_session_conn(&job.spec.peer_address, &opts, job.spec.io_timeout, &hello) {
                        Ok(c) => {
                            conn = c;
                            continue; // re-send current file from scratch
                        }
                        Err(e2) => {
                            out.failures.push(format!("{rel}: reconnect failed: {e2}"));
                            for (_, r, _) in job.files.iter().skip_while(|(i, _, _)| i != index).skip(1)
                            {
                                out.failures.push(format!("{r}: stream abandoned after reconnect failure"));
                            }
                            return out;
                        }
                    }
                }
            }
        }
    }
    let _ = conn.send(&Frame::empty(FrameType::Bye));
    let _ = conn.recv(); // best-effort BYE
    out
}

/// Move a manifest of files at rest to the peer. Wall time runs from the
/// first HELLO to the last file ACK; the handshake is in the measurement,
/// dataset generation is not.
pub fn transfer(spec: &TransferSpec, manifest: &DatasetManifest) -> Result<TransferResult, MoverError> {
    spec.validate()?;
    if spec.mode != TransferMode::Bulk {
        return Err(MoverError::InvalidSpec(
            "transfer() is the bulk path; use transfer_streaming for streaming sessions".into(),
        ));
    }
    // bulk contract: complete data at rest before the transfer initiates
    if let SourceEndpoint::Directory(root) = &spec.source {
        verify_at_rest(root, manifest)?;
    }

    let digest = manifest.digest();
    let manifest_text = manifest.to_text();
    let t0 = Instant::now();

    let mut control = open_session_conn(
        &spec.peer_address,
        &socket_options(spec),
        spec.io_timeout,
        &hello_for(spec, ConnectionRole::Control, digest),
    )?;
    send_manifest_text(&mut control, manifest_text.as_bytes())?;

    let sizes: Vec<u64> = manifest.entries.iter().map(|e| e.size).collect();
    let partitions = partition_files(&sizes, spec.stream_count as usize);

    let outcomes: Mutex<Vec<(usize, StreamOutcome)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for (stream_id, part) in partitions.iter().enumerate() {
            let files: Vec<(u64, String, u64)> = part
                .iter()
                .map(|&i| {
                    let e = &manifest.entries[i];
                    (i as u64, e.relative_path.clone(), e.size)
                })
                .collect();
            if files.is_empty() {
                outcomes.lock().unwrap().push((stream_id, StreamOutcome::default()));
                continue;
            }
            let job = StreamJob { spec, digest, files };
            let outcomes = &outcomes;
            scope.spawn(move || {
                let out = run_stream(job);
                outcomes.lock().unwrap().push((stream_id, out));
            });
        }
    });

    let mut outcomes = outcomes.into_inner().unwrap();
    outcomes.sort_by_key(|(id, _)| *id);
    let last_ack = outcomes
        .iter()
        .filter_map(|(_, o)| o.last_ack)
        .max()
        .unwrap_or_else(Instant::now);
    let wall = last_ack.duration_since(t0);

    let _ = control.send(&Frame::empty(FrameType::Bye));
    let _ = control.recv();

    let files_ok: u64 = outcomes.iter().map(|(_, o)| o.files_ok).sum();
    let bytes_moved: u64 = outcomes.iter().map(|(_, o)| o.delivered_bytes).sum();
    let failures: Vec<String> = outcomes
        .iter()
        .flat_map(|(_, o)| o.failures.iter().cloned())
        .collect();
    let files_failed = failures.len() as u64;
    let per_stream_bytes = outcomes.iter().map(|(_, o)| o.delivered_bytes).collect();
    let integrity = if files_ok + files_failed == 0 {
        IntegrityStatus::Skipped
    } else if files_failed == 0 {
        IntegrityStatus::Verified
    } else {
        IntegrityStatus::Failed
    };
    Ok(TransferResult::new(
        bytes_moved,
        wall,
        files_ok,
        files_failed,
        integrity,
        per_stream_bytes,
        failures,
    ))
}

fn verify_at_rest(root: &Path, manifest: &DatasetManifest) -> Result<(), MoverError> {
    for e in &manifest.entries {
        let path: PathBuf = root.join(&e.relative_path);
        match std::fs::metadata(&path) {
            Ok(md) if md.len() == e.size => {}
            Ok(md) => {
                return Err(MoverError::SourceInvalid {
                    path,
                    detail: format!("expected {} bytes, found {}", e.size, md.len()),
                })
            }
            Err(err) => {
                return Err(MoverError::SourceInvalid {
                    path,
                    detail: err.to_string(),
                })
            }
        }
    }
    Ok(())
}

/// Time `samples` ACK echoes over one mover control connection: the RTT of
/// the path the data actually takes, no extra privileges needed.
pub fn rtt_probe(peer: &str, samples: usize, io_timeout: Duration) -> Result<Vec<Duration>, MoverError> {
    let hello = SessionHello {
        protocol_version: PROTOCOL_VERSION,
        role: ConnectionRole::Control,
        mode: TransferMode::Bulk,
        stream_count: 1,
        encryption: Encryption::None,
        manifest_digest: Digest::ZERO,
    };
    let mut conn = open_session_conn(peer, &SocketOptions::default(), io_timeout, &hello)?;
    let mut rtts = Vec::with_capacity(samples);
    for _ in 0..samples.max(1) {
        let t = Instant::now();
        conn.send(&Frame::new(FrameType::Ack, Ack { file_index: None }.encode()))?;
        let frame = conn.recv()?;
        if frame.frame_type != FrameType::Ack {
            return Err(MoverError::PeerError(format!(
                "expected ACK echo, got {:?}",
                frame.frame_type
            )));
        }
        rtts.push(t.elapsed());
    }
    let _ = conn.send(&Frame::empty(FrameType::Bye));
    let _ = conn.recv();
    Ok(rtts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lpt_partition_balances_and_preserves_all_files() {
        let sizes = vec![100, 1, 1, 1, 97, 1, 1, 1];
        let parts = partition_files(&sizes, 2);
        assert_eq!(parts.len(), 2);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..sizes.len()).collect::<Vec<_>>());
        let loads: Vec<u64> = parts
            .iter()
            .map(|p| p.iter().map(|&i| sizes[i]).sum())
            .collect();
        assert!((loads[0] as i64 - loads[1] as i64).abs() <= 2);
    }

    #[test]
    fn partition_handles_more_streams_than_files() {
        let parts = partition_files(&[10], 4);
        assert_eq!(parts.len(), 4);
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 1);
    }

    #[test]
    fn synthetic_manifest_has_zero_digests_and_right_totals() {
        let ds = DatasetSpec {
            file_size: 1 << 20,
            file_count: 4,
            root_path: PathBuf::from("/synthetic"),
            content_seed: 5,
            mode: crate::dataset::DatasetMode::Bulk,
        };
        let m = synthetic_manifest(&ds);
        assert_eq!(m.entries.len(), 4);
        assert_eq!(m.total_bytes, 4 << 20);
        assert!(m.entries.iter().all(|e| e.digest.is_zero()));
    }
}
