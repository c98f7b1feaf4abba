//! The receiving side of the mover.
//!
//! `serve` binds a listener and accepts any number of sessions. A session is
//! one control connection (HELLO, MANIFEST, BYE) plus its data connections
//! (FILE_OPEN / CHUNK / FILE_CLOSE), all keyed by the manifest digest from
//! the HELLO. Files land under the configured sink root, or are digested and
//! dropped in discard mode. Every completed file is re-digested and ACKed or
//! NACKed; write failures are tallied per file, never fatal to the session.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::conn::Conn;
use super::socket::{apply_socket_options, bind_listener, SocketOptions};
use super::{tls, IntegrityStatus, MoverError, SinkEndpoint};
use crate::dataset::{DatasetManifest, Digest, DigestState};
use crate::protocol::{
    Ack, CloseStatus, ConnectionRole, Encryption, FileClose, FileOpen, Frame, FrameType,
    GrowthMark, ManifestChunk, Nack, NackReason, ProtocolError, SessionHello, TransferMode,
    PROTOCOL_VERSION,
};

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub sink: SinkEndpoint,
    /// Receive-buffer clamp installed on the listener before `listen`, so
    /// accepted connections negotiate a clamped window.
    pub socket_buffer: Option<u64>,
    /// Congestion control for accepted connections.
    pub cca: Option<String>,
    /// Idle budget for data connections mid-transfer.
    pub io_timeout: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            sink: SinkEndpoint::Discard,
            socket_buffer: None,
            cca: None,
            io_timeout: Duration::from_secs(60),
        }
    }
}

/// Receiver-side accounting for one finished session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub manifest_digest: Digest,
    pub mode: TransferMode,
    pub bytes_moved: u64,
    pub files_ok: u64,
    pub files_failed: u64,
    pub wall_time_us: u64,
    pub integrity: IntegrityStatus,
    /// False when the control connection vanished without BYE.
    pub clean_close: bool,
}

#[derive(Default)]
struct Counters {
    files_ok: u64,
    files_failed: u64,
    bytes_ok: u64,
}

struct SessionState {
    mode: TransferMode,
    began: Instant,
    /// Bulk sessions carry a parsed manifest; streaming sessions a raw
    /// descriptor, no upfront inventory.
    manifest: OnceLock<DatasetManifest>,
    counters: Mutex<Counters>,
}

impl SessionState {
    fn summarize(&self, digest: Digest, clean_close: bool) -> SessionSummary {
        let c = self.counters.lock().unwrap();
        let integrity = if c.files_failed > 0 {
            IntegrityStatus::Failed
        } else if c.files_ok > 0 {
            IntegrityStatus::Verified
        } else {
            IntegrityStatus::Skipped
        };
        SessionSummary {
            manifest_digest: digest,
            mode: self.mode,
            bytes_moved: c.bytes_ok,
            files_ok: c.files_ok,
            files_failed: c.files_failed,
            wall_time_us: self.began.elapsed().as_micros().max(1) as u64,
            integrity,
            clean_close,
        }
    }
}

struct Shared {
    config: ServeConfig,
    tls: Arc<rustls::ServerConfig>,
    sessions: Mutex<HashMap<Digest, Arc<SessionState>>>,
    summaries: Mutex<Vec<SessionSummary>>,
    shutdown: AtomicBool,
}

pub struct ServerHandle {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Summaries of every session that has ended so far.
    pub fn session_summaries(&self) -> Vec<SessionSummary> {
        self.shared.summaries.lock().unwrap().clone()
    }

    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

/// Bind and start accepting sessions. The handle owns the accept loop;
/// dropping it (or calling `shutdown`) stops the server.
pub fn serve(listen_addr: &str, config: ServeConfig) -> Result<ServerHandle, MoverError> {
    let listener: TcpListener = bind_listener(listen_addr, config.socket_buffer)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        tls: tls::server_config()?,
        config,
        sessions: Mutex::new(HashMap::new()),
        summaries: Mutex::new(Vec::new()),
        shutdown: AtomicBool::new(false),
    });
    let accept_shared = Arc::clone(&shared);
    let accept_thread = std::thread::Builder::new()
        .name("wanlab-accept".into())
        .spawn(move || accept_loop(listener, accept_shared))?;
    Ok(ServerHandle {
        local_addr,
        shared,
        accept_thread: Some(accept_thread),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut handlers: Vec<JoinHandle<()>> = Vec::new();
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        match listener.accept() {
            Ok((stream, _peer)) => {
                let conn_shared = Arc::clone(&shared);
                if let Ok(h) = std::thread::Builder::new()
                    .name("wanlab-conn".into())
                    .spawn(move || handle_connection(stream, conn_shared))
                {
                    handlers.push(h);
                }
                handlers.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => std::thread::sleep(Duration::from_millis(5)),
        }
    }
    for h in handlers {
        let _ = h.join();
    }
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) {
    stream.set_nodelay(true).ok();
    let opts = SocketOptions {
        cca: shared.config.cca.clone(),
        buffer: shared.config.socket_buffer,
    };
    if opts.cca.is_some() || opts.buffer.is_some() {
        let _ = apply_socket_options(&stream, &opts);
    }
    // short ticks so shutdown and idle budgets stay responsive
    stream.set_read_timeout(Some(Duration::from_millis(200))).ok();
    let mut conn = Conn::Plain(stream);

    let hello = match wait_frame(&mut conn, &shared, shared.config.io_timeout) {
        Ok(Some(f)) if f.frame_type == FrameType::Hello => match SessionHello::decode(&f.payload) {
            Ok(h) => h,
            Err(e) => {
                let _ = nack_session(&mut conn, &e.to_string());
                return;
            }
        },
        _ => return,
    };

    let reply = SessionHello {
        protocol_version: crate::protocol::negotiate_version(PROTOCOL_VERSION, hello.protocol_version),
        ..hello.clone()
    };
    if conn
        .send(&Frame::new(FrameType::Hello, reply.encode()))
        .is_err()
    {
        return;
    }
    let mut conn = if hello.encryption == Encryption::Tls {
        match conn.upgrade_server(Arc::clone(&shared.tls)) {
            Ok(c) => c,
            Err(_) => return,
        }
    } else {
        conn
    };

    match hello.role {
        ConnectionRole::Control => control_loop(&mut conn, &shared, &hello),
        ConnectionRole::Data => data_loop(&mut conn, &shared, &hello),
    }
}

/// Wait for one frame, tolerating read-timeout ticks up to `budget` of
/// silence (or indefinitely when the session is still alive and `budget` is
/// zero). Returns `Ok(None)` on shutdown or exhausted budget.
fn wait_frame(
    conn: &mut Conn,
    shared: &Shared,
    budget: Duration,
) -> Result<Option<Frame>, ProtocolError> {
    let start = Instant::now();
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return Ok(None);
        }
        match conn.recv_tick()? {
            Some(f) => return Ok(Some(f)),
            None => {
                if !budget.is_zero() && start.elapsed() > budget {
                    return Ok(None);
                }
            }
        }
    }
}

fn nack_session(conn: &mut Conn, msg: &str) -> Result<(), ProtocolError> {
    conn.send(&Frame::new(
        FrameType::Nack,
        Nack {
            file_index: None,
            reason: NackReason::SessionRejected,
            message: msg.into(),
        }
        .encode(),
    ))
}

fn control_loop(conn: &mut Conn, shared: &Shared, hello: &SessionHello) {
    let digest = hello.manifest_digest;
    let session = Arc::new(SessionState {
        mode: hello.mode,
        began: Instant::now(),
        manifest: OnceLock::new(),
        counters: Mutex::new(Counters::default()),
    });

    // Zero-digest sessions are probes (RTT echo, empty sessions): data
    // connections can never join them, so they skip the active map and two
    // may run concurrently.
    let registered = if !digest.is_zero() {
        let mut sessions = shared.sessions.lock().unwrap();
        if sessions.contains_key(&digest) {
            let _ = nack_session(conn, "a session with this manifest digest is already active");
            return;
        }
        sessions.insert(digest, Arc::clone(&session));
        true
    } else {
        false
    };

    let mut manifest_buf: Vec<u8> = Vec::new();
    let mut manifest_total: Option<u64> = None;
    let mut clean_close = false;

    loop {
        // control connections idle legitimately while data flows
        let frame = match wait_frame(conn, shared, Duration::ZERO) {
            Ok(Some(f)) => f,
            Ok(None) | Err(_) => break,
        };
        match frame.frame_type {
            FrameType::Manifest => {
                let chunk = match ManifestChunk::decode(&frame.payload) {
                    Ok(c) => c,
                    Err(e) => {
                        let _ = nack_session(conn, &e.to_string());
                        break;
                    }
                };
                if manifest_total.is_none() {
                    manifest_total = Some(chunk.total_len);
                    manifest_buf.reserve(chunk.total_len.min(64 << 20) as usize);
                }
                if chunk.offset as usize != manifest_buf.len() {
                    let _ = nack_session(conn, "manifest chunks out of order");
                    break;
                }
                manifest_buf.extend_from_slice(&chunk.data);
                if manifest_buf.len() as u64 >= manifest_total.unwrap_or(0) {
                    if Digest::of_bytes(&manifest_buf) != digest {
                        let _ = nack_session(conn, "manifest digest disagrees with HELLO");
                        break;
                    }
                    if hello.mode == TransferMode::Bulk {
                        match DatasetManifest::from_text(&String::from_utf8_lossy(&manifest_buf)) {
                            Ok(m) => {
                                let _ = session.manifest.set(m);
                            }
                            Err(e) => {
                                let _ = nack_session(conn, &format!("unparseable manifest: {e}"));
                                break;
                            }
                        }
                    }
                    let _ = conn.send(&Frame::new(FrameType::Ack, Ack { file_index: None }.encode()));
                }
            }
            // RTT echo: measured on the same path the data takes
            FrameType::Ack => {
                if conn
                    .send(&Frame::new(FrameType::Ack, Ack { file_index: None }.encode()))
                    .is_err()
                {
                    break;
                }
            }
            FrameType::EndOfSource => {}
            FrameType::Bye => {
                let _ = conn.send(&Frame::empty(FrameType::Bye));
                clean_close = true;
                break;
            }
            other => {
                let _ = nack_session(conn, &format!("unexpected {other:?} on control connection"));
                break;
            }
        }
    }

    if registered {
        shared.sessions.lock().unwrap().remove(&digest);
    }
    shared
        .summaries
        .lock()
        .unwrap()
        .push(session.summarize(digest, clean_close));
}

/// Reject paths that could escape the sink root.
fn sanitize_relative(rel: &str) -> Option<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || rel.is_empty() {
        return None;
    }
    let mut clean = PathBuf::new();
    for c in p.components() {
        match c {
            Component::Normal(part) => clean.push(part),
            _ => return None,
        }
    }
    Some(clean)
}

enum SinkFile {
    Disk { file: File, path: PathBuf },
    Discard,
}

struct OpenFile {
    sink: SinkFile,
    relative: String,
    announced: u64,
    written: u64,
    digest: DigestState,
}

fn data_loop(conn: &mut Conn, shared: &Shared, hello: &SessionHello) {
    let session = {
        let sessions = shared.sessions.lock().unwrap();
        match sessions.get(&hello.manifest_digest) {
            Some(s) => Arc::clone(s),
            None => {
                let _ = nack_session(conn, "no active session for this manifest digest");
                return;
            }
        }
    };
    let mut open: HashMap<u64, OpenFile> = HashMap::new();

    macro_rules! nack_file {
        ($idx:expr, $reason:expr, $msg:expr) => {{
            session.counters.lock().unwrap().files_failed += 1;
            let _ = conn.send(&Frame::new(
                FrameType::Nack,
                Nack {
                    file_index: Some($idx),
                    reason: $reason,
                    message: $msg.to_string(),
                }
                .encode(),
            ));
        }};
    }

    loop {
        let frame = match wait_frame(conn, shared, shared.config.io_timeout) {
            Ok(Some(f)) => f,
            Ok(None) | Err(_) => break,
        };
        match frame.frame_type {
            FrameType::FileOpen => {
                let fo = match FileOpen::decode(&frame.payload) {
                    Ok(f) => f,
                    Err(_) => break,
                };
                // bulk transfers announce their inventory upfront; hold them to it
                if let Some(manifest) = session.manifest.get() {
                    let entry = manifest.entries.get(fo.file_index as usize);
                    let consistent = entry
                        .map(|e| e.relative_path == fo.relative_path)
                        .unwrap_or(false);
                    if !consistent {
                        nack_file!(
                            fo.file_index,
                            NackReason::ProtocolViolation,
                            "FILE_OPEN disagrees with the announced manifest"
                        );
                        continue;
                    }
                }
                let sink = match &shared.config.sink {
                    SinkEndpoint::Discard => SinkFile::Discard,
                    SinkEndpoint::Directory(root) => match sanitize_relative(&fo.relative_path) {
                        None => {
                            nack_file!(fo.file_index, NackReason::ProtocolViolation, "unsafe relative path");
                            continue;
                        }
                        Some(rel) => {
                            let path = root.join(rel);
                            if let Some(parent) = path.parent() {
                                if let Err(e) = fs::create_dir_all(parent) {
                                    nack_file!(fo.file_index, NackReason::WriteFailure, e);
                                    continue;
                                }
                            }
                            match File::create(&path) {
                                Ok(file) => SinkFile::Disk { file, path },
                                Err(e) => {
                                    nack_file!(fo.file_index, NackReason::WriteFailure, e);
                                    continue;
                                }
                            }
                        }
                    },
                };
                open.insert(
                    fo.file_index,
                    OpenFile {
                        sink,
                        relative: fo.relative_path,
                        announced: fo.announced_size,
                        written: 0,
                        digest: DigestState::new(),
                    },
                );
            }
            FrameType::Chunk => {
                let (header, data) = match crate::protocol::decode_chunk(&frame.payload) {
                    Ok(x) => x,
                    Err(_) => break,
                };
                let Some(f) = open.get_mut(&header.file_index) else {
                    nack_file!(header.file_index, NackReason::ProtocolViolation, "chunk for unopened file");
                    break;
                };
                if header.offset != f.written {
                    let idx = header.file_index;
                    discard_partial(open.remove(&idx).unwrap());
                    nack_file!(idx, NackReason::ProtocolViolation, "chunk offset out of order");
                    continue;
                }
                if session.mode == TransferMode::Bulk
                    && header.offset + header.chunk_len as u64 > f.announced
                {
                    let idx = header.file_index;
                    discard_partial(open.remove(&idx).unwrap());
                    nack_file!(idx, NackReason::SizeMismatch, "chunk extends past announced size");
                    continue;
                }
                f.digest.update(data);
                f.written += data.len() as u64;
                if let SinkFile::Disk { file, path } = &mut f.sink {
                    if let Err(e) = file.write_all(data) {
                        let idx = header.file_index;
                        let path = path.clone();
                        open.remove(&idx);
                        let _ = fs::remove_file(path);
                        nack_file!(idx, NackReason::WriteFailure, e);
                    }
                }
            }
            FrameType::GrowthMark => {
                let gm = match GrowthMark::decode(&frame.payload) {
                    Ok(g) => g,
                    Err(_) => break,
                };
                if session.mode != TransferMode::Streaming {
                    nack_file!(gm.file_index, NackReason::ProtocolViolation, "growth mark in bulk session");
                    continue;
                }
                if let Some(f) = open.get_mut(&gm.file_index) {
                    if gm.committed_size < f.written {
                        let idx = gm.file_index;
                        discard_partial(open.remove(&idx).unwrap());
                        nack_file!(idx, NackReason::ProtocolViolation, "growth mark behind written bytes");
                        continue;
                    }
                    f.announced = gm.committed_size;
                }
            }
            FrameType::FileClose => {
                let fc = match FileClose::decode(&frame.payload) {
                    Ok(f) => f,
                    Err(_) => break,
                };
                let Some(f) = open.remove(&fc.file_index) else {
                    nack_file!(fc.file_index, NackReason::ProtocolViolation, "close for unopened file");
                    continue;
                };
                if fc.status == CloseStatus::Aborted {
                    discard_partial(f);
                    nack_file!(fc.file_index, NackReason::Aborted, "source aborted the file");
                    continue;
                }
                let computed = f.digest.clone().finish();
                let manifest_digest = session
                    .manifest
                    .get()
                    .and_then(|m| m.entries.get(fc.file_index as usize))
                    .map(|e| e.digest)
                    .filter(|d| !d.is_zero());
                let verdict = if fc.final_size != f.written {
                    Some((NackReason::SizeMismatch, format!(
                        "close announces {} bytes, received {}",
                        fc.final_size, f.written
                    )))
                } else if computed != fc.digest {
                    Some((
                        NackReason::DigestMismatch,
                        format!("wire digest {} != sink digest {}", fc.digest, computed),
                    ))
                } else if manifest_digest.map(|d| d != computed).unwrap_or(false) {
                    Some((
                        NackReason::DigestMismatch,
                        "sink digest disagrees with the announced manifest".to_string(),
                    ))
                } else {
                    None
                };
                match verdict {
                    Some((reason, msg)) => {
                        discard_partial(f);
                        nack_file!(fc.file_index, reason, msg);
                    }
                    None => {
                        if let SinkFile::Disk { mut file, path } = f.sink {
                            if let Err(e) = file.flush() {
                                let _ = fs::remove_file(path);
                                nack_file!(fc.file_index, NackReason::WriteFailure, e);
                                continue;
                            }
                        }
                        {
                            let mut c = session.counters.lock().unwrap();
                            c.files_ok += 1;
                            c.bytes_ok += f.written;
                        }
                        let _ = conn.send(&Frame::new(
                            FrameType::Ack,
                            Ack {
                                file_index: Some(fc.file_index),
                            }
                            .encode(),
                        ));
                    }
                }
            }
            FrameType::Ack => {
                let _ = conn.send(&Frame::new(FrameType::Ack, Ack { file_index: None }.encode()));
            }
            FrameType::Bye => {
                let _ = conn.send(&Frame::empty(FrameType::Bye));
                break;
            }
            _ => break,
        }
    }
    // leftover handles (client vanished mid-file) are dropped; a re-sent
    // file recreates its sink path from scratch
}

fn discard_partial(f: OpenFile) {
    if let SinkFile::Disk { path, .. } = f.sink {
        let _ = fs::remove_file(path);
    }
    let _ = f.relative;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_path_sanitizer_rejects_escapes() {
        assert!(sanitize_relative("d0000/f0000000.dat").is_some());
        assert!(sanitize_relative("plain.dat").is_some());
        assert!(sanitize_relative("/etc/passwd").is_none());
        assert!(sanitize_relative("../escape").is_none());
        assert!(sanitize_relative("a/../../b").is_none());
        assert!(sanitize_relative("").is_none());
        assert!(sanitize_relative("./x").is_none());
    }
}
