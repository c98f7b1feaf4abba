//! The sending side of streaming transfers: follow a growing directory and
//! deliver bytes while the writer is still producing them.
//!
//! A watcher polls the watch root; data connections receive per-file
//! commands (open, send-up-to, finalize) so all bytes of one file flow in
//! order on one stream. The receiver learns committed sizes from
//! GROWTH_MARK frames and never polls its filesystem. The session ends when
//! nothing has grown for the quiescence window; a shrinking source file is
//! a protocol error and fails that file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use super::client::{await_verdict, open_session_conn, send_manifest_text, socket_options, FileVerdict};
use super::conn::Conn;
use super::{IntegrityStatus, MoverError, SourceEndpoint, TransferResult, TransferSpec};
use crate::dataset::{Digest, DigestState};
use crate::protocol::{
    CloseStatus, ConnectionRole, FileClose, FileOpen, Frame, FrameType, GrowthMark, SessionHello,
    TransferMode, PROTOCOL_VERSION,
};

const POLL_INTERVAL: Duration = Duration::from_millis(25);

enum Cmd {
    Open { index: u64, rel: String },
    SendTo { index: u64, upto: u64 },
    Finalize { index: u64, expected: u64 },
    Shutdown,
}

struct SendingFile {
    rel: String,
    abs: PathBuf,
    sent: u64,
    digest: DigestState,
    dead: bool,
}

#[derive(Default)]
struct StreamOutcome {
    delivered_bytes: u64,
    files_ok: u64,
    failures: Vec<String>,
    last_ack: Option<Instant>,
}

struct StreamWorker<'a> {
    spec: &'a TransferSpec,
    digest: Digest,
    root: &'a Path,
    conn: Conn,
    files: HashMap<u64, SendingFile>,
    out: StreamOutcome,
}

impl<'a> StreamWorker<'a> {
    fn hello(spec: &TransferSpec, digest: Digest) -> SessionHello {
        SessionHello {
            protocol_version: PROTOCOL_VERSION,
            role: ConnectionRole::Data,
            mode: TransferMode::Streaming,
            stream_count: spec.stream_count,
            encryption: spec.encryption,
            manifest_digest: digest,
        }
    }

    fn run(mut self, rx: mpsc::Receiver<Cmd>) -> StreamOutcome {
        while let Ok(cmd) = rx.recv() {
            let result = match cmd {
                Cmd::Open { index, rel } => self.handle_open(index, rel),
                Cmd::SendTo { index, upto } => self.handle_send_to(index, upto),
                Cmd::Finalize { index, expected } => self.handle_finalize(index, expected),
                Cmd::Shutdown => break,
            };
            if let Err(e) = result {
                // one reconnect per break; every live file restarts from zero
                if self.reconnect_and_restart().is_err() {
                    let msg = format!("stream abandoned after reconnect failure: {e}");
                    for f in self.files.values().filter(|f| !f.dead) {
                        self.out.failures.push(format!("{}: {msg}", f.rel));
                    }
                    return self.out;
                }
            }
        }
        let _ = self.conn.send(&Frame::empty(FrameType::Bye));
        let _ = self.conn.recv();
        self.out
    }

    fn handle_open(&mut self, index: u64, rel: String) -> Result<(), MoverError> {
        let abs = self.root.join(&rel);
        self.conn.send(&Frame::new(
            FrameType::FileOpen,
            FileOpen {
                file_index: index,
                announced_size: 0,
                relative_path: rel.clone(),
            }
            .encode(),
        ))?;
        self.files.insert(
            index,
            SendingFile {
                rel,
                abs,
                sent: 0,
                digest: DigestState::new(),
                dead: false,
            },
        );
        Ok(())
    }

    fn handle_send_to(&mut self, index: u64, upto: u64) -> Result<(), MoverError> {
        let chunk_size = self.spec.chunk_size as usize;
        let Some(f) = self.files.get_mut(&index) else {
            return Ok(());
        };
        if f.dead || upto <= f.sent {
            return Ok(());
        }
        let mut src = match File::open(&f.abs) {
            Ok(s) => s,
            Err(e) => return Self::abort_file(&mut self.conn, &mut self.out, f, index, &e.to_string()),
        };
        if src.seek(SeekFrom::Start(f.sent)).is_err() {
            return Self::abort_file(&mut self.conn, &mut self.out, f, index, "seek failed");
        }
        let mut buf = vec![0u8; chunk_size];
        while f.sent < upto {
            let want = ((upto - f.sent).min(buf.len() as u64)) as usize;
            let n = src.read(&mut buf[..want])?;
            if n == 0 {
                // shrank under us
                return Self::abort_file(&mut self.conn, &mut self.out, f, index, "source file shrank");
            }
            f.digest.update(&buf[..n]);
            self.conn
                .send(&crate::protocol::encode_chunk(index, f.sent, &buf[..n])?)?;
            f.sent += n as u64;
        }
        self.conn.send(&Frame::new(
            FrameType::GrowthMark,
            GrowthMark {
                file_index: index,
                committed_size: f.sent,
            }
            .encode(),
        ))?;
        Ok(())
    }

    fn handle_finalize(&mut self, index: u64, expected: u64) -> Result<(), MoverError> {
        self.handle_send_to(index, expected)?;
        let Some(f) = self.files.get_mut(&index) else {
            return Ok(());
        };
        if f.dead {
            return Ok(());
        }
        if f.sent != expected {
            return Self::abort_file(&mut self.conn, &mut self.out, f, index, "size changed at finalize");
        }
        self.conn.send(&Frame::new(
            FrameType::FileClose,
            FileClose {
                file_index: index,
                final_size: f.sent,
                status: CloseStatus::Ok,
                digest: f.digest.clone().finish(),
            }
            .encode(),
        ))?;
        match await_verdict(&mut self.conn, index)? {
            FileVerdict::Acked => {
                self.out.files_ok += 1;
                self.out.delivered_bytes += f.sent;
                self.out.last_ack = Some(Instant::now());
                f.dead = true;
            }
            FileVerdict::Nacked(nack) => {
                self.out
                    .failures
                    .push(format!("{}: {:?}: {}", f.rel, nack.reason, nack.message));
                f.dead = true;
            }
        }
        Ok(())
    }

    /// Declare a file failed source-side: FILE_CLOSE(aborted), consume the
    /// NACK, mark dead.
    fn abort_file(
        conn: &mut Conn,
        out: &mut StreamOutcome,
        f: &mut SendingFile,
        index: u64,
        why: &str,
    ) -> Result<(), MoverError> {
        f.dead = true;
        conn.send(&Frame::new(
            FrameType::FileClose,
            FileClose {
                file_index: index,
                final_size: f.sent,
                status: CloseStatus::Aborted,
                digest: Digest::ZERO,
            }
            .encode(),
        ))?;
        let _ = await_verdict(conn, index)?;
        out.failures.push(format!("{}: {why}", f.rel));
        Ok(())
    }

    fn reconnect_and_restart(&mut self) -> Result<(), MoverError> {
        let hello = Self::hello(self.spec, self.digest);
        self.conn = open_session_conn(
            &self.spec.peer_address,
            &socket_options(self.spec),
            self.spec.io_timeout,
            &hello,
        )?;
        // replay every live file from scratch on the fresh connection
        let indices: Vec<u64> = self
            .files
            .iter()
            .filter(|(_, f)| !f.dead)
            .map(|(i, _)| *i)
            .collect();
        for index in indices {
            let (rel, resume_to) = {
                let f = self.files.get_mut(&index).unwrap();
                f.digest = DigestState::new();
                let resume_to = f.sent;
                f.sent = 0;
                (f.rel.clone(), resume_to)
            };
            self.conn.send(&Frame::new(
                FrameType::FileOpen,
                FileOpen {
                    file_index: index,
                    announced_size: 0,
                    relative_path: rel,
                }
                .encode(),
            ))?;
            self.handle_send_to(index, resume_to)?;
        }
        Ok(())
    }
}

struct WatchedFile {
    index: u64,
    stream: usize,
    last_size: u64,
}

fn scan_tree(root: &Path) -> std::io::Result<Vec<(String, u64)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, u64)>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if let Ok(md) = entry.metadata() {
                let rel = path
                    .strip_prefix(root)
                    .expect("walked path is under root")
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, md.len()));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Follow `watch_root` and deliver every byte appended while the session
/// runs. The session ends once nothing has grown for `quiescence`; bytes
/// appended after that window closes belong to the next session.
pub fn transfer_streaming(
    spec: &TransferSpec,
    watch_root: &Path,
    quiescence: Duration,
) -> Result<TransferResult, MoverError> {
    spec.validate()?;
    if spec.mode != TransferMode::Streaming {
        return Err(MoverError::InvalidSpec("transfer_streaming requires streaming mode".into()));
    }
    match &spec.source {
        SourceEndpoint::Directory(root) if root != watch_root => {
            return Err(MoverError::InvalidSpec(
                "spec source directory and watch_root disagree".into(),
            ))
        }
        _ => {}
    }
    if !watch_root.is_dir() {
        return Err(MoverError::InvalidSpec(format!(
            "watch root {} is not a directory",
            watch_root.display()
        )));
    }

    // session descriptor: streaming has no upfront inventory, so the
    // "manifest" is an opaque identity the receiver checks against HELLO
    let nonce: u64 = rand::random();
    let descriptor = format!(
        "#wanlab-streaming-session v1 root={} nonce={nonce:016x}\n",
        watch_root.display()
    );
    let digest = Digest::of_bytes(descriptor.as_bytes());
    let t0 = Instant::now();

    let mut control = open_session_conn(
        &spec.peer_address,
        &socket_options(spec),
        spec.io_timeout,
        &SessionHello {
            protocol_version: PROTOCOL_VERSION,
            role: ConnectionRole::Control,
            mode: TransferMode::Streaming,
            stream_count: spec.stream_count,
            encryption: spec.encryption,
            manifest_digest: digest,
        },
    )?;
    send_manifest_text(&mut control, descriptor.as_bytes())?;

    let stream_count = spec.stream_count as usize;
    let mut senders = Vec::with_capacity(stream_count);
    let mut loads = vec![0u64; stream_count];
    let outcome = std::thread::scope(|scope| -> Result<Vec<StreamOutcome>, MoverError> {
        let mut joins = Vec::with_capacity(stream_count);
        for _ in 0..stream_count {
            let (tx, rx) = mpsc::channel::<Cmd>();
            let conn = open_session_conn(
                &spec.peer_address,
                &socket_options(spec),
                spec.io_timeout,
                &StreamWorker::hello(spec, digest),
            )?;
            let worker = StreamWorker {
                spec,
                digest,
                root: watch_root,
                conn,
                files: HashMap::new(),
                out: StreamOutcome::default(),
            };
            senders.push(tx);
            joins.push(scope.spawn(move || worker.run(rx)));
        }

        let mut watched: HashMap<String, WatchedFile> = HashMap::new();
        let mut next_index = 0u64;
        let mut last_change = Instant::now();
        loop {
            let snapshot = scan_tree(watch_root)?;
            let mut changed = false;
            for (rel, size) in snapshot {
                match watched.get_mut(&rel) {
                    None => {
                        let stream = loads
                            .iter()
                            .enumerate()
                            .min_by_key(|(_, l)| **l)
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        let index = next_index;
                        next_index += 1;
                        let _ = senders[stream].send(Cmd::Open {
                            index,
                            rel: rel.clone(),
                        });
                        if size > 0 {
                            let _ = senders[stream].send(Cmd::SendTo { index, upto: size });
                        }
                        loads[stream] += size;
                        watched.insert(
                            rel,
                            WatchedFile {
                                index,
                                stream,
                                last_size: size,
                            },
                        );
                        changed = true;
                    }
                    Some(w) if size > w.last_size => {
                        loads[w.stream] += size - w.last_size;
                        w.last_size = size;
                        let _ = senders[w.stream].send(Cmd::SendTo {
                            index: w.index,
                            upto: size,
                        });
                        changed = true;
                    }
                    Some(w) if size < w.last_size => {
                        // shrinkage: the worker's bounded read will abort it,
                        // nudge it to look
                        let _ = senders[w.stream].send(Cmd::SendTo {
                            index: w.index,
                            upto: w.last_size,
                        });
                        changed = true;
                    }
                    Some(_) => {}
                }
            }
            if changed {
                last_change = Instant::now();
            }
            if last_change.elapsed() >= quiescence {
                break;
            }
            std::thread::sleep(POLL_INTERVAL);
        }

        for w in watched.values() {
            let _ = senders[w.stream].send(Cmd::Finalize {
                index: w.index,
                expected: w.last_size,
            });
        }
        for tx in &senders {
            let _ = tx.send(Cmd::Shutdown);
        }
        drop(senders);
        Ok(joins.into_iter().map(|j| j.join().expect("stream worker panicked")).collect())
    })?;

    let _ = control.send(&Frame::empty(FrameType::EndOfSource));
    let last_ack = outcome.iter().filter_map(|o| o.last_ack).max().unwrap_or_else(Instant::now);
    let wall = last_ack.duration_since(t0);
    let _ = control.send(&Frame::empty(FrameType::Bye));
    let _ = control.recv();

    let files_ok: u64 = outcome.iter().map(|o| o.files_ok).sum();
    let bytes_moved: u64 = outcome.iter().map(|o| o.delivered_bytes).sum();
    let failures: Vec<String> = outcome.iter().flat_map(|o| o.failures.iter().cloned()).collect();
    let files_failed = failures.len() as u64;
    let per_stream_bytes = outcome.iter().map(|o| o.delivered_bytes).collect();
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
