//! Burst-buffer staging: concurrent local copy with digest verification.
//!
//! Staging throughput is reported in the same shape as WAN transfers so the
//! two can be compared directly; a staging leg slower than the WAN leg is
//! the bottleneck. Files already present and verified at the destination
//! are skipped, which is what makes an interrupted job resumable.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use super::{IntegrityStatus, MoverError, StagingJob, TransferResult};
use crate::dataset::{digest_file, DigestState, ManifestEntry};

const COPY_CHUNK: usize = 1 << 20;

fn copy_verified(from: &Path, to: &Path, entry: &ManifestEntry) -> Result<u64, String> {
    let src_path = from.join(&entry.relative_path);
    let dst_path = to.join(&entry.relative_path);
    if let Some(parent) = dst_path.parent() {
        fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    let mut src = File::open(&src_path).map_err(|e| format!("open source: {e}"))?;
    let mut dst = File::create(&dst_path).map_err(|e| format!("create destination: {e}"))?;
    let mut digest = DigestState::new();
    let mut buf = vec![0u8; COPY_CHUNK];
    let mut copied = 0u64;
    loop {
        let n = src.read(&mut buf).map_err(|e| format!("read: {e}"))?;
        if n == 0 {
            break;
        }
        digest.update(&buf[..n]);
        if let Err(e) = dst.write_all(&buf[..n]) {
            drop(dst);
            let _ = fs::remove_file(&dst_path);
            return Err(format!("write: {e}"));
        }
        copied += n as u64;
    }
    dst.flush().map_err(|e| format!("flush: {e}"))?;
    drop(dst);
    if copied != entry.size {
        let _ = fs::remove_file(&dst_path);
        return Err(format!("source held {copied} bytes, manifest says {}", entry.size));
    }
    if digest.finish() != entry.digest {
        let _ = fs::remove_file(&dst_path);
        return Err("digest mismatch after copy".to_string());
    }
    Ok(copied)
}

fn already_staged(to: &Path, entry: &ManifestEntry) -> bool {
    let dst = to.join(&entry.relative_path);
    match fs::metadata(&dst) {
        Ok(md) if md.len() == entry.size => matches!(
            digest_file(&dst),
            Ok((size, digest)) if size == entry.size && digest == entry.digest
        ),
        _ => false,
    }
}

/// Run one staging job. `bytes_moved` counts bytes copied by this
/// invocation; files found already verified at the destination count as ok
/// without recopying.
pub fn stage(job: &StagingJob) -> Result<TransferResult, MoverError> {
    job.validate()?;
    fs::create_dir_all(&job.to)?;

    let t0 = Instant::now();
    let worker_count = rayon::current_num_threads().max(1);
    let per_worker: Vec<AtomicU64> = (0..worker_count).map(|_| AtomicU64::new(0)).collect();
    let files_ok = AtomicU64::new(0);
    let skipped = AtomicU64::new(0);
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());

    job.manifest.entries.par_iter().for_each(|entry| {
        if already_staged(&job.to, entry) {
            files_ok.fetch_add(1, Ordering::Relaxed);
            skipped.fetch_add(1, Ordering::Relaxed);
            return;
        }
        match copy_verified(&job.from, &job.to, entry) {
            Ok(copied) => {
                files_ok.fetch_add(1, Ordering::Relaxed);
                let slot = rayon::current_thread_index().unwrap_or(0) % worker_count;
                per_worker[slot].fetch_add(copied, Ordering::Relaxed);
            }
            Err(e) => {
                failures
                    .lock()
                    .unwrap()
                    .push(format!("{}: {e}", entry.relative_path));
            }
        }
    });

    let failures = failures.into_inner().unwrap();
    let files_ok = files_ok.into_inner();
    let files_failed = failures.len() as u64;
    let per_stream_bytes: Vec<u64> = per_worker.into_iter().map(|a| a.into_inner()).collect();
    let bytes_moved = per_stream_bytes.iter().sum();
    let integrity = if files_ok + files_failed == 0 {
        IntegrityStatus::Skipped
    } else if files_failed == 0 {
        IntegrityStatus::Verified
    } else {
        IntegrityStatus::Failed
    };
    Ok(TransferResult::new(
        bytes_moved,
        t0.elapsed(),
        files_ok,
        files_failed,
        integrity,
        per_stream_bytes,
        failures,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, verify_dataset_at, DatasetMode, DatasetSpec};
    use crate::mover::StageDirection;
    use tempfile::TempDir;

    fn dataset(tmp: &TempDir, name: &str) -> crate::dataset::DatasetManifest {
        generate_dataset(&DatasetSpec {
            file_size: 64 * 1024,
            file_count: 6,
            root_path: tmp.path().join(name),
            content_seed: 11,
            mode: DatasetMode::Bulk,
        })
        .unwrap()
    }

    #[test]
    fn stage_in_then_out_round_trips() {
        let tmp = TempDir::new().unwrap();
        let manifest = dataset(&tmp, "production");
        let buffer = tmp.path().join("burst-buffer");
        let job = StagingJob {
            from: manifest.spec.root_path.clone(),
            to: buffer.clone(),
            manifest: manifest.clone(),
            direction: StageDirection::StageIn,
        };
        let res = stage(&job).unwrap();
        assert_eq!(res.files_ok, 6);
        assert_eq!(res.bytes_moved, 6 * 64 * 1024);
        assert_eq!(res.integrity, IntegrityStatus::Verified);
        assert!(res.throughput_bps > 0.0);
        assert!(verify_dataset_at(&manifest, &buffer).unwrap().is_intact());

        let back = tmp.path().join("production-restored");
        let out = StagingJob {
            from: buffer,
            to: back.clone(),
            manifest: manifest.clone(),
            direction: StageDirection::StageOut,
        };
        stage(&out).unwrap();
        assert!(verify_dataset_at(&manifest, &back).unwrap().is_intact());
    }

    #[test]
    fn resume_skips_verified_files() {
        let tmp = TempDir::new().unwrap();
        let manifest = dataset(&tmp, "src");
        let dst = tmp.path().join("dst");
        let job = StagingJob {
            from: manifest.spec.root_path.clone(),
            to: dst.clone(),
            manifest: manifest.clone(),
            direction: StageDirection::StageIn,
        };
        let first = stage(&job).unwrap();
        assert_eq!(first.bytes_moved, manifest.total_bytes);
        let second = stage(&job).unwrap();
        assert_eq!(second.files_ok, 6);
        assert_eq!(second.bytes_moved, 0, "verified files are not recopied");
    }

    #[test]
    fn corrupted_source_file_is_tallied_not_fatal() {
        let tmp = TempDir::new().unwrap();
        let manifest = dataset(&tmp, "src");
        // corrupt one source file after manifest capture
        let victim = manifest.spec.root_path.join(&manifest.entries[2].relative_path);
        fs::write(&victim, vec![0u8; 64 * 1024]).unwrap();
        let job = StagingJob {
            from: manifest.spec.root_path.clone(),
            to: tmp.path().join("dst"),
            manifest: manifest.clone(),
            direction: StageDirection::StageIn,
        };
        let res = stage(&job).unwrap();
        assert_eq!(res.files_ok, 5);
        assert_eq!(res.files_failed, 1);
        assert_eq!(res.integrity, IntegrityStatus::Failed);
        assert_eq!(res.failures.len(), 1);
    }
}
