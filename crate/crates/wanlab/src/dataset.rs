//! Synthetic datasets and their integrity manifests.
//!
//! A dataset is a directory of uniform-size files with deterministic,
//! incompressible pseudo-random content derived from `(content_seed, file
//! index)`. The manifest records every entry's relative path, size and
//! SHA-256 digest and is the unit of integrity bookkeeping for transfers:
//! `verify_dataset(generate_dataset(spec))` is always empty.
//!
//! Manifest file format (version 1), one entry per line after the header:
//!
//! ```text
//! #wanlab-manifest v1 mode=bulk file_size=1024 file_count=2 content_seed=7 total_bytes=2048 root=/data/set
//! d0000/f0000000.dat<TAB>1024<TAB><64 hex digits>
//! d0000/f0000001.dat<TAB>1024<TAB><64 hex digits>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Files per manifest shard directory. A million files in one directory
/// makes metadata operations the bottleneck instead of the mover.
pub const SHARD_CAPACITY: u64 = 4096;

/// Hard cap on files per dataset (the hyperscale file-count knob).
pub const MAX_FILE_COUNT: u64 = 1 << 20;

/// Full-scale aggregate target per dataset when no budget is given.
pub const FULL_SCALE_AGGREGATE: u64 = 1 << 40;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
pub const TIB: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("insufficient space under {root}: need {needed} bytes, {available} available")]
    InsufficientSpace {
        root: PathBuf,
        needed: u64,
        available: u64,
    },
    #[error("generation failed after {} partial file(s) were written: {source}", partial_files.len())]
    PartialFailure {
        partial_files: Vec<PathBuf>,
        source: io::Error,
    },
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 256-bit content digest (SHA-256), printed as lowercase hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of_bytes(data: &[u8]) -> Self {
        Digest(Sha256::digest(data).into())
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 32]
    }

    pub fn parse_hex(s: &str) -> Option<Self> {
        let raw = hex::decode(s).ok()?;
        let arr: [u8; 32] = raw.try_into().ok()?;
        Some(Digest(arr))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::parse_hex(&s).ok_or_else(|| serde::de::Error::custom("bad digest hex"))
    }
}

/// Incremental SHA-256 wrapper used wherever bytes are hashed in flight.
#[derive(Clone)]
pub struct DigestState(Sha256);

impl DigestState {
    pub fn new() -> Self {
        DigestState(Sha256::new())
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finish(self) -> Digest {
        Digest(self.0.finalize().into())
    }
}

impl Default for DigestState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    Bulk,
    StreamingSource,
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetMode::Bulk => f.write_str("bulk"),
            DatasetMode::StreamingSource => f.write_str("streaming-source"),
        }
    }
}

impl std::str::FromStr for DatasetMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bulk" => Ok(DatasetMode::Bulk),
            "streaming-source" => Ok(DatasetMode::StreamingSource),
            other => Err(format!("unknown dataset mode {other:?}")),
        }
    }
}

/// Declarative description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Uniform size of every file; must be a power of two.
    pub file_size: u64,
    pub file_count: u64,
    pub root_path: PathBuf,
    pub content_seed: u64,
    pub mode: DatasetMode,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.file_size == 0 || !self.file_size.is_power_of_two() {
            return Err(DatasetError::InvalidSpec(format!(
                "file_size {} is not a power of two",
                self.file_size
            )));
        }
        if self.file_count == 0 {
            return Err(DatasetError::InvalidSpec("file_count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_bytes(&self) -> u64 {
        self.file_size * self.file_count
    }

    /// Relative path of entry `index`, sharded so no directory holds more
    /// than [`SHARD_CAPACITY`] files.
    pub fn entry_path(index: u64) -> String {
        format!("d{:04}/f{:07}.dat", index / SHARD_CAPACITY, index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub relative_path: String,
    pub size: u64,
    pub digest: Digest,
}

/// Realized inventory of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
    pub total_bytes: u64,
}

impl DatasetManifest {
    /// Canonical line-delimited serialization; the manifest file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "#wanlab-manifest v1 mode={} file_size={} file_count={} content_seed={} total_bytes={} root={}\n",
            self.spec.mode,
            self.spec.file_size,
            self.spec.file_count,
            self.spec.content_seed,
            self.total_bytes,
            self.spec.root_path.display()
        ));
        for e in &self.entries {
            out.push_str(&format!("{}\t{}\t{}\n", e.relative_path, e.size, e.digest));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::ManifestParse {
            line: 1,
            msg: "empty manifest".into(),
        })?;
        let rest = header.strip_prefix("#wanlab-manifest v1 ").ok_or_else(|| {
            DatasetError::ManifestParse {
                line: 1,
                msg: "missing '#wanlab-manifest v1' header".into(),
            }
        })?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for kv in rest.split(' ') {
            if let Some((k, v)) = kv.split_once('=') {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| {
            fields.get(k).copied().ok_or(DatasetError::ManifestParse {
                line: 1,
                msg: format!("header missing field {k}"),
            })
        };
        let parse_u64 = |k: &str, v: &str| {
            v.parse::<u64>().map_err(|_| DatasetError::ManifestParse {
                line: 1,
                msg: format!("bad integer for {k}: {v:?}"),
            })
        };
        let spec = DatasetSpec {
            file_size: parse_u64("file_size", get("file_size")?)?,
            file_count: parse_u64("file_count", get("file_count")?)?,
            root_path: PathBuf::from(get("root")?),
            content_seed: parse_u64("content_seed", get("content_seed")?)?,
            mode: get("mode")?.parse().map_err(|msg| DatasetError::ManifestParse { line: 1, msg })?,
        };
        let total_bytes = parse_u64("total_bytes", get("total_bytes")?)?;

        let mut entries = Vec::new();
        let mut sum = 0u64;
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (path, size, digest) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(s), Some(d), None) => (p, s, d),
                _ => {
                    return Err(DatasetError::ManifestParse {
                        line: idx + 1,
                        msg: "expected <path>\\t<size>\\t<digest>".into(),
                    })
                }
            };
            let size = size.parse::<u64>().map_err(|_| DatasetError::ManifestParse {
                line: idx + 1,
                msg: format!("bad size {size:?}"),
            })?;
            let digest = Digest::parse_hex(digest).ok_or(DatasetError::ManifestParse {
                line: idx + 1,
                msg: "bad digest hex".into(),
            })?;
            sum += size;
            entries.push(ManifestEntry {
                relative_path: path.to_string(),
                size,
                digest,
            });
        }
        if sum != total_bytes {
            return Err(DatasetError::ManifestParse {
                line: 1,
                msg: format!("total_bytes {total_bytes} != sum of entry sizes {sum}"),
            });
        }
        Ok(DatasetManifest {
            spec,
            entries,
            total_bytes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Ok(Self::from_text(&fs::read_to_string(path)?)?)
    }

    /// Digest of the canonical serialization; identifies a dataset (and a
    /// mover session) uniquely.
    pub fn digest(&self) -> Digest {
        Digest::of_bytes(self.to_text().as_bytes())
    }
}

/// Deterministic keyed pseudo-random content stream for one file.
///
/// ChaCha8 keyed by SHA-256(tag, content_seed, file_index): byte-identical
/// across runs and hosts, and incompressible so transfer results cannot be
/// flattered by compression anywhere in the path.
pub struct ContentStream {
    rng: ChaCha8Rng,
}

impl ContentStream {
    pub fn new(content_seed: u64, file_index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"wanlab-content-v1");
        h.update(content_seed.to_le_bytes());
        h.update(file_index.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        ContentStream {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.rng.fill_bytes(buf);
    }
}

fn free_space_bytes(path: &Path) -> io::Result<u64> {
    use std::os::unix::ffi::OsStrExt;
    let c = std::ffi::CString::new(path.as_os_str().as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "path contains NUL"))?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(st.f_bavail as u64 * st.f_frsize as u64)
}

const WRITE_CHUNK: usize = 1 << 20;

fn write_one_file(
    root: &Path,
    spec: &DatasetSpec,
    index: u64,
) -> Result<ManifestEntry, io::Error> {
    let rel = DatasetSpec::entry_path(index);
    let abs = root.join(&rel);
    if let Some(parent) = abs.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = File::create(&abs)?;
    let mut stream = ContentStream::new(spec.content_seed, index);
    let mut digest = DigestState::new();
    let mut remaining = spec.file_size;
    let mut buf = vec![0u8; WRITE_CHUNK.min(spec.file_size.max(1) as usize)];
    while remaining > 0 {
        let n = remaining.min(buf.len() as u64) as usize;
        stream.fill(&mut buf[..n]);
        digest.update(&buf[..n]);
        f.write_all(&buf[..n])?;
        remaining -= n as u64;
    }
    f.flush()?;
    Ok(ManifestEntry {
        relative_path: rel,
        size: spec.file_size,
        digest: digest.finish(),
    })
}

/// Generate a dataset on disk and return its manifest.
///
/// Free space is checked before any write; on partial failure the error
/// names every file that was (possibly partially) written so the caller can
/// clean up, and no manifest is produced.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<DatasetManifest, DatasetError> {
    spec.validate()?;
    fs::create_dir_all(&spec.root_path)?;
    let needed = spec.total_bytes();
    let available = free_space_bytes(&spec.root_path)?;
    if available < needed + MIB {
        return Err(DatasetError::InsufficientSpace {
            root: spec.root_path.clone(),
            needed,
            available,
        });
    }

    let results: Vec<Result<ManifestEntry, io::Error>> = (0..spec.file_count)
        .into_par_iter()
        .map(|index| write_one_file(&spec.root_path, spec, index))
        .collect();

    let mut entries = Vec::with_capacity(results.len());
    let mut first_err: Option<io::Error> = None;
    let mut partial = Vec::new();
    for (index, res) in results.into_iter().enumerate() {
        match res {
            Ok(e) => {
                partial.push(spec.root_path.join(&e.relative_path));
                entries.push(e);
            }
            Err(e) => {
                partial.push(spec.root_path.join(DatasetSpec::entry_path(index as u64)));
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(source) = first_err {
        return Err(DatasetError::PartialFailure {
            partial_files: partial,
            source,
        });
    }
    let total_bytes = entries.iter().map(|e| e.size).sum();
    Ok(DatasetManifest {
        spec: spec.clone(),
        entries,
        total_bytes,
    })
}

/// Write a dataset incrementally: every file grows by `step_bytes` per
/// append, with `pause` between appends. Content and final manifest are
/// identical to [`generate_dataset`] of the same spec; this is the writer
/// side of streaming-transfer exercises.
pub fn write_dataset_progressively(
    spec: &DatasetSpec,
    step_bytes: u64,
    pause: Duration,
) -> Result<DatasetManifest, DatasetError> {
    spec.validate()?;
    if step_bytes == 0 {
        return Err(DatasetError::InvalidSpec("step_bytes must be >= 1".into()));
    }
    fs::create_dir_all(&spec.root_path)?;
    let mut entries = Vec::new();
    for index in 0..spec.file_count {
        let rel = DatasetSpec::entry_path(index);
        let abs = spec.root_path.join(&rel);
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(&abs)?;
        let mut stream = ContentStream::new(spec.content_seed, index);
        let mut digest = DigestState::new();
        let mut remaining = spec.file_size;
        let mut buf = vec![0u8; step_bytes.min(WRITE_CHUNK as u64).max(1) as usize];
        while remaining > 0 {
            let mut step = step_bytes.min(remaining);
            while step > 0 {
                let n = step.min(buf.len() as u64) as usize;
                stream.fill(&mut buf[..n]);
                digest.update(&buf[..n]);
                f.write_all(&buf[..n])?;
                step -= n as u64;
            }
            f.flush()?;
            remaining = remaining.saturating_sub(step_bytes);
            if remaining > 0 && !pause.is_zero() {
                std::thread::sleep(pause);
            }
        }
        entries.push(ManifestEntry {
            relative_path: rel,
            size: spec.file_size,
            digest: digest.finish(),
        });
    }
    let total_bytes = entries.iter().map(|e| e.size).sum();
    Ok(DatasetManifest {
        spec: spec.clone(),
        entries,
        total_bytes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FindingKind {
    Missing,
    SizeDeviation { expected: u64, actual: u64 },
    DigestMismatch { expected: Digest, actual: Digest },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub relative_path: String,
    pub kind: FindingKind,
}

/// Result of re-digesting a dataset against its manifest. Empty findings
/// means the dataset is intact.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerificationReport {
    pub findings: Vec<Finding>,
    pub files_checked: u64,
    pub bytes_checked: u64,
}

impl VerificationReport {
    pub fn is_intact(&self) -> bool {
        self.findings.is_empty()
    }
}

pub fn digest_file(path: &Path) -> io::Result<(u64, Digest)> {
    let mut f = File::open(path)?;
    let mut digest = DigestState::new();
    let mut buf = vec![0u8; WRITE_CHUNK];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        digest.update(&buf[..n]);
        total += n as u64;
    }
    Ok((total, digest.finish()))
}

/// Verify a dataset rooted at the manifest's recorded root.
pub fn verify_dataset(manifest: &DatasetManifest) -> Result<VerificationReport, DatasetError> {
    verify_dataset_at(manifest, &manifest.spec.root_path)
}

/// Verify a dataset relocated under `root` (e.g. a transfer sink).
pub fn verify_dataset_at(
    manifest: &DatasetManifest,
    root: &Path,
) -> Result<VerificationReport, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("dataset root {} is not a readable directory", root.display()),
        )));
    }
    let findings = Mutex::new(Vec::new());
    let bytes = Mutex::new(0u64);
    let errors = Mutex::new(Vec::new());
    manifest.entries.par_iter().for_each(|entry| {
        let abs = root.join(&entry.relative_path);
        match digest_file(&abs) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                findings.lock().unwrap().push(Finding {
                    relative_path: entry.relative_path.clone(),
                    kind: FindingKind::Missing,
                });
            }
            Err(e) => errors.lock().unwrap().push(e),
            Ok((size, digest)) => {
                *bytes.lock().unwrap() += size;
                if size != entry.size {
                    findings.lock().unwrap().push(Finding {
                        relative_path: entry.relative_path.clone(),
                        kind: FindingKind::SizeDeviation {
                            expected: entry.size,
                            actual: size,
                        },
                    });
                } else if digest != entry.digest {
                    findings.lock().unwrap().push(Finding {
                        relative_path: entry.relative_path.clone(),
                        kind: FindingKind::DigestMismatch {
                            expected: entry.digest,
                            actual: digest,
                        },
                    });
                }
            }
        }
    });
    if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
        return Err(DatasetError::Io(e));
    }
    let mut findings = findings.into_inner().unwrap();
    findings.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
    Ok(VerificationReport {
        findings,
        files_checked: manifest.entries.len() as u64,
        bytes_checked: bytes.into_inner().unwrap(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Bulk,
    Streaming,
}

impl fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeriesKind::Bulk => f.write_str("bulk"),
            SeriesKind::Streaming => f.write_str("streaming"),
        }
    }
}

/// An ordered power-of-two size series with one dataset spec per size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSeries {
    pub kind: SeriesKind,
    pub sizes: Vec<u64>,
    pub per_size_spec: BTreeMap<u64, DatasetSpec>,
}

/// Build the sweep series covering every power of two in `[min_size,
/// max_size]`.
///
/// Per-size file counts follow the downscaling rule `clamp(budget /
/// file_size, 1, 2^20)`; with no budget the full-scale aggregate (1 TiB)
/// applies, reproducing the 31-dataset bulk and 19-dataset streaming
/// full-scale series.
pub fn build_sweep_series(
    kind: SeriesKind,
    min_size: u64,
    max_size: u64,
    budget: Option<u64>,
    datasets_root: &Path,
    content_seed: u64,
) -> Result<SweepSeries, DatasetError> {
    for (name, v) in [("min_size", min_size), ("max_size", max_size)] {
        if v == 0 || !v.is_power_of_two() {
            return Err(DatasetError::InvalidSpec(format!(
                "{name} {v} is not a power of two"
            )));
        }
    }
    if min_size > max_size {
        return Err(DatasetError::InvalidSpec(format!(
            "min_size {min_size} > max_size {max_size}"
        )));
    }
    let budget = budget.unwrap_or(FULL_SCALE_AGGREGATE);
    if budget == 0 {
        return Err(DatasetError::InvalidSpec("budget must be >= 1 byte".into()));
    }
    let mode = match kind {
        SeriesKind::Bulk => DatasetMode::Bulk,
        SeriesKind::Streaming => DatasetMode::StreamingSource,
    };
    let mut sizes = Vec::new();
    let mut per_size_spec = BTreeMap::new();
    let mut size = min_size;
    loop {
        let file_count = (budget / size).clamp(1, MAX_FILE_COUNT);
        sizes.push(size);
        per_size_spec.insert(
            size,
            DatasetSpec {
                file_size: size,
                file_count,
                root_path: datasets_root.join(format!("{kind}-{size}")),
                content_seed,
                mode,
            },
        );
        if size >= max_size {
            break;
        }
        size *= 2;
    }
    Ok(SweepSeries {
        kind,
        sizes,
        per_size_spec,
    })
}

/// The full-scale bulk series: 1 KiB through 1 TiB, 31 sizes.
pub fn bulk_full_scale(datasets_root: &Path, content_seed: u64) -> SweepSeries {
    build_sweep_series(SeriesKind::Bulk, KIB, TIB, None, datasets_root, content_seed)
        .expect("constant bounds are valid")
}

/// The full-scale streaming series: 4 MiB through 1 TiB, 19 sizes.
pub fn streaming_full_scale(datasets_root: &Path, content_seed: u64) -> SweepSeries {
    build_sweep_series(SeriesKind::Streaming, 4 * MIB, TIB, None, datasets_root, content_seed)
        .expect("constant bounds are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Seek, SeekFrom};
    use tempfile::TempDir;

    fn small_spec(root: &Path) -> DatasetSpec {
        DatasetSpec {
            file_size: 4 * KIB,
            file_count: 8,
            root_path: root.to_path_buf(),
            content_seed: 42,
            mode: DatasetMode::Bulk,
        }
    }

    #[test]
    fn spec_arithmetic_matches_hyperscale_definition() {
        // 2^20 files of 1 KiB total exactly 1 GiB; shape only, no disk I/O.
        let spec = DatasetSpec {
            file_size: KIB,
            file_count: MAX_FILE_COUNT,
            root_path: PathBuf::from("/nonexistent"),
            content_seed: 0,
            mode: DatasetMode::Bulk,
        };
        assert_eq!(spec.total_bytes(), GIB);
        assert_eq!(spec.file_count, 1_048_576);
    }

    #[test]
    fn generation_is_deterministic() {
        let tmp = TempDir::new().unwrap();
        let a = generate_dataset(&DatasetSpec {
            root_path: tmp.path().join("a"),
            ..small_spec(tmp.path())
        })
        .unwrap();
        let b = generate_dataset(&DatasetSpec {
            root_path: tmp.path().join("b"),
            ..small_spec(tmp.path())
        })
        .unwrap();
        let da: Vec<_> = a.entries.iter().map(|e| e.digest).collect();
        let db: Vec<_> = b.entries.iter().map(|e| e.digest).collect();
        assert_eq!(da, db);
    }

    #[test]
    fn generated_totals_match_spec() {
        let tmp = TempDir::new().unwrap();
        let spec = DatasetSpec {
            file_size: 4 * MIB,
            file_count: 16,
            root_path: tmp.path().join("set"),
            content_seed: 7,
            mode: DatasetMode::Bulk,
        };
        let m = generate_dataset(&spec).unwrap();
        assert_eq!(m.entries.len(), 16);
        assert_eq!(m.total_bytes, 67_108_864);
        for e in &m.entries {
            assert_eq!(e.size, 4 * MIB);
            let on_disk = fs::metadata(spec.root_path.join(&e.relative_path)).unwrap().len();
            assert_eq!(on_disk, 4 * MIB);
        }
    }

    #[test]
    fn fresh_dataset_verifies_clean() {
        let tmp = TempDir::new().unwrap();
        let m = generate_dataset(&small_spec(&tmp.path().join("s"))).unwrap();
        let report = verify_dataset(&m).unwrap();
        assert!(report.is_intact());
        assert_eq!(report.files_checked, 8);
    }

    #[test]
    fn truncation_yields_exactly_one_size_finding() {
        let tmp = TempDir::new().unwrap();
        let m = generate_dataset(&small_spec(&tmp.path().join("s"))).unwrap();
        let victim = m.spec.root_path.join(&m.entries[3].relative_path);
        let f = OpenOptions::new().write(true).open(&victim).unwrap();
        f.set_len(4 * KIB - 1).unwrap();
        drop(f);
        let report = verify_dataset(&m).unwrap();
        assert_eq!(report.findings.len(), 1);
        assert_eq!(report.findings[0].relative_path, m.entries[3].relative_path);
        assert!(matches!(
            report.findings[0].kind,
            FindingKind::SizeDeviation { expected, actual } if expected == 4 * KIB && actual == 4 * KIB - 1
        ));
    }

    #[test]
    fn bit_flip_yields_exactly_one_digest_finding() {
        let tmp = TempDir::new().unwrap();
        let m = generate_dataset(&small_spec(&tmp.path().join("s"))).unwrap();
        let victim = m.spec.root_path.join(&m.entries[5].relative_path);
        let mut f = OpenOptions::new().read(true).write(true).open(&victim).unwrap();
        f.seek(SeekFrom::Start(1000)).unwrap();
        let mut byte = [0u8; 1];
        f.read_exact(&mut byte).unwrap();
        byte[0] ^= 0x01;
        f.seek(SeekFrom::Start(1000)).unwrap();
        f.write_all(&byte).unwrap();
        drop(f);
        let report = verify_dataset(&m).unwrap();
        assert_eq!(report.findings.len(), 1);
        assert!(matches!(report.findings[0].kind, FindingKind::DigestMismatch { .. }));
    }

    #[test]
    fn missing_file_reported() {
        let tmp = TempDir::new().unwrap();
        let m = generate_dataset(&small_spec(&tmp.path().join("s"))).unwrap();
        fs::remove_file(m.spec.root_path.join(&m.entries[0].relative_path)).unwrap();
        let report = verify_dataset(&m).unwrap();
        assert_eq!(report.findings.len(), 1);
        assert!(matches!(report.findings[0].kind, FindingKind::Missing));
    }

    #[test]
    fn manifest_round_trips_through_text() {
        let tmp = TempDir::new().unwrap();
        let m = generate_dataset(&small_spec(&tmp.path().join("s"))).unwrap();
        let path = tmp.path().join("m.manifest");
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(m, loaded);
        assert_eq!(m.digest(), loaded.digest());
    }

    #[test]
    fn manifest_parse_rejects_bad_input() {
        assert!(DatasetManifest::from_text("").is_err());
        assert!(DatasetManifest::from_text("#wrong header\n").is_err());
        let good = "#wanlab-manifest v1 mode=bulk file_size=1024 file_count=1 content_seed=0 total_bytes=1024 root=/x\n";
        // total_bytes disagrees with entries
        assert!(DatasetManifest::from_text(good).is_err());
    }

    #[test]
    fn progressive_writer_matches_bulk_generation() {
        let tmp = TempDir::new().unwrap();
        let spec = DatasetSpec {
            file_size: 64 * KIB,
            file_count: 3,
            root_path: tmp.path().join("prog"),
            content_seed: 99,
            mode: DatasetMode::StreamingSource,
        };
        let prog = write_dataset_progressively(&spec, 10_000, Duration::ZERO).unwrap();
        let bulk_spec = DatasetSpec {
            root_path: tmp.path().join("bulk"),
            mode: DatasetMode::Bulk,
            ..spec.clone()
        };
        let bulk = generate_dataset(&bulk_spec).unwrap();
        let dp: Vec<_> = prog.entries.iter().map(|e| e.digest).collect();
        let db: Vec<_> = bulk.entries.iter().map(|e| e.digest).collect();
        assert_eq!(dp, db);
    }

    #[test]
    fn series_cardinalities_match_full_scale_definitions() {
        let root = Path::new("/tmp/unused");
        assert_eq!(bulk_full_scale(root, 0).sizes.len(), 31);
        assert_eq!(streaming_full_scale(root, 0).sizes.len(), 19);
    }

    #[test]
    fn series_degenerate_range_has_one_size() {
        let s = build_sweep_series(SeriesKind::Bulk, KIB, KIB, Some(GIB), Path::new("/tmp/x"), 0).unwrap();
        assert_eq!(s.sizes, vec![KIB]);
    }

    #[test]
    fn series_rejects_non_power_of_two() {
        assert!(build_sweep_series(SeriesKind::Bulk, 1000, KIB, None, Path::new("/tmp/x"), 0).is_err());
        assert!(build_sweep_series(SeriesKind::Bulk, KIB, 3000, None, Path::new("/tmp/x"), 0).is_err());
        assert!(build_sweep_series(SeriesKind::Bulk, 2 * KIB, KIB, None, Path::new("/tmp/x"), 0).is_err());
    }

    #[test]
    fn series_size_count_is_exponent_span() {
        for (a, b) in [(10u32, 20u32), (12, 12), (22, 40)] {
            let s = build_sweep_series(
                SeriesKind::Bulk,
                1 << a,
                1 << b,
                None,
                Path::new("/tmp/x"),
                0,
            )
            .unwrap();
            assert_eq!(s.sizes.len(), (b - a + 1) as usize);
            assert!(s.sizes.windows(2).all(|w| w[1] == w[0] * 2));
        }
    }

    #[test]
    fn series_budget_rule() {
        let s = build_sweep_series(
            SeriesKind::Bulk,
            KIB,
            4 * MIB,
            Some(64 * MIB),
            Path::new("/tmp/x"),
            0,
        )
        .unwrap();
        // 1 KiB files capped by the file-count knob, not the budget.
        assert_eq!(s.per_size_spec[&KIB].file_count, 65_536);
        assert_eq!(s.per_size_spec[&(4 * MIB)].file_count, 16);
        for spec in s.per_size_spec.values() {
            assert!(spec.total_bytes() <= 64 * MIB);
            assert!(spec.file_count >= 1);
        }
        // full-scale counts: the aggregate knob binds for big files, the
        // file-count knob for small ones.
        let fs = bulk_full_scale(Path::new("/tmp/x"), 0);
        assert_eq!(fs.per_size_spec[&KIB].file_count, MAX_FILE_COUNT);
        assert_eq!(fs.per_size_spec[&TIB].file_count, 1);
        assert_eq!(fs.per_size_spec[&GIB].file_count, 1024);
    }

    #[test]
    #[ignore = "writes 2^20 files; run explicitly for the full hyperscale shape"]
    fn hyperscale_generation_full_shape() {
        let tmp = TempDir::new().unwrap();
        let spec = DatasetSpec {
            file_size: KIB,
            file_count: MAX_FILE_COUNT,
            root_path: tmp.path().join("hyper"),
            content_seed: 1,
            mode: DatasetMode::Bulk,
        };
        let m = generate_dataset(&spec).unwrap();
        assert_eq!(m.entries.len(), 1 << 20);
        assert_eq!(m.total_bytes, GIB);
    }
}
