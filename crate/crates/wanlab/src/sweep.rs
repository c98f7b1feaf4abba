//! The benchmark sweep orchestrator.
//!
//! A sweep crosses {latency profile} x {congestion control} x {mode} x
//! {iteration} x {file size} and runs one transfer per cell. Within every
//! (latency, cca, mode) combination the iterations run in order and each
//! iteration pass visits sizes smallest to largest; a combination block
//! completes fully before the next begins. Latency profiles are applied
//! around their blocks and torn down even on failure.
//!
//! Every record is appended to a line-delimited log (and flushed) before
//! the next cell starts, so an interrupted sweep resumes from the log with
//! no duplicated cells. Each record embeds a host-tuning fingerprint so
//! out-of-the-box and tuned runs stay distinguishable in the data.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::net::Ipv4Addr;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{generate_dataset, DatasetManifest, SweepSeries};
use crate::emulation::netem::{NetemCtl, NetemHandle};
use crate::emulation::tun::{TunBackend, TunPathHandle};
use crate::emulation::{EmulationError, LatencyProfile};
use crate::mover::{
    serve, transfer, transfer_streaming, MoverError, ServeConfig, ServerHandle, SinkEndpoint,
    SourceEndpoint, TransferResult, TransferSpec,
};
use crate::protocol::TransferMode;
use crate::tuning::{Overall, Sysctl, TuningTarget};

pub const LOG_FORMAT: &str = "wanlab-sweep-log";
pub const LOG_SCHEMA_VERSION: u32 = 1;

/// The executed ordering, recorded in the log header and report metadata.
pub const ORDERING_NOTE: &str = "latency outer, then cca, then mode, then iteration; sizes ascend within each iteration pass; each (latency, cca, mode) block completes before the next";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),
    #[error("record log {path}: {msg}")]
    Log { path: PathBuf, msg: String },
    #[error(transparent)]
    Emulation(#[from] EmulationError),
    #[error(transparent)]
    Mover(#[from] MoverError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the receiving end of each cell lives.
#[derive(Debug, Clone)]
pub enum ReceiverMode {
    /// A receiver is already running at the template's peer address
    /// (two-host setups; the netem backend pairs with this).
    External,
    /// Run a receiver in-process per latency block, bound to the emulated
    /// path when one exists. Single-host sweeps use this.
    SelfHosted { sink: SinkEndpoint },
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub series: SweepSeries,
    pub latencies: Vec<LatencyProfile>,
    pub ccas: Vec<String>,
    pub modes: Vec<TransferMode>,
    pub iterations: u32,
    pub transfer_template: TransferSpec,
    pub receiver: ReceiverMode,
    /// Regenerate datasets for every iteration instead of reusing them.
    pub regenerate_per_iteration: bool,
    /// Ask the kernel to drop page caches before each bulk cell (best
    /// effort, needs privilege); incompressible content makes caching the
    /// only reuse concern.
    pub drop_caches: bool,
    /// Streaming cells: session ends after this long without growth.
    pub streaming_quiescence: Duration,
    /// Streaming cells: writer appends in steps of this many bytes.
    pub streaming_step: u64,
    /// Streaming cells: writer pause between appends.
    pub streaming_pause: Duration,
}

impl SweepPlan {
    pub fn new(series: SweepSeries, template: TransferSpec) -> Self {
        SweepPlan {
            series,
            latencies: vec![LatencyProfile::none()],
            ccas: vec!["cubic".into()],
            modes: vec![TransferMode::Bulk],
            iterations: 3,
            transfer_template: template,
            receiver: ReceiverMode::External,
            regenerate_per_iteration: false,
            drop_caches: false,
            streaming_quiescence: Duration::from_millis(500),
            streaming_step: 512 * 1024,
            streaming_pause: Duration::from_millis(2),
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if self.iterations == 0 {
            return Err(SweepError::InvalidPlan("iterations must be >= 1".into()));
        }
        for (axis, empty) in [
            ("sizes", self.series.sizes.is_empty()),
            ("latencies", self.latencies.is_empty()),
            ("ccas", self.ccas.is_empty()),
            ("modes", self.modes.is_empty()),
        ] {
            if empty {
                return Err(SweepError::InvalidPlan(format!("{axis} axis is empty")));
            }
        }
        Ok(())
    }

    pub fn cell_count(&self) -> u64 {
        self.series.sizes.len() as u64
            * self.latencies.len() as u64
            * self.ccas.len() as u64
            * self.modes.len() as u64
            * self.iterations as u64
    }
}

/// Cell coordinates; one record exists per executed cell-iteration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellCoords {
    pub size: u64,
    pub latency_ms: u64,
    pub cca: String,
    pub mode: TransferMode,
    pub iteration: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub size: u64,
    pub latency_ms: u64,
    pub cca: String,
    pub mode: TransferMode,
    pub iteration: u32,
    pub status: CellStatus,
    pub error: Option<String>,
    pub result: Option<TransferResult>,
    pub timestamp: DateTime<Utc>,
    /// Tuning-audit overall state at execution time.
    pub host_tuning: Overall,
}

impl SweepRecord {
    pub fn coords(&self) -> CellCoords {
        CellCoords {
            size: self.size,
            latency_ms: self.latency_ms,
            cca: self.cca.clone(),
            mode: self.mode,
            iteration: self.iteration,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub schema_version: u32,
    pub ordering: String,
    pub created: DateTime<Utc>,
}

/// Append-only record log: a schema-versioned header line, then one JSON
/// record per line.
pub struct RecordLog;

impl RecordLog {
    pub fn load(path: &Path) -> Result<(Option<LogHeader>, Vec<SweepRecord>), SweepError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((None, Vec::new())),
            Err(e) => return Err(e.into()),
        };
        let mut lines = text.lines().enumerate();
        let header = match lines.next() {
            None => return Ok((None, Vec::new())),
            Some((_, first)) => serde_json::from_str::<LogHeader>(first).map_err(|e| SweepError::Log {
                path: path.to_path_buf(),
                msg: format!("bad header line: {e}"),
            })?,
        };
        if header.format != LOG_FORMAT {
            return Err(SweepError::Log {
                path: path.to_path_buf(),
                msg: format!("unexpected log format {:?}", header.format),
            });
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SweepRecord = serde_json::from_str(line).map_err(|e| SweepError::Log {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", idx + 1),
            })?;
            records.push(rec);
        }
        Ok((Some(header), records))
    }

    /// Append one record, creating the log (with header) on first use. The
    /// line is flushed and synced before this returns.
    pub fn append(path: &Path, record: &SweepRecord) -> Result<(), SweepError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            let header = LogHeader {
                format: LOG_FORMAT.into(),
                schema_version: LOG_SCHEMA_VERSION,
                ordering: ORDERING_NOTE.into(),
                created: Utc::now(),
            };
            writeln!(file, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        }
        writeln!(file, "{}", serde_json::to_string(record).expect("record serializes"))?;
        file.flush()?;
        file.sync_data()?;
        Ok(())
    }
}

/// How non-noop latency profiles get provisioned.
pub enum PathBackend {
    /// Only the no-emulation profile is runnable.
    NoneOnly,
    Netem(NetemCtl),
    Tun(TunBackend),
}

enum AppliedPath {
    Noop,
    Netem { ctl: NetemCtl, handle: NetemHandle },
    Tun(TunPathHandle),
}

impl AppliedPath {
    fn bind_ip(&self) -> Option<Ipv4Addr> {
        match self {
            AppliedPath::Tun(h) => Some(h.local()),
            _ => None,
        }
    }

    fn peer_ip(&self) -> Option<Ipv4Addr> {
        match self {
            AppliedPath::Tun(h) => Some(h.peer()),
            _ => None,
        }
    }

    fn teardown(self) -> Result<(), EmulationError> {
        match self {
            AppliedPath::Noop => Ok(()),
            AppliedPath::Netem { ctl, handle } => ctl.clear_profile(&handle),
            AppliedPath::Tun(h) => {
                h.teardown();
                Ok(())
            }
        }
    }
}

impl PathBackend {
    fn apply(&self, profile: &LatencyProfile) -> Result<AppliedPath, EmulationError> {
        if profile.is_noop() {
            return Ok(AppliedPath::Noop);
        }
        match self {
            PathBackend::NoneOnly => Err(EmulationError::Measurement(
                "plan contains a non-zero latency profile but no emulation backend is configured"
                    .into(),
            )),
            PathBackend::Netem(ctl) => {
                let handle = ctl.apply_profile(profile)?;
                Ok(AppliedPath::Netem {
                    ctl: ctl.clone(),
                    handle,
                })
            }
            PathBackend::Tun(backend) => Ok(AppliedPath::Tun(backend.apply_profile(profile)?)),
        }
    }
}

fn host_fingerprint() -> Overall {
    Sysctl::default().audit(&TuningTarget::kernel_only()).overall
}

fn drop_page_caches() {
    let _ = fs::write("/proc/sys/vm/drop_caches", "3");
}

/// Latency key for record coordinates.
fn latency_ms(profile: &LatencyProfile) -> u64 {
    profile.one_way_delay.as_millis() as u64
}

fn ensure_bulk_dataset(
    plan: &SweepPlan,
    size: u64,
    regenerate: bool,
) -> Result<DatasetManifest, SweepError> {
    let spec = plan
        .series
        .per_size_spec
        .get(&size)
        .ok_or_else(|| SweepError::InvalidPlan(format!("size {size} missing from series")))?;
    let manifest_path = spec.root_path.join(".wanlab-manifest");
    if !regenerate {
        if let Ok(m) = DatasetManifest::load(&manifest_path) {
            if m.spec == *spec {
                return Ok(m);
            }
        }
    }
    let manifest = generate_dataset(spec)?;
    manifest.save(&manifest_path).map_err(MoverError::Dataset)?;
    Ok(manifest)
}

fn execute_cell(
    plan: &SweepPlan,
    coords: &CellCoords,
    peer: &str,
) -> Result<TransferResult, SweepError> {
    let mut spec = plan.transfer_template.clone();
    spec.peer_address = peer.to_string();
    spec.cca = coords.cca.clone();
    spec.mode = coords.mode;
    match coords.mode {
        TransferMode::Bulk => {
            if plan.drop_caches {
                drop_page_caches();
            }
            let manifest = ensure_bulk_dataset(plan, coords.size, plan.regenerate_per_iteration)?;
            spec.source = SourceEndpoint::Directory(manifest.spec.root_path.clone());
            Ok(transfer(&spec, &manifest)?)
        }
        TransferMode::Streaming => {
            // a fresh watch directory per cell so the session genuinely
            // observes files appearing and growing
            let base = plan
                .series
                .per_size_spec
                .get(&coords.size)
                .ok_or_else(|| SweepError::InvalidPlan(format!("size {} missing from series", coords.size)))?;
            let watch_root = base.root_path.with_file_name(format!(
                "{}-stream-{}ms-{}-i{}",
                base.root_path
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "set".into()),
                coords.latency_ms,
                coords.cca,
                coords.iteration
            ));
            let _ = fs::remove_dir_all(&watch_root);
            fs::create_dir_all(&watch_root)?;
            let mut writer_spec = base.clone();
            writer_spec.root_path = watch_root.clone();
            spec.source = SourceEndpoint::Directory(watch_root.clone());

            let step = plan.streaming_step;
            let pause = plan.streaming_pause;
            let writer = std::thread::spawn(move || {
                crate::dataset::write_dataset_progressively(&writer_spec, step, pause)
            });
            let result = transfer_streaming(&spec, &watch_root, plan.streaming_quiescence);
            let writer_result = writer.join().expect("writer thread panicked");
            let result = result?;
            writer_result.map_err(MoverError::Dataset)?;
            let _ = fs::remove_dir_all(&watch_root);
            Ok(result)
        }
    }
}

/// Teardown insurance: latency profiles and self-hosted receivers never
/// outlive their block, even on early return.
struct BlockGuard {
    path: Option<AppliedPath>,
    server: Option<ServerHandle>,
}

impl BlockGuard {
    fn close(&mut self) -> Result<(), EmulationError> {
        if let Some(server) = self.server.take() {
            server.shutdown();
        }
        if let Some(path) = self.path.take() {
            path.teardown()?;
        }
        Ok(())
    }
}

impl Drop for BlockGuard {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

/// Run (or resume) a sweep. Every executed cell is appended to
/// `log_path` before the next cell starts; cells already present in the
/// log are skipped. The observer sees each new record and can stop the
/// sweep early with `ControlFlow::Break`.
///
/// Returns every record of the plan executed so far (prior log contents
/// plus this run's).
pub fn run_sweep(
    plan: &SweepPlan,
    backend: &PathBackend,
    log_path: &Path,
    mut observer: impl FnMut(&SweepRecord) -> ControlFlow<()>,
) -> Result<Vec<SweepRecord>, SweepError> {
    plan.validate()?;
    let (_, mut records) = RecordLog::load(log_path)?;
    let mut done: HashSet<CellCoords> = records.iter().map(|r| r.coords()).collect();

    'blocks: for latency in &plan.latencies {
        let lat_ms = latency_ms(latency);
        let block_pending = plan.ccas.iter().any(|cca| {
            plan.modes.iter().any(|mode| {
                (1..=plan.iterations).any(|iteration| {
                    plan.series.sizes.iter().any(|&size| {
                        !done.contains(&CellCoords {
                            size,
                            latency_ms: lat_ms,
                            cca: cca.clone(),
                            mode: *mode,
                            iteration,
                        })
                    })
                })
            })
        });
        if !block_pending {
            continue;
        }

        // abort before any transfer if the path cannot be provisioned
        let applied = backend.apply(latency)?;
        let bind_ip = applied.bind_ip();
        let peer_ip = applied.peer_ip();
        let mut guard = BlockGuard {
            path: Some(applied),
            server: None,
        };

        let peer: String = match &plan.receiver {
            ReceiverMode::External => plan.transfer_template.peer_address.clone(),
            ReceiverMode::SelfHosted { sink } => {
                let bind = bind_ip
                    .map(|ip| ip.to_string())
                    .unwrap_or_else(|| "127.0.0.1".to_string());
                let server = serve(
                    &format!("{bind}:0"),
                    ServeConfig {
                        sink: sink.clone(),
                        socket_buffer: plan.transfer_template.socket_buffer,
                        cca: Some(plan.transfer_template.cca.clone()),
                        ..Default::default()
                    },
                )?;
                let port = server.local_addr().port();
                let host = peer_ip
                    .map(|ip| ip.to_string())
                    .unwrap_or_else(|| "127.0.0.1".to_string());
                guard.server = Some(server);
                format!("{host}:{port}")
            }
        };

        for cca in &plan.ccas {
            for mode in &plan.modes {
                for iteration in 1..=plan.iterations {
                    for &size in &plan.series.sizes {
                        let coords = CellCoords {
                            size,
                            latency_ms: lat_ms,
                            cca: cca.clone(),
                            mode: *mode,
                            iteration,
                        };
                        if done.contains(&coords) {
                            continue;
                        }
                        let outcome = execute_cell(plan, &coords, &peer);
                        let record = match outcome {
                            Ok(result) => SweepRecord {
                                size,
                                latency_ms: lat_ms,
                                cca: cca.clone(),
                                mode: *mode,
                                iteration,
                                status: if result.is_success() {
                                    CellStatus::Ok
                                } else {
                                    CellStatus::Failed
                                },
                                error: (!result.is_success())
                                    .then(|| format!("{} file(s) failed", result.files_failed)),
                                result: Some(result),
                                timestamp: Utc::now(),
                                host_tuning: host_fingerprint(),
                            },
                            Err(e) => SweepRecord {
                                size,
                                latency_ms: lat_ms,
                                cca: cca.clone(),
                                mode: *mode,
                                iteration,
                                status: CellStatus::Failed,
                                error: Some(e.to_string()),
                                result: None,
                                timestamp: Utc::now(),
                                host_tuning: host_fingerprint(),
                            },
                        };
                        RecordLog::append(log_path, &record)?;
                        done.insert(coords);
                        let flow = observer(&record);
                        records.push(record);
                        if flow == ControlFlow::Break(()) {
                            guard.close()?;
                            break 'blocks;
                        }
                    }
                }
            }
        }
        guard.close()?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_sweep_series, SeriesKind};
    use tempfile::TempDir;

    fn tiny_plan(tmp: &TempDir, sizes_pow: (u32, u32), iterations: u32) -> SweepPlan {
        let series = build_sweep_series(
            SeriesKind::Bulk,
            1 << sizes_pow.0,
            1 << sizes_pow.1,
            Some(64 * 1024),
            &tmp.path().join("datasets"),
            42,
        )
        .unwrap();
        let template = TransferSpec::new(
            "127.0.0.1:1",
            SourceEndpoint::Directory(PathBuf::new()),
            SinkEndpoint::Discard,
        );
        let mut plan = SweepPlan::new(series, template);
        plan.iterations = iterations;
        plan.receiver = ReceiverMode::SelfHosted {
            sink: SinkEndpoint::Discard,
        };
        plan
    }

    #[test]
    fn single_cell_plan_yields_one_record() {
        let tmp = TempDir::new().unwrap();
        let plan = tiny_plan(&tmp, (14, 14), 1);
        let log = tmp.path().join("log.jsonl");
        let records = run_sweep(&plan, &PathBackend::NoneOnly, &log, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].status, CellStatus::Ok);
        assert_eq!(records[0].latency_ms, 0);
        let (header, reloaded) = RecordLog::load(&log).unwrap();
        assert_eq!(header.unwrap().schema_version, LOG_SCHEMA_VERSION);
        assert_eq!(reloaded, records);
    }

    #[test]
    fn sizes_ascend_within_each_iteration_pass() {
        let tmp = TempDir::new().unwrap();
        let plan = tiny_plan(&tmp, (12, 14), 2);
        let log = tmp.path().join("log.jsonl");
        let records = run_sweep(&plan, &PathBackend::NoneOnly, &log, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(records.len(), plan.cell_count() as usize);
        assert_eq!(records.len(), 6);
        for pass in records.chunks(3) {
            let sizes: Vec<u64> = pass.iter().map(|r| r.size).collect();
            assert!(sizes.windows(2).all(|w| w[0] < w[1]), "sizes {sizes:?} not ascending");
            assert!(pass.iter().all(|r| r.iteration == pass[0].iteration));
        }
    }

    #[test]
    fn interrupted_sweep_resumes_without_duplicates() {
        let tmp = TempDir::new().unwrap();
        let plan = tiny_plan(&tmp, (12, 14), 2);
        let log = tmp.path().join("log.jsonl");
        let mut seen = 0;
        let partial = run_sweep(&plan, &PathBackend::NoneOnly, &log, |_| {
            seen += 1;
            if seen == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(partial.len(), 2);

        let mut resumed_new = 0;
        let all = run_sweep(&plan, &PathBackend::NoneOnly, &log, |_| {
            resumed_new += 1;
            ControlFlow::Continue(())
        })
        .unwrap();
        assert_eq!(resumed_new, 4, "resume executes only the remaining cells");
        assert_eq!(all.len(), 6);
        let coords: HashSet<CellCoords> = all.iter().map(|r| r.coords()).collect();
        assert_eq!(coords.len(), 6, "no duplicate cells after resume");
    }

    #[test]
    fn non_noop_profile_without_backend_aborts_before_any_transfer() {
        let tmp = TempDir::new().unwrap();
        let mut plan = tiny_plan(&tmp, (12, 12), 1);
        plan.latencies = vec![LatencyProfile::delay_ms(10)];
        let log = tmp.path().join("log.jsonl");
        let err = run_sweep(&plan, &PathBackend::NoneOnly, &log, |_| ControlFlow::Continue(())).unwrap_err();
        assert!(matches!(err, SweepError::Emulation(_)));
        let (_, records) = RecordLog::load(&log).unwrap();
        assert!(records.is_empty(), "no cell may run when the path cannot be provisioned");
    }

    #[test]
    fn failed_cells_are_recorded_and_the_sweep_continues() {
        let tmp = TempDir::new().unwrap();
        let mut plan = tiny_plan(&tmp, (12, 13), 1);
        // an external receiver that does not exist: every cell fails
        plan.receiver = ReceiverMode::External;
        plan.transfer_template.peer_address = "127.0.0.1:9".into(); // discard port, nothing listens
        plan.transfer_template.io_timeout = Duration::from_secs(2);
        let log = tmp.path().join("log.jsonl");
        let records = run_sweep(&plan, &PathBackend::NoneOnly, &log, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r.status == CellStatus::Failed));
        assert!(records.iter().all(|r| r.error.is_some()));
    }

    #[test]
    fn streaming_cells_run_their_writer() {
        let tmp = TempDir::new().unwrap();
        let mut plan = tiny_plan(&tmp, (16, 16), 1);
        plan.modes = vec![TransferMode::Streaming];
        plan.streaming_step = 16 * 1024;
        plan.streaming_pause = Duration::from_millis(1);
        plan.streaming_quiescence = Duration::from_millis(250);
        let log = tmp.path().join("log.jsonl");
        let records = run_sweep(&plan, &PathBackend::NoneOnly, &log, |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].status, CellStatus::Ok, "error: {:?}", records[0].error);
        let result = records[0].result.as_ref().unwrap();
        assert_eq!(result.bytes_moved, 64 * 1024);
    }
}
