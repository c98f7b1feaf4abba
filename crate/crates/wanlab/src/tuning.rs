//! Host tuning audit and apply: kernel network parameters and NIC ring
//! buffers.
//!
//! The default target is the eight-parameter kernel set plus 8160/8160 ring
//! buffers that the reference appliances run with. `audit` never modifies
//! anything; `apply` supports a dry-run that prints the exact commands and a
//! runtime scope that writes the kernel parameter filesystem and re-audits.
//! Nothing is persisted to boot-time configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("permission denied writing kernel parameters: {}", keys.join(", "))]
    PermissionDenied { keys: Vec<String> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Desired host state: kernel parameters plus NIC ring sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningTarget {
    pub kernel_params: BTreeMap<String, String>,
    pub ring_rx: u32,
    pub ring_tx: u32,
    /// Interface whose ring buffers are audited; `None` skips ring checks.
    pub nic: Option<String>,
}

impl Default for TuningTarget {
    fn default() -> Self {
        let mut kernel_params = BTreeMap::new();
        for (k, v) in [
            ("net.core.rmem_max", "2147483647"),
            ("net.core.wmem_max", "2147483647"),
            ("net.ipv4.tcp_rmem", "4096 67108864 1073741824"),
            ("net.ipv4.tcp_wmem", "4096 67108864 1073741824"),
            ("net.ipv4.tcp_mtu_probing", "1"),
            ("net.core.default_qdisc", "fq_codel"),
            ("net.ipv4.tcp_congestion_control", "cubic"),
            ("net.core.netdev_max_backlog", "8192"),
        ] {
            kernel_params.insert(k.to_string(), v.to_string());
        }
        TuningTarget {
            kernel_params,
            ring_rx: 8160,
            ring_tx: 8160,
            nic: None,
        }
    }
}

impl TuningTarget {
    /// Target with kernel parameters only (no ring-buffer rows).
    pub fn kernel_only() -> Self {
        TuningTarget {
            nic: None,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamState {
    Match,
    Mismatch,
    /// Key unreadable or tool unavailable; recorded, never fatal.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub name: String,
    pub target: String,
    pub current: Option<String>,
    pub state: ParamState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overall {
    Tuned,
    Partial,
    Untuned,
}

impl std::fmt::Display for Overall {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Overall::Tuned => f.write_str("tuned"),
            Overall::Partial => f.write_str("partial"),
            Overall::Untuned => f.write_str("untuned"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub params: Vec<ParamAudit>,
    pub overall: Overall,
    pub warnings: Vec<String>,
}

impl AuditReport {
    fn from_params(params: Vec<ParamAudit>, warnings: Vec<String>) -> Self {
        let overall = if params.iter().all(|p| p.state == ParamState::Match) {
            Overall::Tuned
        } else if params.iter().all(|p| p.state != ParamState::Match) && !params.is_empty() {
            Overall::Untuned
        } else {
            Overall::Partial
        };
        AuditReport {
            params,
            overall,
            warnings,
        }
    }

    pub fn mismatched_keys(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.state == ParamState::Mismatch)
            .map(|p| p.name.as_str())
            .collect()
    }

    /// Human table, deterministic for golden-file comparison.
    pub fn render_table(&self) -> String {
        let name_w = self
            .params
            .iter()
            .map(|p| p.name.len())
            .chain(["parameter".len()].into_iter())
            .max()
            .unwrap_or(9);
        let mut out = String::new();
        let _ = writeln!(out, "{:name_w$}  {:9}  current -> target", "parameter", "state");
        for p in &self.params {
            let state = match p.state {
                ParamState::Match => "match",
                ParamState::Mismatch => "MISMATCH",
                ParamState::Unknown => "unknown",
            };
            let current = p.current.as_deref().unwrap_or("<unreadable>");
            let _ = writeln!(out, "{:name_w$}  {:9}  {} -> {}", p.name, state, current, p.target);
        }
        let _ = writeln!(out, "overall: {}", self.overall);
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    /// One JSON record per parameter, line-delimited.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for p in &self.params {
            let _ = writeln!(out, "{}", serde_json::to_string(p).expect("audit rows serialize"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplyScope {
    Runtime,
    DryRun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApplyReport {
    pub scope: ApplyScope,
    /// The exact commands equivalent to what runtime scope performs.
    pub commands: Vec<String>,
    /// Keys the kernel refused for non-permission reasons, with the error.
    pub rejected: Vec<(String, String)>,
    /// Post-apply audit; absent for dry runs.
    pub audit: Option<AuditReport>,
}

/// Kernel parameter interface rooted at `/proc/sys` (overridable for
/// hermetic tests).
#[derive(Debug, Clone)]
pub struct Sysctl {
    root: PathBuf,
    ethtool_program: String,
}

impl Default for Sysctl {
    fn default() -> Self {
        Sysctl {
            root: PathBuf::from("/proc/sys"),
            ethtool_program: "ethtool".into(),
        }
    }
}

fn key_to_path(root: &Path, key: &str) -> PathBuf {
    root.join(key.replace('.', "/"))
}

fn normalize(v: &str) -> String {
    v.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_permission(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::PermissionDenied | io::ErrorKind::ReadOnlyFilesystem)
}

impl Sysctl {
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Sysctl {
            root: root.into(),
            ..Default::default()
        }
    }

    pub fn with_ethtool(mut self, program: impl Into<String>) -> Self {
        self.ethtool_program = program.into();
        self
    }

    pub fn read(&self, key: &str) -> io::Result<String> {
        Ok(normalize(&fs::read_to_string(key_to_path(&self.root, key))?))
    }

    pub fn write(&self, key: &str, value: &str) -> io::Result<()> {
        fs::write(key_to_path(&self.root, key), value)
    }

    /// Compare live values against the target. Read-only: never modifies
    /// system state; unreadable keys are recorded as unknown.
    pub fn audit(&self, target: &TuningTarget) -> AuditReport {
        let mut params = Vec::new();
        let mut warnings = Vec::new();
        for (key, want) in &target.kernel_params {
            let want_norm = normalize(want);
            match self.read(key) {
                Ok(current) => {
                    let state = if current == want_norm {
                        ParamState::Match
                    } else {
                        ParamState::Mismatch
                    };
                    params.push(ParamAudit {
                        name: key.clone(),
                        target: want_norm,
                        current: Some(current),
                        state,
                    });
                }
                Err(_) => params.push(ParamAudit {
                    name: key.clone(),
                    target: want_norm,
                    current: None,
                    state: ParamState::Unknown,
                }),
            }
        }
        if let Some(nic) = &target.nic {
            match read_ring_sizes(&self.ethtool_program, nic) {
                Ok((rx, tx)) => {
                    for (name, current, want) in
                        [("ring.rx", rx, target.ring_rx), ("ring.tx", tx, target.ring_tx)]
                    {
                        params.push(ParamAudit {
                            name: format!("{name}[{nic}]"),
                            target: want.to_string(),
                            current: Some(current.to_string()),
                            state: if current == want {
                                ParamState::Match
                            } else {
                                ParamState::Mismatch
                            },
                        });
                    }
                }
                Err(e) => {
                    warnings.push(format!(
                        "ring buffers on {nic} not audited ({e}); continuing audit-only for rings"
                    ));
                    for (name, want) in [("ring.rx", target.ring_rx), ("ring.tx", target.ring_tx)] {
                        params.push(ParamAudit {
                            name: format!("{name}[{nic}]"),
                            target: want.to_string(),
                            current: None,
                            state: ParamState::Unknown,
                        });
                    }
                }
            }
        }
        AuditReport::from_params(params, warnings)
    }

    /// The exact command list runtime scope is equivalent to.
    pub fn commands_for(&self, target: &TuningTarget) -> Vec<String> {
        let mut cmds: Vec<String> = target
            .kernel_params
            .iter()
            .map(|(k, v)| format!("sysctl -w {k}=\"{v}\""))
            .collect();
        if let Some(nic) = &target.nic {
            cmds.push(format!(
                "{} -G {nic} rx {} tx {}",
                self.ethtool_program, target.ring_rx, target.ring_tx
            ));
        }
        cmds
    }

    /// Apply the target. Dry-run performs zero mutations and returns the
    /// command list; runtime writes each key, applies ring sizes when a NIC
    /// is named, and re-audits. Permission failures abort with the full key
    /// list; other rejections (e.g. a value the kernel does not support) are
    /// recorded and reflected by the re-audit.
    pub fn apply(&self, target: &TuningTarget, scope: ApplyScope) -> Result<ApplyReport, TuningError> {
        let commands = self.commands_for(target);
        if scope == ApplyScope::DryRun {
            return Ok(ApplyReport {
                scope,
                commands,
                rejected: Vec::new(),
                audit: None,
            });
        }
        let mut denied = Vec::new();
        let mut rejected = Vec::new();
        for (key, value) in &target.kernel_params {
            match self.write(key, value) {
                Ok(()) => {}
                Err(e) if is_permission(&e) => denied.push(key.clone()),
                Err(e) => rejected.push((key.clone(), e.to_string())),
            }
        }
        if !denied.is_empty() {
            return Err(TuningError::PermissionDenied { keys: denied });
        }
        if let Some(nic) = &target.nic {
            let status = Command::new(&self.ethtool_program)
                .args(["-G", nic, "rx", &target.ring_rx.to_string(), "tx", &target.ring_tx.to_string()])
                .output();
            match status {
                Ok(out) if out.status.success() => {}
                Ok(out) => rejected.push((
                    format!("ring[{nic}]"),
                    String::from_utf8_lossy(&out.stderr).trim().to_string(),
                )),
                Err(e) => rejected.push((format!("ring[{nic}]"), e.to_string())),
            }
        }
        let audit = self.audit(target);
        Ok(ApplyReport {
            scope,
            commands,
            rejected,
            audit: Some(audit),
        })
    }
}

fn read_ring_sizes(program: &str, nic: &str) -> Result<(u32, u32), String> {
    let out = Command::new(program)
        .args(["-g", nic])
        .output()
        .map_err(|e| format!("cannot run {program}: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "{program} -g {nic} failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    parse_ring_output(&String::from_utf8_lossy(&out.stdout))
        .ok_or_else(|| format!("unparseable {program} -g output"))
}

/// Parse the "Current hardware settings" RX/TX rows of `ethtool -g`.
fn parse_ring_output(text: &str) -> Option<(u32, u32)> {
    let mut in_current = false;
    let mut rx = None;
    let mut tx = None;
    for line in text.lines() {
        if line.starts_with("Current hardware settings") {
            in_current = true;
            continue;
        }
        if !in_current {
            continue;
        }
        let mut parts = line.split(':');
        match (parts.next().map(str::trim), parts.next().map(str::trim)) {
            (Some("RX"), Some(v)) => rx = v.parse().ok(),
            (Some("TX"), Some(v)) => tx = v.parse().ok(),
            _ => {}
        }
    }
    Some((rx?, tx?))
}
