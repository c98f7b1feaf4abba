//! Kernel traffic-control backend: delay injection on an interface's
//! egress queueing discipline.
//!
//! Every system mutation flows through one audited command boundary, and
//! the exact command lines are available without executing anything
//! (dry-run and golden tests use that). Applied profiles are recorded in a
//! state file so a crashed process can be cleaned up afterwards with
//! `restore_from_state`.
//!
//! Direction note: shaping is applied on egress. On a two-host path each
//! peer applies the one-way delay to its own egress (half the RTT each); a
//! loopback path crosses its egress qdisc once per direction already, so
//! the one-way delay is likewise applied once.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::{EmulationError, LatencyProfile};

/// Packet limit handed to netem; sized so a delay queue holding a desk-scale
/// bandwidth-delay product does not drop.
pub const NETEM_QUEUE_LIMIT: u32 = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateEntry {
    interface: String,
    applied_command: String,
    clear_command: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StateFile {
    entries: Vec<StateEntry>,
}

/// Handle to an applied profile; clearing goes through the controller so
/// the state file stays truthful.
#[derive(Debug, Clone)]
pub struct NetemHandle {
    pub interface: String,
}

/// Traffic-control controller. `tc_program` defaults to `tc` on PATH;
/// tests point it at a recording shim.
#[derive(Debug, Clone)]
pub struct NetemCtl {
    tc_program: String,
    state_path: PathBuf,
}

impl Default for NetemCtl {
    fn default() -> Self {
        NetemCtl {
            tc_program: "tc".into(),
            state_path: std::env::temp_dir().join("wanlab-netem-state.json"),
        }
    }
}

/// The exact arguments (after the `tc` program itself) that apply a
/// profile.
pub fn apply_args(profile: &LatencyProfile) -> Vec<String> {
    let mut args: Vec<String> = ["qdisc", "replace", "dev"].iter().map(|s| s.to_string()).collect();
    args.push(profile.interface.clone());
    args.extend(["root", "netem"].iter().map(|s| s.to_string()));
    args.push("delay".into());
    args.push(format!("{}us", profile.one_way_delay.as_micros()));
    if !profile.jitter.is_zero() {
        args.push(format!("{}us", profile.jitter.as_micros()));
    }
    if profile.loss > 0.0 {
        args.push("loss".into());
        args.push(format!("{}%", profile.loss * 100.0));
    }
    if let Some(rate) = profile.rate_cap {
        args.push("rate".into());
        args.push(format!("{}bit", rate.bits_per_second()));
    }
    args.push("limit".into());
    args.push(NETEM_QUEUE_LIMIT.to_string());
    args
}

/// The exact arguments that clear an interface's root qdisc.
pub fn clear_args(interface: &str) -> Vec<String> {
    ["qdisc", "del", "dev", interface, "root"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn render(program: &str, args: &[String]) -> String {
    let mut out = String::from(program);
    for a in args {
        out.push(' ');
        out.push_str(a);
    }
    out
}

impl NetemCtl {
    pub fn new(tc_program: impl Into<String>, state_path: impl Into<PathBuf>) -> Self {
        NetemCtl {
            tc_program: tc_program.into(),
            state_path: state_path.into(),
        }
    }

    /// Whether the traffic-control command can run at all.
    pub fn available(&self) -> bool {
        Command::new(&self.tc_program)
            .arg("-Version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    }

    /// Command lines equivalent to `apply_profile` + the matching clear,
    /// for dry runs and review.
    pub fn commands_for(&self, profile: &LatencyProfile) -> Vec<String> {
        vec![
            render(&self.tc_program, &apply_args(profile)),
            render(&self.tc_program, &clear_args(&profile.interface)),
        ]
    }

    /// The single audited boundary through which every tc invocation runs.
    fn run(&self, args: &[String]) -> Result<(), EmulationError> {
        let output = Command::new(&self.tc_program).args(args).output().map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                EmulationError::TcUnavailable(format!("{} not found on PATH", self.tc_program))
            } else {
                EmulationError::Io(e)
            }
        })?;
        if output.status.success() {
            return Ok(());
        }
        let stderr = String::from_utf8_lossy(&output.stderr).trim().to_string();
        let command = render(&self.tc_program, args);
        if stderr.contains("Operation not permitted") || stderr.contains("RTNETLINK answers: Operation not permitted") {
            Err(EmulationError::MissingPrivilege(format!("`{command}` was refused")))
        } else if stderr.contains("Cannot find device") {
            Err(EmulationError::UnknownInterface(
                args.iter()
                    .skip_while(|a| *a != "dev")
                    .nth(1)
                    .cloned()
                    .unwrap_or_default(),
            ))
        } else {
            Err(EmulationError::CommandFailed { command, stderr })
        }
    }

    fn load_state(&self) -> StateFile {
        fs::read_to_string(&self.state_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    fn store_state(&self, state: &StateFile) -> Result<(), EmulationError> {
        fs::write(&self.state_path, serde_json::to_string_pretty(state).expect("state serializes"))?;
        Ok(())
    }

    /// Configure the interface's egress qdisc with the profile. Re-applying
    /// replaces the previous profile (`qdisc replace` semantics), so the
    /// second apply wins.
    pub fn apply_profile(&self, profile: &LatencyProfile) -> Result<NetemHandle, EmulationError> {
        let args = apply_args(profile);
        self.run(&args)?;
        let mut state = self.load_state();
        state.entries.retain(|e| e.interface != profile.interface);
        state.entries.push(StateEntry {
            interface: profile.interface.clone(),
            applied_command: render(&self.tc_program, &args),
            clear_command: render(&self.tc_program, &clear_args(&profile.interface)),
        });
        self.store_state(&state)?;
        Ok(NetemHandle {
            interface: profile.interface.clone(),
        })
    }

    /// Restore the interface to its default queueing state. Clearing an
    /// already-clear interface is a no-op.
    pub fn clear_profile(&self, handle: &NetemHandle) -> Result<(), EmulationError> {
        self.clear_interface(&handle.interface)
    }

    pub fn clear_interface(&self, interface: &str) -> Result<(), EmulationError> {
        match self.run(&clear_args(interface)) {
            Ok(()) => {}
            // deleting a qdisc that is not there is success for our purpose
            Err(EmulationError::CommandFailed { stderr, .. })
                if stderr.contains("No such file or directory")
                    || stderr.contains("Invalid handle")
                    || stderr.contains("Cannot delete qdisc with handle of zero") => {}
            Err(e) => return Err(e),
        }
        let mut state = self.load_state();
        state.entries.retain(|e| e.interface != interface);
        self.store_state(&state)?;
        Ok(())
    }

    /// Clear every profile recorded in the state file; the crash-recovery
    /// path after a process died with profiles applied.
    pub fn restore_from_state(&self) -> Result<Vec<String>, EmulationError> {
        let state = self.load_state();
        let mut cleared = Vec::new();
        for entry in state.entries {
            self.clear_interface(&entry.interface)?;
            cleared.push(entry.interface);
        }
        Ok(cleared)
    }

    /// Interfaces currently recorded as shaped.
    pub fn recorded_interfaces(&self) -> Vec<String> {
        self.load_state().entries.into_iter().map(|e| e.interface).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calc::Bandwidth;
    use std::time::Duration;

    fn profile_ms(ms: u64, iface: &str) -> LatencyProfile {
        LatencyProfile {
            one_way_delay: Duration::from_millis(ms),
            jitter: Duration::ZERO,
            rate_cap: None,
            loss: 0.0,
            interface: iface.into(),
        }
    }

    #[test]
    fn golden_apply_command_delay_only() {
        let ctl = NetemCtl::default();
        let cmds = ctl.commands_for(&profile_ms(50, "lo"));
        assert_eq!(cmds[0], "tc qdisc replace dev lo root netem delay 50000us limit 10000");
        assert_eq!(cmds[1], "tc qdisc del dev lo root");
    }

    #[test]
    fn golden_apply_command_full_profile() {
        let mut p = profile_ms(10, "eth0");
        p.jitter = Duration::from_millis(1);
        p.loss = 0.005;
        p.rate_cap = Some(Bandwidth::from_mbps(200));
        let args = apply_args(&p);
        assert_eq!(
            args.join(" "),
            "qdisc replace dev eth0 root netem delay 10000us 1000us loss 0.5% rate 200000000bit limit 10000"
        );
    }

    /// A recording shim stands in for tc: every invocation is appended to a
    /// log file, so apply/clear/restore logic is exercised end to end
    /// without kernel netem.
    fn shim(dir: &std::path::Path) -> (String, PathBuf) {
        let log = dir.join("tc-log.txt");
        let script = dir.join("tc-shim.sh");
        fs::write(
            &script,
            format!("#!/bin/sh\necho \"$@\" >> {}\nexit 0\n", log.display()),
        )
        .unwrap();
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
        (script.display().to_string(), log)
    }

    #[test]
    fn apply_clear_and_replay_drive_the_command_boundary() {
        let tmp = tempfile::TempDir::new().unwrap();
        let (shim_path, log) = shim(tmp.path());
        let state = tmp.path().join("state.json");
        let ctl = NetemCtl::new(&shim_path, &state);
        assert!(ctl.available());

        let h = ctl.apply_profile(&profile_ms(50, "lo")).unwrap();
        assert_eq!(ctl.recorded_interfaces(), vec!["lo".to_string()]);
        // second apply with a different delay wins via qdisc replace
        ctl.apply_profile(&profile_ms(100, "lo")).unwrap();
        assert_eq!(ctl.recorded_interfaces(), vec!["lo".to_string()]);
        ctl.clear_profile(&h).unwrap();
        assert!(ctl.recorded_interfaces().is_empty());
        // clear twice: no error
        ctl.clear_profile(&h).unwrap();

        let logged = fs::read_to_string(&log).unwrap();
        let lines: Vec<&str> = logged.lines().collect();
        assert_eq!(lines[0], "-Version");
        assert_eq!(lines[1], "qdisc replace dev lo root netem delay 50000us limit 10000");
        assert_eq!(lines[2], "qdisc replace dev lo root netem delay 100000us limit 10000");
        assert_eq!(lines[3], "qdisc del dev lo root");
        assert_eq!(lines[4], "qdisc del dev lo root");
    }

    #[test]
    fn state_file_survives_for_post_crash_restore() {
        let tmp = tempfile::TempDir::new().unwrap();
        let (shim_path, log) = shim(tmp.path());
        let state = tmp.path().join("state.json");
        {
            let ctl = NetemCtl::new(&shim_path, &state);
            ctl.apply_profile(&profile_ms(10, "lo")).unwrap();
            ctl.apply_profile(&profile_ms(10, "eth9")).unwrap();
            // process "crashes" here: handles dropped without clear
        }
        let ctl = NetemCtl::new(&shim_path, &state);
        let mut cleared = ctl.restore_from_state().unwrap();
        cleared.sort();
        assert_eq!(cleared, vec!["eth9".to_string(), "lo".to_string()]);
        assert!(ctl.recorded_interfaces().is_empty());
        let logged = fs::read_to_string(&log).unwrap();
        assert!(logged.contains("qdisc del dev lo root"));
        assert!(logged.contains("qdisc del dev eth9 root"));
    }

    #[test]
    fn missing_tc_is_an_actionable_error() {
        let tmp = tempfile::TempDir::new().unwrap();
        let ctl = NetemCtl::new("/nonexistent/tc", tmp.path().join("state.json"));
        assert!(!ctl.available());
        let err = ctl.apply_profile(&profile_ms(10, "lo")).unwrap_err();
        assert!(matches!(err, EmulationError::TcUnavailable(_)));
        assert!(err.to_string().contains("tun"), "error must point at the fallback backend");
    }
}
