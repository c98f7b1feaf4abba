//! Emulated WAN latency provisioning and validation.
//!
//! Two interchangeable backends provision a delay path:
//!
//! - [`netem`]: drives the kernel traffic-control facility (`tc` with the
//!   netem queueing discipline) through a single audited command boundary,
//!   with a dry-run that prints the exact commands and a state file for
//!   crash-safe cleanup. This is the method for real interfaces and
//!   two-host setups.
//! - [`tun`]: a built-in userspace delay path over a TUN device. The kernel
//!   TCP stack experiences genuine round-trip delay without requiring the
//!   `tc` binary or a netem-enabled kernel, which makes single-host labs
//!   and containers workable.
//!
//! Validation always goes through [`measure_rtt`], which times the mover's
//! own HELLO/ACK echoes over TCP: it measures the path the data actually
//! takes and needs no extra privileges. A symmetric path is expected to
//! measure twice its one-way delay.

pub mod netem;
pub mod tun;

use std::io;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calc::Bandwidth;

#[derive(Debug, Error)]
pub enum EmulationError {
    #[error("insufficient privilege: {0} (CAP_NET_ADMIN is required to shape or create interfaces)")]
    MissingPrivilege(String),
    #[error("traffic-control command unavailable: {0}; the built-in TUN backend (`--backend tun`) works without it")]
    TcUnavailable(String),
    #[error("interface {0} does not exist")]
    UnknownInterface(String),
    #[error("command `{command}` failed: {stderr}")]
    CommandFailed { command: String, stderr: String },
    #[error("path measurement failed: {0}")]
    Measurement(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One-way delay applied to a path's egress, with optional jitter, loss and
/// a rate cap. Applied symmetrically, the expected RTT is twice the one-way
/// delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub one_way_delay: Duration,
    /// Uniform jitter around the delay; zero by default (engineered
    /// backbones are loss-free and steady, tests that want noise opt in).
    pub jitter: Duration,
    /// Egress rate cap; unlimited when absent.
    pub rate_cap: Option<Bandwidth>,
    /// Packet loss fraction in [0, 1]; zero by default.
    pub loss: f64,
    /// Interface to shape (netem backend) or to create (tun backend).
    pub interface: String,
}

impl LatencyProfile {
    pub fn delay_ms(one_way_ms: u64) -> Self {
        LatencyProfile {
            one_way_delay: Duration::from_millis(one_way_ms),
            jitter: Duration::ZERO,
            rate_cap: None,
            loss: 0.0,
            interface: default_interface(),
        }
    }

    /// A profile that applies nothing; sweeps use it for the baseline
    /// (no emulation) axis value.
    pub fn none() -> Self {
        LatencyProfile {
            one_way_delay: Duration::ZERO,
            jitter: Duration::ZERO,
            rate_cap: None,
            loss: 0.0,
            interface: default_interface(),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.one_way_delay.is_zero()
            && self.jitter.is_zero()
            && self.rate_cap.is_none()
            && self.loss == 0.0
    }

    pub fn expected_rtt(&self) -> Duration {
        self.one_way_delay * 2
    }
}

fn default_interface() -> String {
    "lo".to_string()
}

/// Comparison of a measured RTT against a profile's expectation.
///
/// `pass` holds iff `|measured - expected| <= tolerance * expected +
/// absolute_floor`; the floor makes a zero-delay expectation satisfiable
/// (scheduler and stack overhead only ever add).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathValidation {
    pub measured_rtt: Duration,
    pub expected_rtt: Duration,
    pub tolerance: f64,
    pub absolute_floor: Duration,
    pub pass: bool,
    pub samples: Vec<Duration>,
}

impl PathValidation {
    pub fn evaluate(
        samples: Vec<Duration>,
        expected_rtt: Duration,
        tolerance: f64,
        absolute_floor: Duration,
    ) -> Self {
        let measured_rtt = median(&samples);
        let budget = expected_rtt.mul_f64(tolerance) + absolute_floor;
        let diff = if measured_rtt > expected_rtt {
            measured_rtt - expected_rtt
        } else {
            expected_rtt - measured_rtt
        };
        PathValidation {
            measured_rtt,
            expected_rtt,
            tolerance,
            absolute_floor,
            pass: diff <= budget,
            samples,
        }
    }
}

fn median(samples: &[Duration]) -> Duration {
    if samples.is_empty() {
        return Duration::ZERO;
    }
    let mut sorted = samples.to_vec();
    sorted.sort();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// Default validation tolerance: ten percent of the expectation.
pub const DEFAULT_TOLERANCE: f64 = 0.10;

/// Default absolute allowance on top of the relative tolerance.
pub const DEFAULT_ABSOLUTE_FLOOR: Duration = Duration::from_millis(2);

/// Measure the path RTT against a running mover receiver at
/// `peer_address`: the median of `samples` HELLO/ACK echo round trips,
/// compared to `expected_rtt`.
pub fn measure_rtt(
    peer_address: &str,
    samples: usize,
    expected_rtt: Duration,
) -> Result<PathValidation, EmulationError> {
    let rtts = crate::mover::rtt_probe(peer_address, samples.max(1), Duration::from_secs(30))
        .map_err(|e| EmulationError::Measurement(e.to_string()))?;
    Ok(PathValidation::evaluate(
        rtts,
        expected_rtt,
        DEFAULT_TOLERANCE,
        DEFAULT_ABSOLUTE_FLOOR,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_band_is_relative_plus_floor() {
        let samples = vec![Duration::from_millis(101)];
        let v = PathValidation::evaluate(
            samples,
            Duration::from_millis(100),
            0.10,
            Duration::from_millis(2),
        );
        assert!(v.pass);

        let v = PathValidation::evaluate(
            vec![Duration::from_millis(113)],
            Duration::from_millis(100),
            0.10,
            Duration::from_millis(2),
        );
        assert!(!v.pass, "13% over with 10%+2ms budget must fail");

        // zero expectation passes on the floor alone
        let v = PathValidation::evaluate(
            vec![Duration::from_micros(300)],
            Duration::ZERO,
            0.10,
            Duration::from_millis(2),
        );
        assert!(v.pass);
    }

    #[test]
    fn median_is_order_statistic() {
        let ms = |v: u64| Duration::from_millis(v);
        assert_eq!(median(&[ms(5), ms(1), ms(9)]), ms(5));
        assert_eq!(median(&[ms(4), ms(2)]), ms(3));
        assert_eq!(median(&[]), Duration::ZERO);
    }

    #[test]
    fn profile_expectation_doubles_one_way() {
        let p = LatencyProfile::delay_ms(50);
        assert_eq!(p.expected_rtt(), Duration::from_millis(100));
        assert!(!p.is_noop());
        assert!(LatencyProfile::none().is_noop());
    }

    #[test]
    fn loopback_rtt_without_profile_is_sub_millisecond() {
        let server = crate::mover::serve("127.0.0.1:0", crate::mover::ServeConfig::default()).unwrap();
        let v = measure_rtt(&server.local_addr().to_string(), 5, Duration::ZERO).unwrap();
        assert!(v.pass, "measured {:?} should pass against 0 with the floor", v.measured_rtt);
        assert!(v.measured_rtt < Duration::from_millis(2));
        server.shutdown();
    }
}
