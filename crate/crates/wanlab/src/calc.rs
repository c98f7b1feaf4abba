//! Analytic calculators for path and link arithmetic.
//!
//! Pure functions only: bandwidth-delay product, window-limited throughput
//! ceilings, BER/packet-loss conversion, and daily-volume figures. All byte
//! quantities are exact integers internally; presentation-level rounding
//! (such as the one-significant-digit daily-volume figures) is opt-in and
//! never the stored value.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalcError {
    #[error("RTT must be greater than zero for a window-limited ceiling")]
    ZeroRtt,
    #[error("frame size must be at least 1 byte")]
    ZeroFrameBytes,
    #[error("ratio {0} outside [0, 1]")]
    RatioOutOfRange(f64),
}

/// Link or path bandwidth in bits per second. Zero is permitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Bandwidth {
    bits_per_second: u64,
}

impl Bandwidth {
    pub const fn from_bps(bits_per_second: u64) -> Self {
        Self { bits_per_second }
    }

    /// Decimal gigabits per second, the unit link speeds are quoted in.
    pub const fn from_gbps(gbps: u64) -> Self {
        Self {
            bits_per_second: gbps * 1_000_000_000,
        }
    }

    pub const fn from_mbps(mbps: u64) -> Self {
        Self {
            bits_per_second: mbps * 1_000_000,
        }
    }

    pub const fn bits_per_second(self) -> u64 {
        self.bits_per_second
    }

    pub fn as_f64(self) -> f64 {
        self.bits_per_second as f64
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} bit/s", self.bits_per_second)
    }
}

/// Round-trip time at microsecond resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rtt {
    micros: u64,
}

impl Rtt {
    pub const fn from_micros(micros: u64) -> Self {
        Self { micros }
    }

    pub const fn from_millis(millis: u64) -> Self {
        Self {
            micros: millis * 1000,
        }
    }

    pub fn from_duration(d: Duration) -> Self {
        Self {
            micros: d.as_micros() as u64,
        }
    }

    pub const fn as_micros(self) -> u64 {
        self.micros
    }

    pub fn as_duration(self) -> Duration {
        Duration::from_micros(self.micros)
    }

    pub const fn is_zero(self) -> bool {
        self.micros == 0
    }
}

impl fmt::Display for Rtt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.micros % 1000 == 0 {
            write!(f, "{} ms", self.micros / 1000)
        } else {
            write!(f, "{} us", self.micros)
        }
    }
}

/// Fraction of link-layer frames lost, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketLossRate {
    ratio: f64,
}

impl PacketLossRate {
    pub fn new(ratio: f64) -> Result<Self, CalcError> {
        if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
            return Err(CalcError::RatioOutOfRange(ratio));
        }
        Ok(Self { ratio })
    }

    pub fn ratio(self) -> f64 {
        self.ratio
    }
}

/// Probability that any single transmitted bit is corrupted, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitErrorRate {
    ratio: f64,
}

impl BitErrorRate {
    pub fn new(ratio: f64) -> Result<Self, CalcError> {
        if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
            return Err(CalcError::RatioOutOfRange(ratio));
        }
        Ok(Self { ratio })
    }

    pub fn ratio(self) -> f64 {
        self.ratio
    }
}

/// Result of converting a BER back to a packet-loss rate.
///
/// The linear conversion is a first-order approximation that is only valid
/// for small rates; when it exceeds 1.0 the rate is clamped and the
/// saturation flag set instead of erroring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketLossConversion {
    pub rate: PacketLossRate,
    pub saturated: bool,
}

/// Bandwidth-delay product: the byte volume in flight on a full path, and
/// the minimum TCP window for full utilization.
///
/// Exact integer arithmetic, rounded down.
pub fn compute_bdp(bw: Bandwidth, rtt: Rtt) -> u64 {
    // bits/s * us / 8_000_000 = bytes; u128 keeps 100 Gbps x minutes exact.
    let bits = bw.bits_per_second() as u128 * rtt.as_micros() as u128;
    (bits / 8_000_000) as u64
}

/// Maximum single-stream throughput achievable with a fixed window over a
/// path of the given RTT. This is the mechanism behind the severe
/// degradation of untuned hosts on high-latency paths: a small window turns
/// a fat link into `window / RTT`.
pub fn window_ceiling(window_bytes: u64, rtt: Rtt) -> Result<Bandwidth, CalcError> {
    if rtt.is_zero() {
        return Err(CalcError::ZeroRtt);
    }
    let bits = window_bytes as u128 * 8 * 1_000_000;
    Ok(Bandwidth::from_bps((bits / rtt.as_micros() as u128) as u64))
}

/// Convert a packet-loss (frame-loss) rate to the equivalent bit error rate
/// assuming a uniform frame size: `loss / (frame_bytes * 8)`.
pub fn ber_from_packet_loss(
    loss: PacketLossRate,
    frame_bytes: u64,
) -> Result<BitErrorRate, CalcError> {
    if frame_bytes == 0 {
        return Err(CalcError::ZeroFrameBytes);
    }
    BitErrorRate::new(loss.ratio() / (frame_bytes as f64 * 8.0))
}

/// Inverse of [`ber_from_packet_loss`]: `ber * frame_bytes * 8`, clamped to
/// 1.0 with a saturation flag when the first-order approximation leaves its
/// domain.
pub fn packet_loss_from_ber(
    ber: BitErrorRate,
    frame_bytes: u64,
) -> Result<PacketLossConversion, CalcError> {
    if frame_bytes == 0 {
        return Err(CalcError::ZeroFrameBytes);
    }
    let raw = ber.ratio() * frame_bytes as f64 * 8.0;
    if raw > 1.0 {
        Ok(PacketLossConversion {
            rate: PacketLossRate::new(1.0)?,
            saturated: true,
        })
    } else {
        Ok(PacketLossConversion {
            rate: PacketLossRate::new(raw)?,
            saturated: false,
        })
    }
}

/// Bytes movable per day at a sustained rate: `bits_per_second / 8 * 86400`,
/// exact.
pub fn daily_volume(bw: Bandwidth) -> u64 {
    // bw * 86400 / 8 == bw * 10800, exact for every integer rate.
    (bw.bits_per_second() as u128 * 10800) as u64
}

/// Daily volume expressed in decimal terabytes (1 TB = 10^12 bytes).
pub fn daily_volume_decimal_tb(bw: Bandwidth) -> f64 {
    daily_volume(bw) as f64 / 1e12
}

/// One-significant-digit daily-volume figure in decimal TB, the form link
///-rate tables quote (10 / 100 / 1000). Formatting only; the exact value
/// comes from [`daily_volume`].
pub fn daily_volume_rounded_tb(bw: Bandwidth) -> u64 {
    let tb = daily_volume_decimal_tb(bw);
    if tb <= 0.0 {
        return 0;
    }
    let mag = 10f64.powf(tb.log10().floor());
    ((tb / mag).round() * mag) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    const KIB: u64 = 1024;

    #[test]
    fn bdp_transcontinental_100g() {
        // 100 Gbps x 74 ms / 8 = 925,000,000 bytes.
        let got = compute_bdp(Bandwidth::from_gbps(100), Rtt::from_millis(74));
        assert_eq!(got, 925_000_000);
    }

    #[test]
    fn bdp_zero_delay_is_zero() {
        assert_eq!(compute_bdp(Bandwidth::from_gbps(40), Rtt::from_micros(0)), 0);
    }

    #[test]
    fn bdp_1g_100ms() {
        assert_eq!(
            compute_bdp(Bandwidth::from_gbps(1), Rtt::from_millis(100)),
            12_500_000
        );
    }

    #[test]
    fn bdp_is_linear_in_each_argument() {
        for bw in [1_000_000u64, 945_000_000, 100_000_000_000] {
            for rtt_us in [1u64, 777, 74_000, 100_000] {
                let one = compute_bdp(Bandwidth::from_bps(bw), Rtt::from_micros(rtt_us));
                let dbl_bw = compute_bdp(Bandwidth::from_bps(bw * 2), Rtt::from_micros(rtt_us));
                let dbl_rtt = compute_bdp(Bandwidth::from_bps(bw), Rtt::from_micros(rtt_us * 2));
                assert!(dbl_bw >= 2 * one && dbl_bw <= 2 * one + 1);
                assert!(dbl_rtt >= 2 * one && dbl_rtt <= 2 * one + 1);
            }
        }
    }

    #[test]
    fn ceiling_64k_window_at_100ms() {
        let got = window_ceiling(64 * KIB, Rtt::from_millis(100)).unwrap();
        assert_eq!(got.bits_per_second(), 5_242_880);
    }

    #[test]
    fn ceiling_inverts_bdp() {
        let got = window_ceiling(925_000_000, Rtt::from_millis(74)).unwrap();
        assert_eq!(got, Bandwidth::from_gbps(100));
    }

    #[test]
    fn ceiling_zero_window() {
        let got = window_ceiling(0, Rtt::from_millis(10)).unwrap();
        assert_eq!(got.bits_per_second(), 0);
    }

    #[test]
    fn ceiling_rejects_zero_rtt() {
        assert_eq!(window_ceiling(1, Rtt::from_micros(0)), Err(CalcError::ZeroRtt));
    }

    #[test]
    fn ceiling_of_bdp_recovers_bandwidth_up_to_flooring() {
        for bw in [1_000_000u64, 10_000_000_000, 100_000_000_000, 123_456_789] {
            for rtt_us in [500u64, 10_000, 74_000, 100_000] {
                let bdp = compute_bdp(Bandwidth::from_bps(bw), Rtt::from_micros(rtt_us));
                let back = window_ceiling(bdp, Rtt::from_micros(rtt_us)).unwrap();
                // compute_bdp floors at most one byte; the ceiling floors at
                // most one bit/s on top of that.
                let max_floor_bits = 8_000_000 / rtt_us + 2;
                let diff = bw.abs_diff(back.bits_per_second());
                assert!(diff <= max_floor_bits, "bw {bw} rtt {rtt_us}us diff {diff}");
                // on any path whose BDP reaches a megabyte, flooring is
                // invisible at 1 part in 10^6
                if bdp >= 1_000_000 {
                    let err = (back.as_f64() - bw as f64).abs() / bw as f64;
                    assert!(err <= 1e-6, "bw {bw} rtt {rtt_us}us err {err}");
                }
            }
        }
    }

    #[test]
    fn ber_worked_example_1500_byte_frames() {
        // 0.0046% loss over 1500-byte frames ~= 3.83e-9 errored bits per bit.
        let loss = PacketLossRate::new(4.6e-5).unwrap();
        let ber = ber_from_packet_loss(loss, 1500).unwrap();
        assert!((ber.ratio() - 3.8333e-9).abs() < 1e-13);
        assert!(ber.ratio() >= 3.8e-9 && ber.ratio() <= 4.0e-9);
    }

    #[test]
    fn ber_zero_loss() {
        let ber = ber_from_packet_loss(PacketLossRate::new(0.0).unwrap(), 1500).unwrap();
        assert_eq!(ber.ratio(), 0.0);
    }

    #[test]
    fn ber_one_in_22000() {
        let loss = PacketLossRate::new(1.0 / 22_000.0).unwrap();
        let ber = ber_from_packet_loss(loss, 1500).unwrap();
        assert!((ber.ratio() - 3.7879e-9).abs() < 1e-12);
    }

    #[test]
    fn ber_rejects_zero_frame() {
        let loss = PacketLossRate::new(0.5).unwrap();
        assert_eq!(ber_from_packet_loss(loss, 0), Err(CalcError::ZeroFrameBytes));
    }

    #[test]
    fn loss_from_ber_round_trip_of_worked_example() {
        let ber = BitErrorRate::new(3.83e-9).unwrap();
        let conv = packet_loss_from_ber(ber, 1500).unwrap();
        assert!(!conv.saturated);
        assert!((conv.rate.ratio() - 4.596e-5).abs() < 1e-9);
    }

    #[test]
    fn loss_from_ber_jumbo_frames() {
        let ber = BitErrorRate::new(1e-10).unwrap();
        let conv = packet_loss_from_ber(ber, 9018).unwrap();
        assert!((conv.rate.ratio() - 7.2144e-6).abs() < 1e-12);
    }

    #[test]
    fn loss_from_zero_ber() {
        let conv = packet_loss_from_ber(BitErrorRate::new(0.0).unwrap(), 1).unwrap();
        assert_eq!(conv.rate.ratio(), 0.0);
    }

    #[test]
    fn loss_from_ber_saturates_instead_of_erroring() {
        let ber = BitErrorRate::new(1e-3).unwrap();
        let conv = packet_loss_from_ber(ber, 9000).unwrap();
        assert!(conv.saturated);
        assert_eq!(conv.rate.ratio(), 1.0);
    }

    #[test]
    fn conversion_round_trips_within_1e9() {
        for p in [1e-9, 4.6e-5, 1e-3, 0.1, 1.0] {
            for frame in [64u64, 1500, 9014, 9018] {
                let ber = ber_from_packet_loss(PacketLossRate::new(p).unwrap(), frame).unwrap();
                let back = packet_loss_from_ber(ber, frame).unwrap();
                assert!(!back.saturated);
                assert!((back.rate.ratio() - p).abs() <= p * 1e-9 + f64::EPSILON);
            }
        }
    }

    #[test]
    fn daily_volume_table() {
        // 1 / 10 / 100 Gbps move 10.8 / 108 / 1080 decimal TB per day.
        assert_eq!(daily_volume(Bandwidth::from_gbps(1)), 10_800_000_000_000);
        assert_eq!(daily_volume(Bandwidth::from_gbps(10)), 108_000_000_000_000);
        assert_eq!(daily_volume(Bandwidth::from_gbps(100)), 1_080_000_000_000_000);
        assert_eq!(daily_volume(Bandwidth::from_bps(0)), 0);
    }

    #[test]
    fn daily_volume_paper_rounding() {
        assert_eq!(daily_volume_rounded_tb(Bandwidth::from_gbps(1)), 10);
        assert_eq!(daily_volume_rounded_tb(Bandwidth::from_gbps(10)), 100);
        assert_eq!(daily_volume_rounded_tb(Bandwidth::from_gbps(100)), 1000);
        assert_eq!(daily_volume_rounded_tb(Bandwidth::from_bps(0)), 0);
    }

    #[test]
    fn daily_volume_is_proportional() {
        let base = daily_volume(Bandwidth::from_bps(12_345));
        for k in [2u64, 3, 10, 1000] {
            assert_eq!(daily_volume(Bandwidth::from_bps(12_345 * k)), base * k);
        }
    }

    #[test]
    fn ratio_types_reject_out_of_range() {
        assert!(PacketLossRate::new(-0.1).is_err());
        assert!(PacketLossRate::new(1.1).is_err());
        assert!(BitErrorRate::new(f64::NAN).is_err());
        assert!(BitErrorRate::new(f64::INFINITY).is_err());
    }
}
