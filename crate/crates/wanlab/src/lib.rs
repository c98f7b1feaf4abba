//! wanlab: a desk-scale laboratory for end-to-end data-movement benchmarking.
//!
//! The crate bundles everything needed to study file-transfer performance
//! over emulated wide-area paths on one or two ordinary hosts:
//!
//! - [`calc`]: analytic calculators (bandwidth-delay product, window-limited
//!   throughput ceilings, BER/packet-loss conversion, daily volume).
//! - [`dataset`]: deterministic synthetic datasets with integrity manifests,
//!   plus the power-of-two sweep series used by the benchmark harness.
//! - [`protocol`]: the mover's framed wire protocol.
//! - [`mover`]: a concurrent TCP file mover (bulk and streaming sessions,
//!   burst-buffer staging, discard/synthetic endpoints).
//! - [`emulation`]: WAN latency provisioning (kernel traffic control, or a
//!   built-in userspace TUN path where `tc`/netem is unavailable) and RTT
//!   validation.
//! - [`tuning`]: kernel/NIC tuning audit and apply.
//! - [`sweep`]: the benchmark sweep orchestrator with an append-only record
//!   log.
//! - [`report`]: statistics over sweep records and gnuplot-ready artifacts.
//! - [`cli`]: the `wanlab` command-line front end.

pub mod calc;
pub mod cli;
pub mod dataset;
pub mod emulation;
pub mod mover;
pub mod protocol;
pub mod report;
pub mod sweep;
pub mod tuning;
