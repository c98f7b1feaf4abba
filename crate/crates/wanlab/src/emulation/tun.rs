//! Userspace delay path over a TUN device.
//!
//! The backend creates a point-to-point subnet (`local` = .1, `peer` = .2)
//! on a TUN interface and runs a forwarder that reads every packet, swaps
//! source and destination addresses, and writes it back after the
//! configured one-way delay. Swapping addresses re-delivers the packet
//! locally and leaves both the IP header checksum and the TCP/UDP
//! pseudo-header checksum untouched, so the kernel TCP stack sees a real
//! path with RTT = 2 x delay. Anything that talks TCP between `local_ip`
//! and `peer_ip` gets genuine WAN behavior: window growth, ACK clocking,
//! congestion control - no `tc` binary or netem-enabled kernel needed.
//!
//! The device is not persistent: dropping the handle (or the process
//! dying) destroys it, which is the crash-safety story for this backend.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io;
use std::net::Ipv4Addr;
use std::os::fd::{AsRawFd, RawFd};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng as SmallRng;
use rand::{Rng, SeedableRng};

use super::{EmulationError, LatencyProfile};

const TUNSETIFF: libc::c_ulong = 0x4004_54ca;
const IFF_TUN: libc::c_short = 0x0001;
const IFF_NO_PI: libc::c_short = 0x1000;
const SIOCSIFADDR: libc::c_ulong = 0x8916;
const SIOCSIFNETMASK: libc::c_ulong = 0x891c;
const SIOCSIFFLAGS: libc::c_ulong = 0x8914;
const SIOCSIFMTU: libc::c_ulong = 0x8922;
const IFF_UP: libc::c_short = 0x1;
const IFF_RUNNING: libc::c_short = 0x40;

/// Jumbo-frame MTU: what 10 Gbps+ deployments run, and it keeps the
/// per-packet forwarding cost far below the path budget.
pub const DEFAULT_MTU: i32 = 9000;

/// Tail-drop limit on the delay queue, matching the netem backend.
pub const DEFAULT_QUEUE_LIMIT: usize = 10_000;

#[derive(Debug, Clone)]
pub struct TunBackend {
    pub device: String,
    /// First address of a /30; .1 is assigned locally, .2 is the far end.
    pub subnet_base: Ipv4Addr,
    pub mtu: i32,
    pub queue_limit: usize,
}

impl Default for TunBackend {
    fn default() -> Self {
        TunBackend {
            device: "wl0".into(),
            subnet_base: Ipv4Addr::new(10, 99, 77, 0),
            mtu: DEFAULT_MTU,
            queue_limit: DEFAULT_QUEUE_LIMIT,
        }
    }
}

/// A live delay path. Dropping it stops the forwarder and destroys the
/// device.
pub struct TunPathHandle {
    pub device: String,
    pub local_ip: Ipv4Addr,
    pub peer_ip: Ipv4Addr,
    stop: Arc<AtomicBool>,
    forwarder: Option<JoinHandle<()>>,
}

impl TunPathHandle {
    /// Address to bind servers on.
    pub fn local(&self) -> Ipv4Addr {
        self.local_ip
    }

    /// Address to connect to; traffic to it traverses the delay path.
    pub fn peer(&self) -> Ipv4Addr {
        self.peer_ip
    }

    pub fn teardown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.forwarder.take() {
            let _ = j.join();
        }
    }
}

impl Drop for TunPathHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.forwarder.take() {
            let _ = j.join();
        }
    }
}

fn privilege_err(e: io::Error, what: &str) -> EmulationError {
    match e.raw_os_error() {
        Some(libc::EPERM) | Some(libc::EACCES) => EmulationError::MissingPrivilege(what.to_string()),
        _ => EmulationError::Io(e),
    }
}

fn ifreq_name(name: &str) -> Result<[u8; 40], EmulationError> {
    let bytes = name.as_bytes();
    if bytes.is_empty() || bytes.len() >= 16 {
        return Err(EmulationError::UnknownInterface(name.to_string()));
    }
    let mut ifr = [0u8; 40];
    ifr[..bytes.len()].copy_from_slice(bytes);
    Ok(ifr)
}

fn ioctl(fd: RawFd, request: libc::c_ulong, ifr: &mut [u8; 40], what: &str) -> Result<(), EmulationError> {
    let rc = unsafe { libc::ioctl(fd, request, ifr.as_mut_ptr()) };
    if rc < 0 {
        return Err(privilege_err(io::Error::last_os_error(), what));
    }
    Ok(())
}

fn put_sockaddr_in(ifr: &mut [u8; 40], addr: Ipv4Addr) {
    ifr[16..18].copy_from_slice(&(libc::AF_INET as u16).to_ne_bytes());
    ifr[18..20].fill(0); // port
    ifr[20..24].copy_from_slice(&addr.octets());
}

struct ControlSocket(RawFd);

impl Drop for ControlSocket {
    fn drop(&mut self) {
        unsafe { libc::close(self.0) };
    }
}

impl TunBackend {
    pub fn local_ip(&self) -> Ipv4Addr {
        let [a, b, c, d] = self.subnet_base.octets();
        Ipv4Addr::new(a, b, c, d + 1)
    }

    pub fn peer_ip(&self) -> Ipv4Addr {
        let [a, b, c, d] = self.subnet_base.octets();
        Ipv4Addr::new(a, b, c, d + 2)
    }

    /// Whether this host can create TUN devices at all.
    pub fn available() -> bool {
        File::options().read(true).write(true).open("/dev/net/tun").is_ok()
    }

    /// Create the device, configure addresses, and start the delay
    /// forwarder with the profile's delay/jitter/loss/rate.
    pub fn apply_profile(&self, profile: &LatencyProfile) -> Result<TunPathHandle, EmulationError> {
        let tun_file = File::options()
            .read(true)
            .write(true)
            .open("/dev/net/tun")
            .map_err(|e| privilege_err(e, "opening /dev/net/tun"))?;
        let fd = tun_file.as_raw_fd();

        let mut ifr = ifreq_name(&self.device)?;
        ifr[16..18].copy_from_slice(&(IFF_TUN | IFF_NO_PI).to_ne_bytes());
        ioctl(fd, TUNSETIFF, &mut ifr, "creating the TUN device")?;

        let ctl = {
            let s = unsafe { libc::socket(libc::AF_INET, libc::SOCK_DGRAM | libc::SOCK_CLOEXEC, 0) };
            if s < 0 {
                return Err(EmulationError::Io(io::Error::last_os_error()));
            }
            ControlSocket(s)
        };
        let mut ifr = ifreq_name(&self.device)?;
        put_sockaddr_in(&mut ifr, self.local_ip());
        ioctl(ctl.0, SIOCSIFADDR, &mut ifr, "assigning the TUN address")?;

        let mut ifr = ifreq_name(&self.device)?;
        put_sockaddr_in(&mut ifr, Ipv4Addr::new(255, 255, 255, 252));
        ioctl(ctl.0, SIOCSIFNETMASK, &mut ifr, "assigning the TUN netmask")?;

        let mut ifr = ifreq_name(&self.device)?;
        ifr[16..20].copy_from_slice(&self.mtu.to_ne_bytes());
        ioctl(ctl.0, SIOCSIFMTU, &mut ifr, "setting the TUN MTU")?;

        let mut ifr = ifreq_name(&self.device)?;
        ifr[16..18].copy_from_slice(&(IFF_UP | IFF_RUNNING).to_ne_bytes());
        ioctl(ctl.0, SIOCSIFFLAGS, &mut ifr, "bringing the TUN device up")?;

        // keep kernel IPv6 chatter off the path; best effort
        let _ = std::fs::write(
            format!("/proc/sys/net/ipv6/conf/{}/disable_ipv6", self.device),
            "1",
        );

        let stop = Arc::new(AtomicBool::new(false));
        let shaper = Shaper {
            delay: profile.one_way_delay,
            jitter: profile.jitter,
            loss: profile.loss,
            rate_bps: profile.rate_cap.map(|b| b.bits_per_second()).filter(|&b| b > 0),
            queue_limit: self.queue_limit,
            mtu: self.mtu as usize,
        };
        let thread_stop = Arc::clone(&stop);
        let forwarder = std::thread::Builder::new()
            .name(format!("wanlab-tun-{}", self.device))
            .spawn(move || forward_loop(tun_file, shaper, thread_stop))?;

        Ok(TunPathHandle {
            device: self.device.clone(),
            local_ip: self.local_ip(),
            peer_ip: self.peer_ip(),
            stop,
            forwarder: Some(forwarder),
        })
    }
}

struct Shaper {
    delay: Duration,
    jitter: Duration,
    loss: f64,
    rate_bps: Option<u64>,
    queue_limit: usize,
    mtu: usize,
}

struct Scheduled {
    due: Instant,
    seq: u64,
    pkt: Vec<u8>,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.due == other.due && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

fn forward_loop(tun: File, shaper: Shaper, stop: Arc<AtomicBool>) {
    let fd = tun.as_raw_fd();
    unsafe {
        let flags = libc::fcntl(fd, libc::F_GETFL);
        libc::fcntl(fd, libc::F_SETFL, flags | libc::O_NONBLOCK);
    }
    let mut queue: BinaryHeap<Reverse<Scheduled>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut rng = SmallRng::seed_from_u64(0x77AB_1AB5);
    let mut rate_free_at = Instant::now();
    let mut buf = vec![0u8; shaper.mtu + 64];

    loop {
        // deliver everything that is due
        let now = Instant::now();
        while let Some(Reverse(head)) = queue.peek() {
            if head.due > now {
                break;
            }
            let Reverse(item) = queue.pop().expect("peeked");
            let rc = unsafe { libc::write(fd, item.pkt.as_ptr() as *const libc::c_void, item.pkt.len()) };
            if rc < 0 {
                let err = io::Error::last_os_error();
                if err.kind() == io::ErrorKind::WouldBlock {
                    // device egress full; try again shortly
                    queue.push(Reverse(item));
                    break;
                }
                // device going away: drop the packet
            }
        }

        if stop.load(Ordering::SeqCst) {
            break;
        }

        let timeout_ms = queue
            .peek()
            .map(|Reverse(s)| {
                let d = s.due.saturating_duration_since(Instant::now());
                d.as_millis().min(50) as libc::c_int
            })
            .unwrap_or(50);
        let mut pfd = libc::pollfd {
            fd,
            events: libc::POLLIN,
            revents: 0,
        };
        let rc = unsafe { libc::poll(&mut pfd, 1, timeout_ms) };
        if rc < 0 {
            let err = io::Error::last_os_error();
            if err.kind() != io::ErrorKind::Interrupted {
                break;
            }
        }
        if rc <= 0 || pfd.revents & libc::POLLIN == 0 {
            continue;
        }

        // drain a burst, then come back to delivery
        for _ in 0..256 {
            let n = unsafe { libc::read(fd, buf.as_mut_ptr() as *mut libc::c_void, buf.len()) };
            if n < 0 {
                break; // EAGAIN or device gone
            }
            let n = n as usize;
            if n < 20 || buf[0] >> 4 != 4 {
                continue; // only the IPv4 hairpin is shaped
            }
            if shaper.loss > 0.0 && rng.gen::<f64>() < shaper.loss {
                continue;
            }
            if queue.len() >= shaper.queue_limit {
                continue; // tail drop, like a full netem queue
            }
            let mut pkt = buf[..n].to_vec();
            // swap src (12..16) and dst (16..20); both checksums are
            // invariant under the swap
            for i in 0..4 {
                pkt.swap(12 + i, 16 + i);
            }
            let arrival = Instant::now();
            // uniform jitter in [-j, +j] around the delay, floored at zero
            let delay = if shaper.jitter.is_zero() {
                shaper.delay
            } else {
                let f = rng.gen::<f64>() * 2.0 - 1.0;
                if f >= 0.0 {
                    shaper.delay + shaper.jitter.mul_f64(f)
                } else {
                    shaper.delay.saturating_sub(shaper.jitter.mul_f64(-f))
                }
            };
            let mut due = arrival + delay;
            if let Some(rate) = shaper.rate_bps {
                let serialization = Duration::from_nanos(n as u64 * 8 * 1_000_000_000 / rate);
                let start = due.max(rate_free_at);
                due = start + serialization;
                rate_free_at = due;
            }
            seq += 1;
            queue.push(Reverse(Scheduled { due, seq, pkt }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emulation::measure_rtt;
    use crate::mover::{serve, ServeConfig};

    fn guard() -> bool {
        if !TunBackend::available() {
            eprintln!("skipping: /dev/net/tun unavailable (needs CAP_NET_ADMIN)");
            return false;
        }
        true
    }

    // serialize tun tests: they share device names and subnets
    static TUN_TEST_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

    #[test]
    fn delay_path_yields_doubled_rtt_and_teardown_removes_device() {
        if !guard() {
            return;
        }
        let _lock = TUN_TEST_LOCK.lock().unwrap();
        let backend = TunBackend {
            device: "wltest0".into(),
            subnet_base: Ipv4Addr::new(10, 99, 78, 0),
            ..Default::default()
        };
        let profile = LatencyProfile::delay_ms(10);
        let handle = backend.apply_profile(&profile).unwrap();
        assert!(std::path::Path::new("/sys/class/net/wltest0").exists());

        let server = serve(&format!("{}:0", handle.local()), ServeConfig::default()).unwrap();
        let port = server.local_addr().port();
        let v = measure_rtt(
            &format!("{}:{port}", handle.peer()),
            7,
            profile.expected_rtt(),
        )
        .unwrap();
        assert!(
            v.pass,
            "expected ~20ms, measured {:?} (samples {:?})",
            v.measured_rtt, v.samples
        );
        server.shutdown();
        handle.teardown();
        assert!(!std::path::Path::new("/sys/class/net/wltest0").exists());
    }

    #[test]
    fn reapplying_a_different_delay_wins() {
        if !guard() {
            return;
        }
        let _lock = TUN_TEST_LOCK.lock().unwrap();
        let backend = TunBackend {
            device: "wltest1".into(),
            subnet_base: Ipv4Addr::new(10, 99, 79, 0),
            ..Default::default()
        };
        let mut measured = Vec::new();
        for ms in [5u64, 15] {
            let profile = LatencyProfile::delay_ms(ms);
            let handle = backend.apply_profile(&profile).unwrap();
            let server = serve(&format!("{}:0", handle.local()), ServeConfig::default()).unwrap();
            let port = server.local_addr().port();
            let v = measure_rtt(&format!("{}:{port}", handle.peer()), 5, profile.expected_rtt()).unwrap();
            assert!(v.pass, "delay {ms}ms measured {:?}", v.measured_rtt);
            measured.push(v.measured_rtt);
            server.shutdown();
            handle.teardown();
        }
        assert!(measured[1] > measured[0] * 2, "second profile must govern the path");
    }
}
