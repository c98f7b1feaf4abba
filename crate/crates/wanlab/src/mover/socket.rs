//! Raw socket plumbing: per-connection congestion control, buffer clamps,
//! and listeners/connections whose buffers are set before the handshake so
//! the negotiated TCP window actually honors them.

use std::fs;
use std::io;
use std::mem;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::os::fd::{AsRawFd, FromRawFd, RawFd};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::MoverError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SocketOptions {
    /// Congestion control algorithm for this connection.
    pub cca: Option<String>,
    /// SO_SNDBUF/SO_RCVBUF clamp in bytes.
    pub buffer: Option<u64>,
}

/// Effective values read back from the socket after applying options. The
/// kernel may round buffer sizes up (it doubles the request to cover
/// bookkeeping overhead).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocketOptionsReport {
    pub requested_cca: Option<String>,
    pub effective_cca: String,
    pub requested_buffer: Option<u64>,
    pub effective_sndbuf: u64,
    pub effective_rcvbuf: u64,
}

/// Congestion control algorithms the host kernel offers.
pub fn available_ccas() -> Vec<String> {
    fs::read_to_string("/proc/sys/net/ipv4/tcp_available_congestion_control")
        .map(|s| s.split_whitespace().map(str::to_string).collect())
        .unwrap_or_default()
}

fn set_buffer(fd: RawFd, bytes: u64) -> io::Result<()> {
    let v = bytes.min(i32::MAX as u64) as libc::c_int;
    for opt in [libc::SO_SNDBUF, libc::SO_RCVBUF] {
        let rc = unsafe {
            libc::setsockopt(
                fd,
                libc::SOL_SOCKET,
                opt,
                &v as *const _ as *const libc::c_void,
                mem::size_of::<libc::c_int>() as libc::socklen_t,
            )
        };
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

fn get_int_opt(fd: RawFd, level: libc::c_int, opt: libc::c_int) -> io::Result<u64> {
    let mut v: libc::c_int = 0;
    let mut len = mem::size_of::<libc::c_int>() as libc::socklen_t;
    let rc = unsafe { libc::getsockopt(fd, level, opt, &mut v as *mut _ as *mut libc::c_void, &mut len) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(v as u64)
}

fn set_congestion(fd: RawFd, cca: &str) -> Result<(), MoverError> {
    let rc = unsafe {
        libc::setsockopt(
            fd,
            libc::IPPROTO_TCP,
            libc::TCP_CONGESTION,
            cca.as_ptr() as *const libc::c_void,
            cca.len() as libc::socklen_t,
        )
    };
    if rc != 0 {
        let err = io::Error::last_os_error();
        if matches!(err.kind(), io::ErrorKind::NotFound | io::ErrorKind::InvalidInput)
            || err.raw_os_error() == Some(libc::ENOENT)
        {
            return Err(MoverError::UnknownCca {
                requested: cca.to_string(),
                available: available_ccas().join(" "),
            });
        }
        return Err(MoverError::Io(err));
    }
    Ok(())
}

fn get_congestion(fd: RawFd) -> io::Result<String> {
    let mut buf = [0u8; 16];
    let mut len = buf.len() as libc::socklen_t;
    let rc = unsafe {
        libc::getsockopt(
            fd,
            libc::IPPROTO_TCP,
            libc::TCP_CONGESTION,
            buf.as_mut_ptr() as *mut libc::c_void,
            &mut len,
        )
    };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(len as usize);
    Ok(String::from_utf8_lossy(&buf[..end]).to_string())
}

/// Apply CCA and buffer options to a connected socket and echo back the
/// effective values.
pub fn apply_socket_options(
    stream: &TcpStream,
    opts: &SocketOptions,
) -> Result<SocketOptionsReport, MoverError> {
    apply_to_fd(stream.as_raw_fd(), opts)
}

fn apply_to_fd(fd: RawFd, opts: &SocketOptions) -> Result<SocketOptionsReport, MoverError> {
    if let Some(cca) = &opts.cca {
        set_congestion(fd, cca)?;
    }
    if let Some(bytes) = opts.buffer {
        set_buffer(fd, bytes).map_err(MoverError::Io)?;
    }
    Ok(SocketOptionsReport {
        requested_cca: opts.cca.clone(),
        effective_cca: get_congestion(fd).map_err(MoverError::Io)?,
        requested_buffer: opts.buffer,
        effective_sndbuf: get_int_opt(fd, libc::SOL_SOCKET, libc::SO_SNDBUF).map_err(MoverError::Io)?,
        effective_rcvbuf: get_int_opt(fd, libc::SOL_SOCKET, libc::SO_RCVBUF).map_err(MoverError::Io)?,
    })
}

struct OwnedFd(RawFd);

impl Drop for OwnedFd {
    fn drop(&mut self) {
        if self.0 >= 0 {
            unsafe { libc::close(self.0) };
        }
    }
}

fn sockaddr_of(addr: &SocketAddr) -> (libc::sockaddr_storage, libc::socklen_t) {
    let mut storage: libc::sockaddr_storage = unsafe { mem::zeroed() };
    let len = match addr {
        SocketAddr::V4(a) => {
            let sin = libc::sockaddr_in {
                sin_family: libc::AF_INET as libc::sa_family_t,
                sin_port: a.port().to_be(),
                sin_addr: libc::in_addr {
                    s_addr: u32::from_ne_bytes(a.ip().octets()),
                },
                sin_zero: [0; 8],
            };
            unsafe {
                std::ptr::copy_nonoverlapping(
                    &sin as *const _ as *const u8,
                    &mut storage as *mut _ as *mut u8,
                    mem::size_of::<libc::sockaddr_in>(),
                );
            }
            mem::size_of::<libc::sockaddr_in>()
        }
        SocketAddr::V6(a) => {
            let sin6 = libc::sockaddr_in6 {
                sin6_family: libc::AF_INET6 as libc::sa_family_t,
                sin6_port: a.port().to_be(),
                sin6_flowinfo: a.flowinfo(),
                sin6_addr: libc::in6_addr {
                    s6_addr: a.ip().octets(),
                },
                sin6_scope_id: a.scope_id(),
            };
            unsafe {
                std::ptr::copy_nonoverlapping(
                    &sin6 as *const _ as *const u8,
                    &mut storage as *mut _ as *mut u8,
                    mem::size_of::<libc::sockaddr_in6>(),
                );
            }
            mem::size_of::<libc::sockaddr_in6>()
        }
    };
    (storage, len as libc::socklen_t)
}

fn new_socket(addr: &SocketAddr) -> io::Result<OwnedFd> {
    let family = match addr {
        SocketAddr::V4(_) => libc::AF_INET,
        SocketAddr::V6(_) => libc::AF_INET6,
    };
    let fd = unsafe { libc::socket(family, libc::SOCK_STREAM | libc::SOCK_CLOEXEC, 0) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(OwnedFd(fd))
}

fn connect_timeout(fd: RawFd, addr: &SocketAddr, timeout: Duration) -> io::Result<()> {
    let (storage, len) = sockaddr_of(addr);
    unsafe {
        let flags = libc::fcntl(fd, libc::F_GETFL);
        libc::fcntl(fd, libc::F_SETFL, flags | libc::O_NONBLOCK);
        let rc = libc::connect(fd, &storage as *const _ as *const libc::sockaddr, len);
        if rc != 0 {
            let err = io::Error::last_os_error();
            if err.raw_os_error() != Some(libc::EINPROGRESS) {
                return Err(err);
            }
            let mut pfd = libc::pollfd {
                fd,
                events: libc::POLLOUT,
                revents: 0,
            };
            let waited = libc::poll(&mut pfd, 1, timeout.as_millis() as libc::c_int);
            if waited == 0 {
                return Err(io::Error::new(io::ErrorKind::TimedOut, "connect timed out"));
            }
            if waited < 0 {
                return Err(io::Error::last_os_error());
            }
            let so_error = get_int_opt(fd, libc::SOL_SOCKET, libc::SO_ERROR)?;
            if so_error != 0 {
                return Err(io::Error::from_raw_os_error(so_error as i32));
            }
        }
        libc::fcntl(fd, libc::F_SETFL, flags);
    }
    Ok(())
}

/// Connect with CCA and buffer options applied before the TCP handshake,
/// so the receive window (and its scale) reflect the requested clamp.
pub fn connect_with_options(
    addr_spec: &str,
    opts: &SocketOptions,
    timeout: Duration,
) -> Result<(TcpStream, SocketOptionsReport), MoverError> {
    let addrs: Vec<SocketAddr> = addr_spec
        .to_socket_addrs()
        .map_err(|e| MoverError::Connect {
            addr: addr_spec.to_string(),
            source: e,
        })?
        .collect();
    let mut last_err: Option<MoverError> = None;
    for addr in addrs {
        let sock = match new_socket(&addr) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(MoverError::Io(e));
                continue;
            }
        };
        if let Some(cca) = &opts.cca {
            set_congestion(sock.0, cca)?;
        }
        if let Some(bytes) = opts.buffer {
            set_buffer(sock.0, bytes).map_err(MoverError::Io)?;
        }
        match connect_timeout(sock.0, &addr, timeout) {
            Ok(()) => {
                let report = apply_to_fd(sock.0, &SocketOptions::default())?;
                let report = SocketOptionsReport {
                    requested_cca: opts.cca.clone(),
                    requested_buffer: opts.buffer,
                    ..report
                };
                let fd = sock.0;
                mem::forget(sock);
                let stream = unsafe { TcpStream::from_raw_fd(fd) };
                stream.set_nodelay(true).ok();
                return Ok((stream, report));
            }
            Err(e) => {
                last_err = Some(MoverError::Connect {
                    addr: addr.to_string(),
                    source: e,
                });
            }
        }
    }
    Err(last_err.unwrap_or(MoverError::Connect {
        addr: addr_spec.to_string(),
        source: io::Error::new(io::ErrorKind::NotFound, "address resolved to nothing"),
    }))
}

/// Bind a listener with an optional receive-buffer clamp set before
/// `listen`, so every accepted connection inherits the clamped window.
pub fn bind_listener(addr_spec: &str, rcvbuf: Option<u64>) -> io::Result<TcpListener> {
    let addr = addr_spec
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "unresolvable listen address"))?;
    let sock = new_socket(&addr)?;
    let one: libc::c_int = 1;
    unsafe {
        libc::setsockopt(
            sock.0,
            libc::SOL_SOCKET,
            libc::SO_REUSEADDR,
            &one as *const _ as *const libc::c_void,
            mem::size_of::<libc::c_int>() as libc::socklen_t,
        );
    }
    if let Some(bytes) = rcvbuf {
        set_buffer(sock.0, bytes)?;
    }
    let (storage, len) = sockaddr_of(&addr);
    let rc = unsafe { libc::bind(sock.0, &storage as *const _ as *const libc::sockaddr, len) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    let rc = unsafe { libc::listen(sock.0, 128) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    let fd = sock.0;
    mem::forget(sock);
    Ok(unsafe { TcpListener::from_raw_fd(fd) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener as StdListener;

    fn loopback_pair() -> (TcpStream, TcpStream) {
        let listener = StdListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = TcpStream::connect(addr).unwrap();
        let (server, _) = listener.accept().unwrap();
        (client, server)
    }

    #[test]
    fn cubic_is_applied_and_read_back() {
        if !available_ccas().iter().any(|c| c == "cubic") {
            eprintln!("cubic unavailable; skipping");
            return;
        }
        let (client, _server) = loopback_pair();
        let report = apply_socket_options(
            &client,
            &SocketOptions {
                cca: Some("cubic".into()),
                buffer: None,
            },
        )
        .unwrap();
        assert_eq!(report.effective_cca, "cubic");
    }

    #[test]
    fn unknown_cca_lists_available() {
        let (client, _server) = loopback_pair();
        let err = apply_socket_options(
            &client,
            &SocketOptions {
                cca: Some("nonexistent".into()),
                buffer: None,
            },
        )
        .unwrap_err();
        match err {
            MoverError::UnknownCca { requested, available } => {
                assert_eq!(requested, "nonexistent");
                assert!(!available.is_empty());
            }
            other => panic!("expected UnknownCca, got {other:?}"),
        }
    }

    #[test]
    fn buffer_request_read_back_at_least_requested() {
        let (client, _server) = loopback_pair();
        let report = apply_socket_options(
            &client,
            &SocketOptions {
                cca: None,
                buffer: Some(64 * 1024),
            },
        )
        .unwrap();
        assert!(report.effective_sndbuf >= 64 * 1024);
        assert!(report.effective_rcvbuf >= 64 * 1024);
    }

    #[test]
    fn connect_with_options_round_trips() {
        let listener = bind_listener("127.0.0.1:0", Some(64 * 1024)).unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || listener.accept().map(|(s, _)| s));
        let (stream, report) = connect_with_options(
            &addr.to_string(),
            &SocketOptions {
                cca: None,
                buffer: Some(128 * 1024),
            },
            Duration::from_secs(5),
        )
        .unwrap();
        assert!(report.effective_rcvbuf >= 128 * 1024);
        assert_eq!(report.requested_buffer, Some(128 * 1024));
        let server = handle.join().unwrap().unwrap();
        drop(stream);
        drop(server);
    }

    #[test]
    fn connect_to_dead_port_errors() {
        // bind then drop to get a (briefly) unbound port
        let addr = {
            let l = StdListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let res = connect_with_options(&addr.to_string(), &SocketOptions::default(), Duration::from_secs(2));
        assert!(res.is_err());
    }
}
