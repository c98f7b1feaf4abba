//! A mover connection: plain TCP or TLS, with frame-level send/receive.
//!
//! The HELLO exchange always happens in cleartext; when both sides agree on
//! TLS the connection is upgraded in place and every later frame travels
//! encrypted.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use rustls::{ClientConnection, ServerConnection, StreamOwned};
use rustls_pki_types::ServerName;

use super::{tls, MoverError};
use crate::protocol::{read_frame, write_frame, Frame, ProtocolError};

pub enum Conn {
    Plain(TcpStream),
    TlsClient(Box<StreamOwned<ClientConnection, TcpStream>>),
    TlsServer(Box<StreamOwned<ServerConnection, TcpStream>>),
}

impl Conn {
    pub fn tcp(&self) -> &TcpStream {
        match self {
            Conn::Plain(s) => s,
            Conn::TlsClient(s) => s.get_ref(),
            Conn::TlsServer(s) => s.get_ref(),
        }
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.tcp().set_read_timeout(t)
    }

    /// Upgrade the client side to TLS against the bundled lab certificate.
    pub fn upgrade_client(self) -> Result<Conn, MoverError> {
        match self {
            Conn::Plain(tcp) => {
                let name = ServerName::try_from("localhost").expect("static name parses");
                let conn = ClientConnection::new(tls::client_config()?, name)
                    .map_err(|e| MoverError::Tls(e.to_string()))?;
                let mut stream = StreamOwned::new(conn, tcp);
                stream.flush().map_err(|e| MoverError::Tls(e.to_string()))?;
                Ok(Conn::TlsClient(Box::new(stream)))
            }
            already => Ok(already),
        }
    }

    pub fn upgrade_server(self, config: Arc<rustls::ServerConfig>) -> Result<Conn, MoverError> {
        match self {
            Conn::Plain(tcp) => {
                let conn = ServerConnection::new(config).map_err(|e| MoverError::Tls(e.to_string()))?;
                Ok(Conn::TlsServer(Box::new(StreamOwned::new(conn, tcp))))
            }
            already => Ok(already),
        }
    }

    pub fn send(&mut self, frame: &Frame) -> Result<(), ProtocolError> {
        write_frame(self, frame)?;
        self.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Frame, ProtocolError> {
        read_frame(self)
    }

    /// Receive, treating read timeouts as ticks: `Ok(None)` means the
    /// timeout elapsed with no frame; callers decide whether to keep
    /// waiting.
    pub fn recv_tick(&mut self) -> Result<Option<Frame>, ProtocolError> {
        match read_frame(self) {
            Ok(f) => Ok(Some(f)),
            Err(ProtocolError::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) =>
            {
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.read(buf),
            Conn::TlsClient(s) => s.read(buf),
            Conn::TlsServer(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.write(buf),
            Conn::TlsClient(s) => s.write(buf),
            Conn::TlsServer(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Plain(s) => s.flush(),
            Conn::TlsClient(s) => s.flush(),
            Conn::TlsServer(s) => s.flush(),
        }
    }
}
