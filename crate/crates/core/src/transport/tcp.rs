use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use super::{AtomicCounters, Counters, Transport, TransportError};

const PREFIX: usize = 4;

/// Frames over a TCP stream, each preceded by its length as u32 LE.
pub struct TcpEndpoint {
    reader: Mutex<TcpStream>,
    writer: Mutex<TcpStream>,
    counters: AtomicCounters,
    peer: String,
}

fn map_io(e: std::io::Error) -> TransportError {
    match e.kind() {
        ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe => TransportError::Reset,
        _ => TransportError::Io(e),
    }
}

/// Reads exactly `buf.len()` bytes. Returns how many arrived before EOF.
fn read_full(stream: &mut TcpStream, buf: &mut [u8]) -> Result<usize, TransportError> {
    let mut got = 0;
    while got < buf.len() {
        match stream.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(map_io(e)),
        }
    }
    Ok(got)
}

impl TcpEndpoint {
    fn from_stream(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        let writer = stream.try_clone()?;
        Ok(TcpEndpoint {
            reader: Mutex::new(stream),
            writer: Mutex::new(writer),
            counters: AtomicCounters::default(),
            peer,
        })
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    /// Closes both directions; the peer sees an orderly end of stream.
    pub fn close(&self) {
        let _ = self.writer.lock().expect("tcp writer poisoned").shutdown(Shutdown::Both);
    }

    fn read_frame(&self, stream: &mut TcpStream, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        let mut prefix = [0u8; PREFIX];
        // Only the first byte honours the timeout; once a frame has started
        // the remainder is read blocking so a timeout never splits a frame.
        stream.set_read_timeout(timeout.filter(|d| !d.is_zero()))?;
        let first = loop {
            match stream.read(&mut prefix[..1]) {
                Ok(n) => break n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(TransportError::Timeout(timeout.unwrap_or_default()));
                }
                Err(e) => return Err(map_io(e)),
            }
        };
        if first == 0 {
            return Err(TransportError::Closed);
        }
        stream.set_read_timeout(None)?;
        let got = read_full(stream, &mut prefix[1..])?;
        if got < PREFIX - 1 {
            return Err(TransportError::Truncated {
                received: 1 + got,
                expected: PREFIX,
            });
        }
        let len = u32::from_le_bytes(prefix) as usize;
        let mut frame = vec![0u8; len];
        let got = read_full(stream, &mut frame)?;
        if got < len {
            return Err(TransportError::Truncated {
                received: PREFIX + got,
                expected: PREFIX + len,
            });
        }
        self.counters.received(len, PREFIX);
        Ok(frame)
    }
}

impl Transport for TcpEndpoint {
    fn send(&self, frame: &[u8]) -> Result<(), TransportError> {
        let len = u32::try_from(frame.len()).map_err(|_| TransportError::Oversized(frame.len()))?;
        let mut w = self.writer.lock().expect("tcp writer poisoned");
        let mut buf = Vec::with_capacity(PREFIX + frame.len());
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(frame);
        w.write_all(&buf).map_err(map_io)?;
        w.flush().map_err(map_io)?;
        self.counters.sent(frame.len(), PREFIX);
        Ok(())
    }

    fn recv(&self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        let mut r = self.reader.lock().expect("tcp reader poisoned");
        self.read_frame(&mut r, timeout)
    }

    fn try_recv(&self) -> Result<Option<Vec<u8>>, TransportError> {
        let mut r = self.reader.lock().expect("tcp reader poisoned");
        r.set_nonblocking(true)?;
        let mut probe = [0u8; 1];
        let peeked = r.peek(&mut probe);
        r.set_nonblocking(false)?;
        match peeked {
            Ok(0) => Err(TransportError::Closed),
            Ok(_) => self.read_frame(&mut r, None).map(Some),
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(map_io(e)),
        }
    }

    fn counters(&self) -> Counters {
        self.counters.load()
    }
}

/// A listening socket that accepts one connection at a time.
pub struct TcpServer {
    listener: TcpListener,
}

impl TcpServer {
    pub fn bind(addr: &str) -> Result<Self, TransportError> {
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|_| TransportError::Address(addr.to_string()))?
            .collect();
        Ok(TcpServer {
            listener: TcpListener::bind(&addrs[..])?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.listener.local_addr()?)
    }

    pub fn accept(&self) -> Result<TcpEndpoint, TransportError> {
        let (stream, _) = self.listener.accept()?;
        TcpEndpoint::from_stream(stream)
    }
}

pub fn tcp_connect(addr: &str) -> Result<TcpEndpoint, TransportError> {
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|_| TransportError::Address(addr.to_string()))?
        .collect();
    if addrs.is_empty() {
        return Err(TransportError::Address(addr.to_string()));
    }
    let stream = TcpStream::connect(&addrs[..]).map_err(|e| match e.kind() {
        ErrorKind::ConnectionRefused => TransportError::ConnectRefused { addr: addr.to_string() },
        _ => map_io(e),
    })?;
    TcpEndpoint::from_stream(stream)
}
