//! Ordered, reliable delivery of whole frames between two endpoints.

mod loopback;
mod tcp;

pub use loopback::{loopback_pair, LinkSimulation, LoopbackEndpoint};
pub use tcp::{tcp_connect, TcpEndpoint, TcpServer};

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection to {addr} refused")]
    ConnectRefused { addr: String },
    #[error("connection reset by peer")]
    Reset,
    #[error("peer closed the connection mid-frame after {received} of {expected} bytes")]
    Truncated { received: usize, expected: usize },
    #[error("receive timed out after {0:?}")]
    Timeout(Duration),
    #[error("peer closed the connection")]
    Closed,
    #[error("frame of {0} bytes exceeds the length prefix range")]
    Oversized(usize),
    #[error("invalid address '{0}'")]
    Address(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-endpoint frame and byte totals. Bytes are frame lengths only; any
/// transport framing overhead is kept separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_received: u64,
    pub bytes_received: u64,
    pub overhead_bytes: u64,
}

#[derive(Debug, Default)]
pub(crate) struct AtomicCounters {
    frames_sent: AtomicU64,
    bytes_sent: AtomicU64,
    frames_received: AtomicU64,
    bytes_received: AtomicU64,
    overhead_bytes: AtomicU64,
}

impl AtomicCounters {
    pub(crate) fn sent(&self, bytes: usize, overhead: usize) {
        self.frames_sent.fetch_add(1, Ordering::Relaxed);
        self.bytes_sent.fetch_add(bytes as u64, Ordering::Relaxed);
        self.overhead_bytes.fetch_add(overhead as u64, Ordering::Relaxed);
    }

    pub(crate) fn received(&self, bytes: usize, overhead: usize) {
        self.frames_received.fetch_add(1, Ordering::Relaxed);
        self.bytes_received.fetch_add(bytes as u64, Ordering::Relaxed);
        self.overhead_bytes.fetch_add(overhead as u64, Ordering::Relaxed);
    }

    pub(crate) fn load(&self) -> Counters {
        Counters {
            frames_sent: self.frames_sent.load(Ordering::Relaxed),
            bytes_sent: self.bytes_sent.load(Ordering::Relaxed),
            frames_received: self.frames_received.load(Ordering::Relaxed),
            bytes_received: self.bytes_received.load(Ordering::Relaxed),
            overhead_bytes: self.overhead_bytes.load(Ordering::Relaxed),
        }
    }
}

/// One side of a frame link. Methods take `&self` so a party may send and
/// receive from different threads.
pub trait Transport: Send + Sync {
    fn send(&self, frame: &[u8]) -> Result<(), TransportError>;

    /// Blocks until a frame arrives, the peer goes away, or `timeout` passes
    /// (`None` waits indefinitely).
    fn recv(&self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError>;

    /// Returns a frame if one is already queued.
    fn try_recv(&self) -> Result<Option<Vec<u8>>, TransportError>;

    fn counters(&self) -> Counters;

    /// Simulated transfer time of everything this endpoint has sent, when the
    /// link models latency and bandwidth.
    fn simulated_send_time(&self) -> Option<Duration> {
        None
    }
}
