use std::sync::Mutex;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};

use super::{AtomicCounters, Counters, Transport, TransportError};

/// Deterministic link model: each frame costs `latency` plus its size over
/// `bytes_per_second`. Time is only accounted, never slept.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinkSimulation {
    pub latency: Duration,
    /// `None` means unlimited bandwidth.
    pub bytes_per_second: Option<f64>,
}

impl LinkSimulation {
    /// Simulated milliseconds for `frames` frames totalling `bytes` bytes.
    pub fn transfer_ms(&self, frames: u64, bytes: u64) -> f64 {
        let latency = frames as f64 * self.latency.as_secs_f64() * 1000.0;
        let transfer = match self.bytes_per_second {
            Some(bw) => bytes as f64 * 1000.0 / bw,
            None => 0.0,
        };
        latency + transfer
    }
}

pub struct LoopbackEndpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    counters: AtomicCounters,
    sim: Option<LinkSimulation>,
    sent_totals: Mutex<(u64, u64)>,
}

/// Two in-process endpoints wired to each other.
pub fn loopback_pair(sim: Option<LinkSimulation>) -> (LoopbackEndpoint, LoopbackEndpoint) {
    let (atx, brx) = unbounded();
    let (btx, arx) = unbounded();
    let make = |tx, rx| LoopbackEndpoint {
        tx,
        rx,
        counters: AtomicCounters::default(),
        sim,
        sent_totals: Mutex::new((0, 0)),
    };
    (make(atx, arx), make(btx, brx))
}

impl Transport for LoopbackEndpoint {
    fn send(&self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)?;
        self.counters.sent(frame.len(), 0);
        let mut t = self.sent_totals.lock().expect("loopback totals poisoned");
        t.0 += 1;
        t.1 += frame.len() as u64;
        Ok(())
    }

    fn recv(&self, timeout: Option<Duration>) -> Result<Vec<u8>, TransportError> {
        let frame = match timeout {
            Some(d) => self.rx.recv_timeout(d).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout(d),
                RecvTimeoutError::Disconnected => TransportError::Closed,
            })?,
            None => self.rx.recv().map_err(|_| TransportError::Closed)?,
        };
        self.counters.received(frame.len(), 0);
        Ok(frame)
    }

    fn try_recv(&self) -> Result<Option<Vec<u8>>, TransportError> {
        match self.rx.try_recv() {
            Ok(frame) => {
                self.counters.received(frame.len(), 0);
                Ok(Some(frame))
            }
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(TransportError::Closed),
        }
    }

    fn counters(&self) -> Counters {
        self.counters.load()
    }

    fn simulated_send_time(&self) -> Option<Duration> {
        let sim = self.sim?;
        let (frames, bytes) = *self.sent_totals.lock().expect("loopback totals poisoned");
        Some(Duration::from_secs_f64(sim.transfer_ms(frames, bytes) / 1000.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_arrive_in_order_with_matching_counters() {
        let (a, b) = loopback_pair(None);
        for i in 0..100u32 {
            a.send(&i.to_le_bytes()[..(i as usize % 4) + 1]).unwrap();
        }
        for i in 0..100u32 {
            assert_eq!(b.recv(None).unwrap(), i.to_le_bytes()[..(i as usize % 4) + 1].to_vec());
        }
        let (ca, cb) = (a.counters(), b.counters());
        assert_eq!(ca.frames_sent, 100);
        assert_eq!(ca.frames_sent, cb.frames_received);
        assert_eq!(ca.bytes_sent, cb.bytes_received);
        assert!(b.try_recv().unwrap().is_none());
    }

    #[test]
    fn latency_accumulates_per_frame() {
        let sim = LinkSimulation {
            latency: Duration::from_millis(5),
            bytes_per_second: None,
        };
        let (a, _b) = loopback_pair(Some(sim));
        for _ in 0..3 {
            a.send(&[0; 10]).unwrap();
        }
        assert_eq!(sim.transfer_ms(3, 30), 15.0);
        assert_eq!(a.simulated_send_time().unwrap(), Duration::from_millis(15));
    }

    #[test]
    fn bandwidth_limited_transfer() {
        let sim = LinkSimulation {
            latency: Duration::ZERO,
            bytes_per_second: Some(1_048_576.0),
        };
        assert_eq!(sim.transfer_ms(1, 2_097_152), 2000.0);
    }

    #[test]
    fn dropped_peer_is_closed_and_timeout_is_distinct() {
        let (a, b) = loopback_pair(None);
        assert!(matches!(a.recv(Some(Duration::from_millis(1))), Err(TransportError::Timeout(_))));
        drop(b);
        assert!(matches!(a.send(&[1]), Err(TransportError::Closed)));
        assert!(matches!(a.recv(None), Err(TransportError::Closed)));
    }
}
