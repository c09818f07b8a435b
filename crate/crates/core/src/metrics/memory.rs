//! Logical activation-memory accounting.
//!
//! Buffers are registered with their byte size when created and released
//! when their owner (usually a [`Tape`](crate::tape::Tape)) is dropped. The
//! ledger tracks the live gauge, the all-time high-water mark, and the peak
//! inside caller-delimited windows (one training step of one party).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("release of unknown or already released registration {0}")]
    DoubleRelease(u64),
    #[error("window {0} is not open")]
    UnknownWindow(usize),
}

/// One entry of the registration log. Times are logical ticks (event
/// sequence numbers), so logs are deterministic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub id: u64,
    pub tag: String,
    pub bytes: u64,
    pub registered_at: u64,
    pub released_at: Option<u64>,
}

#[derive(Debug, Default)]
struct Inner {
    live: u64,
    peak: u64,
    tick: u64,
    next_id: u64,
    open: HashMap<u64, (u64, usize)>,
    log: Option<Vec<RegistrationRecord>>,
    windows: Vec<Option<u64>>,
    registered_total: u64,
    released_total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub live: u64,
    pub peak: u64,
    pub registered_total: u64,
    pub released_total: u64,
}

#[derive(Clone, Default)]
pub struct MemoryLedger {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for MemoryLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryLedger").field("snapshot", &self.snapshot()).finish()
    }
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A ledger that also keeps the full registration log.
    pub fn with_log() -> Self {
        let ledger = Self::default();
        ledger.lock().log = Some(Vec::new());
        ledger
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register(&self, tag: &str, bytes: u64) -> ActivationGuard {
        let mut g = self.lock();
        g.tick += 1;
        let id = g.next_id;
        g.next_id += 1;
        g.live += bytes;
        g.registered_total += bytes;
        let live = g.live;
        g.peak = g.peak.max(live);
        for w in g.windows.iter_mut().flatten() {
            *w = (*w).max(live);
        }
        let tick = g.tick;
        let slot = match g.log.as_mut() {
            Some(log) => {
                log.push(RegistrationRecord {
                    id,
                    tag: tag.to_string(),
                    bytes,
                    registered_at: tick,
                    released_at: None,
                });
                log.len() - 1
            }
            None => usize::MAX,
        };
        g.open.insert(id, (bytes, slot));
        ActivationGuard {
            ledger: self.clone(),
            id,
            released: false,
        }
    }

    pub fn release(&self, id: u64) -> Result<(), MemoryError> {
        let mut g = self.lock();
        let (bytes, slot) = g.open.remove(&id).ok_or(MemoryError::DoubleRelease(id))?;
        g.tick += 1;
        g.live -= bytes;
        g.released_total += bytes;
        let tick = g.tick;
        if let Some(log) = g.log.as_mut() {
            log[slot].released_at = Some(tick);
        }
        Ok(())
    }

    pub fn live(&self) -> u64 {
        self.lock().live
    }

    pub fn peak(&self) -> u64 {
        self.lock().peak
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        let g = self.lock();
        MemorySnapshot {
            live: g.live,
            peak: g.peak,
            registered_total: g.registered_total,
            released_total: g.released_total,
        }
    }

    pub fn log(&self) -> Vec<RegistrationRecord> {
        self.lock().log.clone().unwrap_or_default()
    }

    /// Opens a window whose peak starts at the current live gauge.
    pub fn begin_window(&self) -> WindowId {
        let mut g = self.lock();
        let live = g.live;
        if let Some(pos) = g.windows.iter().position(Option::is_none) {
            g.windows[pos] = Some(live);
            WindowId(pos)
        } else {
            g.windows.push(Some(live));
            WindowId(g.windows.len() - 1)
        }
    }

    /// Closes the window and returns the highest live value seen inside it.
    pub fn end_window(&self, window: WindowId) -> Result<u64, MemoryError> {
        let mut g = self.lock();
        g.windows
            .get_mut(window.0)
            .and_then(Option::take)
            .ok_or(MemoryError::UnknownWindow(window.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowId(usize);

/// Registration handle; releases its bytes when dropped.
#[derive(Debug)]
pub struct ActivationGuard {
    ledger: MemoryLedger,
    id: u64,
    released: bool,
}

impl ActivationGuard {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn release(mut self) -> Result<(), MemoryError> {
        self.released = true;
        self.ledger.release(self.id)
    }
}

impl Drop for ActivationGuard {
    fn drop(&mut self) {
        if !self.released {
            self.released = true;
            let _ = self.ledger.release(self.id);
        }
    }
}

/// Registers `tensor`'s scalar buffer under `tag`.
pub fn ledgered_activation(ledger: &MemoryLedger, tag: &str, tensor: &Tensor) -> ActivationGuard {
    ledger.register(tag, tensor.byte_len() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn high_water_arithmetic() {
        let m = MemoryLedger::with_log();
        let a = m.register("a", 100);
        let _b = m.register("b", 50);
        a.release().unwrap();
        let _c = m.register("c", 80);
        assert_eq!(m.peak(), 150);
        assert_eq!(m.live(), 130);
        let log = m.log();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].released_at, Some(3));
        assert!(log[1].released_at.is_none());
    }

    #[test]
    fn double_release_is_reported() {
        let m = MemoryLedger::new();
        let g = m.register("x", 8);
        let id = g.id();
        g.release().unwrap();
        assert_eq!(m.release(id), Err(MemoryError::DoubleRelease(id)));
        assert_eq!(m.live(), 0);
    }

    #[test]
    fn windows_track_local_peaks() {
        let m = MemoryLedger::new();
        let base = m.register("base", 10);
        let w = m.begin_window();
        {
            let _t = m.register("t", 40);
        }
        let _u = m.register("u", 5);
        assert_eq!(m.end_window(w).unwrap(), 50);
        assert!(m.end_window(w).is_err());
        drop(base);
        let w2 = m.begin_window();
        assert_eq!(m.end_window(w2).unwrap(), 5);
    }

    #[test]
    fn conservation_after_drops() {
        let m = MemoryLedger::new();
        {
            let t = Tensor::zeros(&[4, 4], crate::tensor::DType::F32).unwrap();
            let _g = ledgered_activation(&m, "t", &t);
            assert_eq!(m.live(), 64);
        }
        let s = m.snapshot();
        assert_eq!(s.registered_total, s.released_total);
        assert_eq!(s.live, 0);
    }
}
