use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimedPhase {
    ClientFwd,
    ClientBwd,
    ServerFwd,
    ServerBwd,
    Comm,
}

/// Accumulated wall-clock time per phase, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub client_fwd_ms: f64,
    pub client_bwd_ms: f64,
    pub server_fwd_ms: f64,
    pub server_bwd_ms: f64,
    pub comm_ms: f64,
}

impl PhaseTimes {
    fn slot(&mut self, phase: TimedPhase) -> &mut f64 {
        match phase {
            TimedPhase::ClientFwd => &mut self.client_fwd_ms,
            TimedPhase::ClientBwd => &mut self.client_bwd_ms,
            TimedPhase::ServerFwd => &mut self.server_fwd_ms,
            TimedPhase::ServerBwd => &mut self.server_bwd_ms,
            TimedPhase::Comm => &mut self.comm_ms,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PhaseTimer {
    times: PhaseTimes,
}

impl PhaseTimer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, phase: TimedPhase, elapsed: Duration) {
        *self.times.slot(phase) += elapsed.as_secs_f64() * 1000.0;
    }

    /// Runs `f`, charging its duration to `phase`.
    pub fn time<R>(&mut self, phase: TimedPhase, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let r = f();
        self.add(phase, start.elapsed());
        r
    }

    pub fn times(&self) -> PhaseTimes {
        self.times
    }

    /// Returns the accumulated times and resets them to zero.
    pub fn take(&mut self) -> PhaseTimes {
        std::mem::take(&mut self.times)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_accumulate_separately() {
        let mut t = PhaseTimer::new();
        t.add(TimedPhase::ClientFwd, Duration::from_millis(3));
        t.add(TimedPhase::ClientFwd, Duration::from_millis(2));
        t.add(TimedPhase::Comm, Duration::from_micros(500));
        let times = t.take();
        assert_eq!(times.client_fwd_ms, 5.0);
        assert_eq!(times.comm_ms, 0.5);
        assert_eq!(times.server_bwd_ms, 0.0);
        assert_eq!(t.times(), PhaseTimes::default());
    }
}
