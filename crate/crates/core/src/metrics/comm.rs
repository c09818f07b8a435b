//! Frame byte accounting by direction, phase, and message kind.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::protocol::{ControlCode, FrameStats, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Client to server.
    Uplink,
    /// Server to client.
    Downlink,
    /// Client to the next client in the relay.
    Relay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Activation,
    Gradient,
    Handoff,
    Control,
}

impl Kind {
    pub fn of(msg: &Message) -> Kind {
        match msg {
            Message::Activation { .. } => Kind::Activation,
            Message::Gradient { .. } => Kind::Gradient,
            Message::Handoff { .. } => Kind::Handoff,
            Message::Control { .. } => Kind::Control,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub frames: u64,
    pub frame_bytes: u64,
    pub tensor_bytes: u64,
    pub label_bytes: u64,
}

impl Tally {
    fn add(&mut self, s: &FrameStats) {
        self.frames += 1;
        self.frame_bytes += s.frame_bytes;
        self.tensor_bytes += s.tensor_bytes;
        self.label_bytes += s.label_bytes;
    }

    fn plus(mut self, o: &Tally) -> Tally {
        self.frames += o.frames;
        self.frame_bytes += o.frame_bytes;
        self.tensor_bytes += o.tensor_bytes;
        self.label_bytes += o.label_bytes;
        self
    }

    fn minus(mut self, o: &Tally) -> Tally {
        self.frames -= o.frames;
        self.frame_bytes -= o.frame_bytes;
        self.tensor_bytes -= o.tensor_bytes;
        self.label_bytes -= o.label_bytes;
        self
    }
}

pub type Key = (Direction, Phase, Kind);

/// A consistent copy of the ledger's counters.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommSnapshot {
    tallies: BTreeMap<Key, Tally>,
}

impl CommSnapshot {
    pub fn get(&self, key: Key) -> Tally {
        self.tallies.get(&key).copied().unwrap_or_default()
    }

    /// Sum over every key accepted by `filter`.
    pub fn total(&self, filter: impl Fn(&Key) -> bool) -> Tally {
        self.tallies
            .iter()
            .filter(|(k, _)| filter(k))
            .fold(Tally::default(), |acc, (_, t)| acc.plus(t))
    }

    /// Counters accumulated since `earlier`.
    pub fn since(&self, earlier: &CommSnapshot) -> CommSnapshot {
        let tallies = self
            .tallies
            .iter()
            .map(|(k, t)| (*k, t.minus(&earlier.get(*k))))
            .filter(|(_, t)| t.frames > 0)
            .collect();
        CommSnapshot { tallies }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Key, &Tally)> {
        self.tallies.iter()
    }

    /// Training-phase cut-layer traffic: uplink activation frames minus
    /// their label sections.
    pub fn fwd_bytes(&self) -> u64 {
        let t = self.get((Direction::Uplink, Phase::Train, Kind::Activation));
        t.frame_bytes - t.label_bytes
    }

    /// Training-phase gradient frames.
    pub fn bwd_bytes(&self) -> u64 {
        self.get((Direction::Downlink, Phase::Train, Kind::Gradient)).frame_bytes
    }

    pub fn label_bytes(&self) -> u64 {
        self.get((Direction::Uplink, Phase::Train, Kind::Activation)).label_bytes
    }

    /// Raw tensor scalars crossing the cut during training, both directions.
    pub fn cut_tensor_bytes(&self) -> u64 {
        self.get((Direction::Uplink, Phase::Train, Kind::Activation)).tensor_bytes
            + self.get((Direction::Downlink, Phase::Train, Kind::Gradient)).tensor_bytes
    }
}

/// Shared, thread-safe frame counters.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    inner: Arc<Mutex<CommSnapshot>>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, direction: Direction, phase: Phase, kind: Kind, stats: &FrameStats) {
        let mut g = self.inner.lock().expect("comm ledger poisoned");
        g.tallies.entry((direction, phase, kind)).or_default().add(stats);
    }

    pub fn snapshot(&self) -> CommSnapshot {
        self.inner.lock().expect("comm ledger poisoned").clone()
    }
}

/// Tracks which phase frames belong to by watching the control stream:
/// everything from `EvalBegin` up to and including `EvalResult` is evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTracker {
    eval: bool,
}

impl PhaseTracker {
    /// Phase of `msg`, updating the tracker for the frames that follow.
    pub fn classify(&mut self, msg: &Message) -> Phase {
        if let Message::Control { code, .. } = msg {
            match code {
                ControlCode::EvalBegin => self.eval = true,
                ControlCode::EvalResult => {
                    self.eval = false;
                    return Phase::Eval;
                }
                _ => {}
            }
        }
        if self.eval {
            Phase::Eval
        } else {
            Phase::Train
        }
    }
}
