use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{decode, encode, frame_stats, Message, ProtocolError};
use crate::metrics::comm::{CommLedger, Direction, Kind, PhaseTracker};
use crate::transport::Transport;

/// A transport that speaks [`Message`]s and records every frame it moves in
/// a [`CommLedger`], from this party's point of view.
pub struct Link {
    transport: Box<dyn Transport>,
    ledger: CommLedger,
    outgoing: Direction,
    incoming: Direction,
    tracker: Mutex<PhaseTracker>,
    wall: Mutex<Duration>,
}

impl Link {
    pub fn new(transport: Box<dyn Transport>, ledger: CommLedger, outgoing: Direction, incoming: Direction) -> Self {
        Link {
            transport,
            ledger,
            outgoing,
            incoming,
            tracker: Mutex::new(PhaseTracker::default()),
            wall: Mutex::new(Duration::ZERO),
        }
    }

    pub fn client_side(transport: Box<dyn Transport>, ledger: CommLedger) -> Self {
        Self::new(transport, ledger, Direction::Uplink, Direction::Downlink)
    }

    pub fn server_side(transport: Box<dyn Transport>, ledger: CommLedger) -> Self {
        Self::new(transport, ledger, Direction::Downlink, Direction::Uplink)
    }

    pub fn transport(&self) -> &dyn Transport {
        self.transport.as_ref()
    }

    fn record(&self, direction: Direction, msg: &Message) {
        let phase = self.tracker.lock().expect("phase tracker poisoned").classify(msg);
        self.ledger.record(direction, phase, Kind::of(msg), &frame_stats(msg));
    }

    pub fn send(&self, msg: &Message) -> Result<(), ProtocolError> {
        let bytes = encode(msg);
        let start = Instant::now();
        self.transport.send(&bytes)?;
        *self.wall.lock().expect("wall clock poisoned") += start.elapsed();
        self.record(self.outgoing, msg);
        Ok(())
    }

    pub fn recv(&self, timeout: Option<Duration>) -> Result<Message, ProtocolError> {
        let start = Instant::now();
        let bytes = self.transport.recv(timeout)?;
        *self.wall.lock().expect("wall clock poisoned") += start.elapsed();
        let msg = decode(&bytes)?;
        self.record(self.incoming, &msg);
        Ok(msg)
    }

    pub fn try_recv(&self) -> Result<Option<Message>, ProtocolError> {
        match self.transport.try_recv()? {
            Some(bytes) => {
                let msg = decode(&bytes)?;
                self.record(self.incoming, &msg);
                Ok(Some(msg))
            }
            None => Ok(None),
        }
    }

    /// Wall-clock time spent inside send and blocking receive calls.
    pub fn take_wall_time(&self) -> Duration {
        std::mem::take(&mut *self.wall.lock().expect("wall clock poisoned"))
    }
}
