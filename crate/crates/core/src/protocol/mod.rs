//! Message vocabulary, framing, and the client/server session state machines
//! for conventional, decoupled, and λ-weighted hybrid split training.

mod link;
mod session;
mod wire;

pub use link::Link;
pub use session::{BatchOutcome, ClientSession, ClientState, EvalOutcome, ServerAction, ServerSession, ServerState, ServerStats};
pub use wire::{decode, encode, frame_stats, tensor_encoded_len, ControlCode, DecodeError, FrameStats, Message, Variant, HEADER_LEN, MAGIC, VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),
    #[error("transport error: {0}")]
    Transport(#[from] TransportError),
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error("illegal transition: {event} while {state}")]
    IllegalTransition { state: String, event: String },
    #[error("{what} dims {got:?} do not match expected {expected:?}")]
    DimMismatch { what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("batch id {got} does not follow {last}")]
    BatchOrder { last: u64, got: u64 },
    #[error("handshake rejected: local architecture hash {local:016x}, remote {remote:016x}")]
    Rejected { local: u64, remote: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ProtocolError {
    /// Handshake or version failures, as opposed to faults during a run.
    pub fn is_rejection(&self) -> bool {
        matches!(
            self,
            ProtocolError::Rejected { .. } | ProtocolError::Decode(DecodeError::Version { .. })
        )
    }
}

/// Training protocol. `Dsl` is the λ = 0 hybrid with gradient messages ruled
/// out entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Csl,
    Dsl,
    /// Client minimises `aux_weight * L_aux + lambda * L`; `aux_weight` is 1
    /// except as a diagnostic switch.
    Hybrid { lambda: f64, aux_weight: f64 },
}

impl Mode {
    pub fn hybrid(lambda: f64) -> Self {
        Mode::Hybrid { lambda, aux_weight: 1.0 }
    }

    /// Whether the server returns ∂L/∂z.
    pub fn sends_gradient(&self) -> bool {
        !matches!(self, Mode::Dsl)
    }

    /// Whether the client runs the auxiliary head.
    pub fn uses_aux(&self) -> bool {
        !matches!(self, Mode::Csl)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Csl => "csl",
            Mode::Dsl => "dsl",
            Mode::Hybrid { .. } => "hybrid",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Hybrid { lambda, aux_weight } if *aux_weight == 1.0 => write!(f, "hybrid:{lambda}"),
            Mode::Hybrid { lambda, aux_weight } => write!(f, "hybrid:{lambda}:{aux_weight}"),
            other => f.write_str(other.label()),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| -> Result<f64, String> {
            let v: f64 = p.parse().map_err(|_| format!("'{p}' is not a number"))?;
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(format!("weight {v} must be finite and non-negative"))
            }
        };
        match parts.as_slice() {
            ["csl"] => Ok(Mode::Csl),
            ["dsl"] => Ok(Mode::Dsl),
            ["hybrid", l] => Ok(Mode::hybrid(num(l)?)),
            ["hybrid", l, a] => Ok(Mode::Hybrid {
                lambda: num(l)?,
                aux_weight: num(a)?,
            }),
            _ => Err(format!("mode must be csl, dsl, hybrid:<lambda> or hybrid:<lambda>:<aux weight>, got '{s}'")),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}
