//! Split learning with conventional (backprop across the cut) and decoupled
//! (auxiliary local loss) training, plus communication, memory, and latency
//! instrumentation.

pub mod data;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod orchestrator;
pub mod protocol;
pub mod tape;
pub mod tensor;
pub mod transport;

pub use optim::SgdMomentum;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor, TensorError};
