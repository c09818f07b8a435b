//! Communication, memory, and latency instrumentation.

pub mod comm;
pub mod memory;
pub mod timer;
pub mod report;
