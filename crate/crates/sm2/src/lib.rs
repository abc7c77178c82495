//! Desk-scale simultaneous machine translation lab.
//!
//! Implements confidence-estimating self-modifying training for streaming
//! translation (a dual full-context / prefix-context objective with a learned
//! per-position confidence head), a family of read/write inference policies,
//! and the latency / quality / alignment metrics needed to compare them —
//! all on a synthetic block-reversal translation task small enough to train
//! on one CPU core in minutes.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;
