//! Asynchronous pipeline-parallel training across heterogeneous nodes.
//!
//! A model is split into contiguous layer ranges, one per node. Nodes run a
//! one-forward-one-backward schedule with weight stashing, the split follows
//! measured node speeds, and backups let the pipeline survive lost nodes.
//! Everything runs either in a deterministic virtual-time simulator
//! ([`simulation`]) or as threads over loopback TCP ([`live`]).

// `!(x > 0.0)` rejects NaN as well; the dynamic programs read best indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod clock;
pub mod config;
pub mod data;
pub mod error;
pub mod fault;
pub mod harness;
pub mod live;
pub mod metrics;
pub mod model;
pub mod node;
pub mod partitioner;
pub mod pipeline;
pub mod profiler;
pub mod replication;
pub mod simulation;
pub mod tensor;
pub mod transport;
pub mod verify;
pub mod wire;

pub use error::{Error, Result};
