//! Growing-input-layer task classifier for constraint-aware cluster
//! scheduling.
//!
//! Tasks carry placement constraints over node attributes. Constraints are
//! encoded as CO-VV bit vectors over an append-only feature registry, labeled
//! by a brute-force oracle with the count of suitable nodes, and classified
//! by a small dense network whose input layer grows as new attribute values
//! appear. A discrete-time simulator compares FIFO dispatch with a scheduler
//! that fast-tracks hard-to-place tasks.

pub mod covv;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod growing;
pub mod neural;
pub mod oracle;
pub mod pipeline;
pub mod schedsim;
pub mod trace;

pub use error::{Error, Result};
pub use exec::Execution;
