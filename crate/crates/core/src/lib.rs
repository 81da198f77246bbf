//! Window-level recurrence for decoder-only transformer language models.
//!
//! A long document is processed as a sequence of fixed-length windows.
//! After each window a compact summary of its block outputs is pooled,
//! passed through a small feed-forward network, and handed to the next
//! window as one extra key/value slot at a chosen layer.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod flops;
pub mod model;
pub mod nn;
pub mod par;
pub mod recurrence;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
pub use model::{CarryMask, DecodePolicy, Model, ModelConfig};
pub use par::Parallelism;
pub use recurrence::{CarryState, PoolNorm};
pub use windowing::{make_plan, EvalReport, PlanMode, WindowPlan, WindowSpec};
