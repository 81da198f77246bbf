//! Dense arrays, reverse-mode differentiation and optimiser plumbing.

pub mod adam;
pub mod array;
pub mod checkpoint;
pub mod params;
pub mod rng;
pub mod tape;

pub use adam::{adam_update, AdamConfig};
pub use array::{cross_entropy_mean, gelu, layer_norm, mac_counter, softmax_rows, Array, GeluKind};
pub use checkpoint::Checkpoint;
pub use params::ParamStore;
pub use rng::{Purpose, Rng};
pub use tape::{Gradients, Tape, Var};
