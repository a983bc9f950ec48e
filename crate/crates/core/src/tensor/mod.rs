//! Dense arrays, a reverse-mode compute graph and small feed-forward networks.

mod adam;
mod array;
mod checkpoint;
mod graph;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::DenseArray;
pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use mlp::{Activation, Mlp};
