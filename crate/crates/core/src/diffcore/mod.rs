//! Dense matrices, reverse-mode differentiation, recurrent layers and
//! optimizers.

mod checkpoint;
mod graph;
mod layers;
mod matrix;
mod params;

pub use checkpoint::{Checkpoint, FORMAT_TAG, FORMAT_VERSION};
pub use graph::{Gradients, Graph, NodeId};
pub use layers::{gru_cell, Gru, Linear, INIT_SCALE};
pub use matrix::{sq_dist, Matrix};
pub use params::{AdamConfig, ParamStore, RmsPropConfig, StoreId};

