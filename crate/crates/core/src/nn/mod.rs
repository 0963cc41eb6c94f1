//! Minimal reverse-mode differentiation with exactly the layers the ranking
//! policy and the simulation environment need.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{masked_softmax, Backward, Graph, Var};
pub use layers::{Fusion, GruParams, Linear, Mlp, TransformerBlock, TransformerShape};
pub use params::{Grads, ParamId, ParamStore, ADAGRAD_EPS};
pub use tensor::Tensor;
