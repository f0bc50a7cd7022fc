//! A small dataflow engine for the enhancement networks.

pub mod engine;
pub mod graph;
pub mod layers;
pub mod nets;
pub mod weights;

pub use engine::{backward, forward, infer, ForwardPass, Gradients};
pub use graph::{Activation, GraphBuilder, LayerKind, NetworkGraph, Node, ValueId};
pub use layers::Float;
pub use weights::{Tensor, WeightStore};
