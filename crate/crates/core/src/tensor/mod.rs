//! Dense tensors and a minimal reverse-mode tape.

mod dense;
mod gradcheck;
mod graph;

pub use dense::Tensor;
pub use gradcheck::gradient_check;
pub use graph::{forward, Graph, NodeId, Primitive, TapeNode};
