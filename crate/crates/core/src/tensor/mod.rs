//! Dense `f64` arrays, a reverse-mode tape, Adam, and flat checkpoints.

mod array;
pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod init;
mod optim;

pub use array::DenseArray;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, ParamStore};
pub use optim::Adam;

