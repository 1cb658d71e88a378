//! Reverse-mode differentiation over a fixed set of dense tensor ops, plus
//! an adaptive-moment optimizer.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{
    finite_difference, gradient_check, max_relative_error, numerical_gradients, GradCheckError,
};
pub use graph::{Gradients, Graph, GraphError, NodeId, Op};
pub use optim::{Adam, AdamConfig, OptimError};
