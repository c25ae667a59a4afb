//! Reverse-mode automatic differentiation over dense tensors.

mod conv;
mod gradcheck;
mod graph;

pub use gradcheck::{finite_difference_check, FdReport, ParamCheck, RELATIVE_FLOOR};
pub use graph::{Gradients, Graph, NodeId};
