//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks on the CPU.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse from a scalar loss. Tapes are
//! built fresh for each step and dropped afterwards.

pub mod conv;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{Float, Tensor};
