//! Dense f64 tensors with a reverse-mode tape and a mask-aware Adam step.
//!
//! Everything is 64-bit and single-threaded per graph; parallelism happens
//! one level up, across independent graphs.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tensor;

mod graph;

pub use adam::{AdamParam, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
