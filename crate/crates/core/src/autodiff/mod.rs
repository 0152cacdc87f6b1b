//! Minimal reverse-mode autodiff over dense NHWC tensors: the layers the
//! retrieval models need, AdamW, and a finite-difference gradient checker.

mod conv;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled};
pub use graph::{softplus, Graph, Var};
pub use params::{AdamW, Bound, ParamStore};
pub use tensor::{Scalar, Tensor};
