//! Minimal reverse-mode tensor engine: the primitives the transfer and
//! segmentation networks need, Adam, a finite-difference checker and the
//! weight archive format.

mod adam;
pub mod archive;
pub mod conv;
mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{analytic_gradient, grad_check, numeric_gradient, relative_error, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use params::{he_kernel, Bound, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
