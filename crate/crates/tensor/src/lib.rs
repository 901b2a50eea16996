//! Dense tensors, a reverse-mode tape and the numeric plumbing shared by the
//! matching pipeline.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the double-precision instantiation used by the models.

mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod linalg;
pub mod optim;
pub mod params;
mod real;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradReport};
pub use graph::{Axis, Graph, Standardize, Var};
pub use linalg::{self_adjoint_eigen, SymEigen};
pub use optim::Adam;
pub use params::{Binder, ParamStore};
pub use real::{ordered_sum, Real};
pub use rng::Rng;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamStore64 = ParamStore<f64>;
