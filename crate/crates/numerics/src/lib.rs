//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything learned in the workspace sits on this crate: a row-major
//! [`Tensor`], a recording [`Graph`] whose ops carry hand-written vector-Jacobian
//! products, a [`ParamStore`] for named weights, [`AdamW`], and named
//! [`Rng`] streams. The element type is generic over [`Real`] so that models
//! train in `f32` and the gradient checks in [`gradcheck`] run in `f64`.

mod error;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod kernels;
mod optim;
mod params;
mod real;
mod rng;
mod tensor;

pub use error::{NumericsError, Result};
pub use graph::{AttnLayout, AttnSegment, Gradients, Graph, QueryRun, RotaryTable, Var};
pub use optim::{AdamW, OptimizerState};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
