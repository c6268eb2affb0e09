// SPDX-License-Identifier: Apache-2.0

//! A small dense-tensor library with reverse-mode automatic differentiation.
//!
//! Computation is recorded on a [`Graph`] that borrows a [`ParamSet`]. Model
//! code holds only [`ParamId`] handles, so the same architecture can be
//! evaluated in `f32` for training and in `f64` for gradient verification
//! (see [`ParamSet::cast`] and [`gradcheck`]).

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};

pub use graph::{Gradients, Graph, Var};
pub use param::{ParamBuilder, ParamId, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
