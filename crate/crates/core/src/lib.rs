// SPDX-License-Identifier: Apache-2.0

//! Recurrent memory models for relative pose estimation from memory, the
//! synthetic world they are trained on, and the training/evaluation stack.

pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod fuzzing;
pub mod model;
pub mod seed;
pub mod train;
pub mod world;

pub use error::{Error, LoadError, Result};
