// SPDX-License-Identifier: Apache-2.0

//! Memory models, decoders and losses.

pub mod decoders;
pub mod losses;
pub mod memory;
pub mod queries;
pub mod spec;
pub mod system;

pub use decoders::{DecodeOutput, MimDecoder, QueryEncoder, RpeDecoder};
pub use losses::{loss_mim, loss_rpe};
pub use memory::{Core, Encoders, MemoryModel, StateVar};
pub use queries::{agent_pose, make_training_queries, slice_inputs, QuerySet, SliceInputs};
pub use spec::{DecoderKind, Family, ModelSpec};
pub use system::{
    clamp_update_gates, param_counts, Batch, ForwardOutput, MemoryState, Network, ParamCounts, StateKind,
};
