// SPDX-License-Identifier: Apache-2.0

use crate::world::{relpose, EpisodeRecord, Odometry, Pose};
use crate::{Error, Result};

/// The `2T` queries of one episode slice: every observed retina followed by
/// every alternative retina, each with its pose relative to the agent at
/// the last step.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    /// `2T × K`, row-major.
    pub retinas: Vec<f32>,
    /// `2T × 5`: `[d, cos θ, sin θ, cos φ, sin φ]`.
    pub targets: Vec<f32>,
    /// Step (within the slice) whose pose the query depicts.
    pub steps: Vec<usize>,
    pub alternative: Vec<bool>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Observation stream of an episode slice, with the first odometry reset
/// to the zero motion.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceInputs {
    pub retinas: Vec<f32>,
    pub odometry: Vec<[f32; 4]>,
}

pub fn slice_inputs(ep: &EpisodeRecord, start: usize, length: usize) -> Result<SliceInputs> {
    check_slice(ep, start, length)?;
    let k = ep.retina_len;
    let mut odometry = ep.odometry[start..start + length].to_vec();
    odometry[0] = Odometry::ZERO.to_array();
    Ok(SliceInputs {
        retinas: ep.retinas[start * k..(start + length) * k].to_vec(),
        odometry,
    })
}

fn check_slice(ep: &EpisodeRecord, start: usize, length: usize) -> Result<()> {
    if length == 0 || start + length > ep.length {
        return Err(Error::Input(format!(
            "slice {start}..{} does not fit an episode of length {}",
            start + length,
            ep.length
        )));
    }
    Ok(())
}

/// Agent pose after the last step of the slice.
pub fn agent_pose(ep: &EpisodeRecord, start: usize, length: usize) -> Pose {
    ep.pose(start + length - 1)
}

/// Builds the `2T` training queries of the slice `start..start + length`.
pub fn make_training_queries(ep: &EpisodeRecord, start: usize, length: usize) -> Result<QuerySet> {
    check_slice(ep, start, length)?;
    let agent = agent_pose(ep, start, length);
    let k = ep.retina_len;
    let mut out = QuerySet {
        retinas: Vec::with_capacity(2 * length * k),
        targets: Vec::with_capacity(2 * length * 5),
        steps: Vec::with_capacity(2 * length),
        alternative: Vec::with_capacity(2 * length),
    };
    for alt in [false, true] {
        for t in 0..length {
            let (pose, retina) = if alt {
                (ep.alt_pose(start + t), ep.alt_retina(start + t))
            } else {
                (ep.pose(start + t), ep.retina(start + t))
            };
            out.retinas.extend_from_slice(retina);
            out.targets.extend_from_slice(&relpose(&agent, &pose).to_target());
            out.steps.push(t);
            out.alternative.push(alt);
        }
    }
    Ok(out)
}
