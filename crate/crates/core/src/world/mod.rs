// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic 2D world: landmark scenes, pose-conditioned
//! "retina" observations, goal-pursuit trajectories and dataset storage.

mod dataset;
mod episode;
mod geometry;
mod scene;

use serde::{Deserialize, Serialize};

pub use dataset::{
    decode_episode, decode_manifest, encode_episode, generate_dataset, read_dataset, write_dataset, DataConfig,
    Dataset, DatasetManifest, EpisodeEntry, SceneEntry, DATASET_FORMAT_VERSION, EPISODES_FILE, MANIFEST_FILE,
};
pub use episode::{generate_episode, generate_trajectory, EpisodeRecord, Observation, Trajectory, TrajectoryStep};
pub use geometry::{relpose, wrap_angle, Odometry, Pose, RelPose};
pub use scene::{contributing_landmarks, make_scene, render, render_with_fov, Landmark, Scene};

use crate::{Error, Result};

/// Discrete actions of the agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    Left,
    Right,
}

impl std::str::FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Action::Forward),
            "left" => Ok(Action::Left),
            "right" => Ok(Action::Right),
            other => Err(Error::Input(format!("unknown action `{other}`"))),
        }
    }
}

/// Action-space configuration. `Train` uses 10 cm / 5° steps and records
/// observations at random intervals of 1..=max_interval actions; `Eval`
/// uses 25 cm / 10° steps and records every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Train,
    Eval,
}

impl Profile {
    pub fn forward_step(self) -> f64 {
        match self {
            Profile::Train => 0.10,
            Profile::Eval => 0.25,
        }
    }

    pub fn turn_step(self) -> f64 {
        match self {
            Profile::Train => 5f64.to_radians(),
            Profile::Eval => 10f64.to_radians(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Train => "train",
            Profile::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Profile::Train),
            "eval" => Ok(Profile::Eval),
            other => Err(Error::Config(format!("unknown profile `{other}` (train|eval)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub arena_width: f64,
    pub arena_height: f64,
    pub landmarks: usize,
    pub feature_dim: usize,
    pub bins: usize,
    pub fov_deg: f64,
    pub max_range: f64,
    /// Per-axis bound of the alternative-view position offset, meters.
    pub alt_position_jitter: f64,
    /// Bound of the alternative-view heading offset, degrees.
    pub alt_heading_jitter_deg: f64,
    /// Bound of the alternative-view field-of-view offset, degrees (0 = off).
    pub alt_fov_jitter_deg: f64,
    pub max_interval: usize,
    pub goal_min_distance: f64,
    pub retina_noise_std: f64,
    pub odometry_noise_std: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            arena_width: 10.0,
            arena_height: 10.0,
            landmarks: 32,
            feature_dim: 8,
            bins: 16,
            fov_deg: 90.0,
            max_range: 5.0,
            alt_position_jitter: 0.5,
            alt_heading_jitter_deg: 50.0,
            alt_fov_jitter_deg: 0.0,
            max_interval: 8,
            goal_min_distance: 1.0,
            retina_noise_std: 0.0,
            odometry_noise_std: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn retina_len(&self) -> usize {
        self.bins.saturating_mul(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.landmarks == 0 {
            return bad("landmark count must be at least 1");
        }
        if self.feature_dim == 0 || self.bins == 0 {
            return bad("feature_dim and bins must be positive");
        }
        if !(self.arena_width > 0.0 && self.arena_height > 0.0) {
            return bad("arena dimensions must be positive");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return bad("fov_deg must lie in (0, 360]");
        }
        if !(self.max_range > 0.0) {
            return bad("max_range must be positive");
        }
        if self.max_interval == 0 {
            return bad("max_interval must be at least 1");
        }
        if self.alt_position_jitter < 0.0 || self.alt_heading_jitter_deg < 0.0 || self.alt_fov_jitter_deg < 0.0 {
            return bad("jitter bounds must be non-negative");
        }
        if self.alt_fov_jitter_deg >= self.fov_deg {
            return bad("alt_fov_jitter_deg must be smaller than fov_deg");
        }
        if self.retina_noise_std < 0.0 || self.odometry_noise_std < 0.0 {
            return bad("noise levels must be non-negative");
        }
        let margin = 2.0 * GOAL_MARGIN;
        if self.arena_width <= margin || self.arena_height <= margin {
            return bad("arena too small for goal sampling");
        }
        Ok(())
    }
}

/// Goals and start poses keep this distance from the arena walls.
pub(crate) const GOAL_MARGIN: f64 = 0.5;

/// Applies one action. Forward motion is clipped to the arena.
pub fn step(pose: Pose, action: Action, profile: Profile, world: &WorldConfig) -> Pose {
    match action {
        Action::Forward => {
            let s = profile.forward_step();
            let x = (pose.x + s * pose.heading.cos()).clamp(0.0, world.arena_width);
            let y = (pose.y + s * pose.heading.sin()).clamp(0.0, world.arena_height);
            Pose::new(x, y, pose.heading)
        }
        Action::Left => Pose::new(pose.x, pose.y, pose.heading + profile.turn_step()),
        Action::Right => Pose::new(pose.x, pose.y, pose.heading - profile.turn_step()),
    }
}
