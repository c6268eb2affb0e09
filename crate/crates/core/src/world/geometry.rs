// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Planar pose; `heading` is kept in `(-π, π]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    /// Expresses the world point `(px, py)` in this pose's frame.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Applies an egocentric motion.
    pub fn compose(&self, u: &Odometry) -> Pose {
        let (s, c) = self.heading.sin_cos();
        Pose::new(
            self.x + c * u.dx - s * u.dy,
            self.y + s * u.dx + c * u.dy,
            self.heading + u.sin.atan2(u.cos),
        )
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    pub fn to_array(&self) -> [f32; 3] {
        [self.x as f32, self.y as f32, self.heading as f32]
    }

    pub fn from_array(a: [f32; 3]) -> Pose {
        Pose {
            x: a[0] as f64,
            y: a[1] as f64,
            heading: a[2] as f64,
        }
    }
}

/// Egocentric motion between consecutive observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Odometry {
    pub dx: f64,
    pub dy: f64,
    pub cos: f64,
    pub sin: f64,
}

impl Odometry {
    pub const ZERO: Odometry = Odometry {
        dx: 0.0,
        dy: 0.0,
        cos: 1.0,
        sin: 0.0,
    };

    /// Motion taking `from` to `to`, in the frame of `from`.
    pub fn between(from: &Pose, to: &Pose) -> Odometry {
        let (dx, dy) = from.to_local(to.x, to.y);
        let (s, c) = wrap_angle(to.heading - from.heading).sin_cos();
        Odometry { dx, dy, cos: c, sin: s }
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.dx as f32, self.dy as f32, self.cos as f32, self.sin as f32]
    }
}

/// Relative pose of a goal seen from an agent: distance, bearing of the goal
/// position from the agent heading, and the goal heading relative to the
/// agent heading as a unit (cos, sin) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelPose {
    pub distance: f64,
    pub bearing: f64,
    pub rot_cos: f64,
    pub rot_sin: f64,
}

impl RelPose {
    /// Regression target `[d, cos θ, sin θ, cos φ, sin φ]`.
    pub fn to_target(&self) -> [f32; 5] {
        [
            self.distance as f32,
            self.bearing.cos() as f32,
            self.bearing.sin() as f32,
            self.rot_cos as f32,
            self.rot_sin as f32,
        ]
    }

    pub fn rotation(&self) -> f64 {
        self.rot_sin.atan2(self.rot_cos)
    }

    /// Goal position in the agent frame.
    pub fn position(&self) -> (f64, f64) {
        (self.distance * self.bearing.cos(), self.distance * self.bearing.sin())
    }
}

pub fn relpose(agent: &Pose, goal: &Pose) -> RelPose {
    let (lx, ly) = agent.to_local(goal.x, goal.y);
    let distance = lx.hypot(ly);
    let bearing = if distance == 0.0 { 0.0 } else { wrap_angle(ly.atan2(lx)) };
    let (s, c) = wrap_angle(goal.heading - agent.heading).sin_cos();
    RelPose {
        distance,
        bearing,
        rot_cos: c,
        rot_sin: s,
    }
}
