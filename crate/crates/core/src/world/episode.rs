// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    relpose, render, render_with_fov, step, wrap_angle, Action, Odometry, Pose, Profile, Scene, WorldConfig,
    GOAL_MARGIN,
};
use crate::seed::stream_rng;
use crate::{Error, Result};

/// One observation: the retina and the odometry since the previous one.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<'a> {
    pub retina: &'a [f32],
    pub odometry: [f32; 4],
}

/// One raw simulator action together with the goal being pursued.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub before: Pose,
    pub action: Action,
    pub after: Pose,
    pub goal: Pose,
}

/// Full-precision trajectory behind an [`EpisodeRecord`].
///
/// `poses` holds `T + 1` recorded poses; observation `t` is taken at
/// `poses[t]` for `t < T` and `poses[T]` is where the next recorded
/// observation would have been taken. `segments[t]` lists the actions
/// leading from `poses[t]` to `poses[t + 1]`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub segments: Vec<Vec<TrajectoryStep>>,
    pub alt_poses: Vec<Pose>,
    pub alt_fov_deg: Vec<f64>,
}

/// A generated episode, stored in single precision exactly as persisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scene_id: String,
    pub seed: u64,
    pub length: usize,
    pub retina_len: usize,
    /// `(T + 1)` poses as `[x, y, heading]`.
    pub poses: Vec<[f32; 3]>,
    /// `T × retina_len`, row-major.
    pub retinas: Vec<f32>,
    pub odometry: Vec<[f32; 4]>,
    pub alt_poses: Vec<[f32; 3]>,
    pub alt_retinas: Vec<f32>,
}

impl EpisodeRecord {
    pub fn observation(&self, t: usize) -> Observation<'_> {
        Observation {
            retina: self.retina(t),
            odometry: self.odometry[t],
        }
    }

    pub fn retina(&self, t: usize) -> &[f32] {
        &self.retinas[t * self.retina_len..(t + 1) * self.retina_len]
    }

    pub fn alt_retina(&self, t: usize) -> &[f32] {
        &self.alt_retinas[t * self.retina_len..(t + 1) * self.retina_len]
    }

    pub fn pose(&self, t: usize) -> Pose {
        Pose::from_array(self.poses[t])
    }

    pub fn alt_pose(&self, t: usize) -> Pose {
        Pose::from_array(self.alt_poses[t])
    }

    /// Number of `f32` values in the binary payload.
    pub fn payload_len(&self) -> usize {
        Self::payload_len_for(self.length, self.retina_len)
    }

    pub fn payload_len_for(length: usize, retina_len: usize) -> usize {
        (length + 1) * 3 + length * retina_len + length * 4 + length * 3 + length * retina_len
    }

    /// Like `payload_len_for` but `None` when the shape overflows, for
    /// untrusted manifests.
    pub fn checked_payload_len(length: usize, retina_len: usize) -> Option<usize> {
        let per_step = retina_len.checked_mul(2)?.checked_add(10)?;
        length.checked_mul(per_step)?.checked_add(3)
    }
}

fn random_point(rng: &mut ChaCha8Rng, world: &WorldConfig) -> (f64, f64) {
    (
        rng.random_range(GOAL_MARGIN..=world.arena_width - GOAL_MARGIN),
        rng.random_range(GOAL_MARGIN..=world.arena_height - GOAL_MARGIN),
    )
}

fn sample_goal(rng: &mut ChaCha8Rng, from: &Pose, world: &WorldConfig) -> Pose {
    let mut best = None;
    for _ in 0..64 {
        let (x, y) = random_point(rng, world);
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let g = Pose::new(x, y, heading);
        if g.distance_to(from) >= world.goal_min_distance {
            return g;
        }
        best = Some(g);
    }
    best.expect("at least one sample")
}

/// Turn toward the goal while misaligned by more than half a turn step,
/// otherwise move forward.
fn greedy_action(pose: &Pose, goal: &Pose, profile: Profile) -> Action {
    let bearing = relpose(pose, goal).bearing;
    let half = profile.turn_step() / 2.0;
    if bearing > half {
        Action::Left
    } else if bearing < -half {
        Action::Right
    } else {
        Action::Forward
    }
}

/// Chains greedy goal pursuits and records `length + 1` poses. With the
/// train profile consecutive records are 1..=max_interval actions apart.
pub fn generate_trajectory(
    scene: &Scene,
    world: &WorldConfig,
    seed: u64,
    length: usize,
    profile: Profile,
) -> Result<Trajectory> {
    if length == 0 {
        return Err(Error::Input("episode length must be at least 1".into()));
    }
    world.validate()?;
    if scene.width != world.arena_width || scene.height != world.arena_height {
        return Err(Error::Config("scene arena does not match world config".into()));
    }
    let mut rng = stream_rng(seed, "trajectory", 0);
    let (x, y) = random_point(&mut rng, world);
    let mut pose = Pose::new(x, y, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
    let mut goal = sample_goal(&mut rng, &pose, world);
    let mut poses = vec![pose];
    let mut segments = Vec::with_capacity(length);
    while poses.len() < length + 1 {
        let interval = match profile {
            Profile::Train => rng.random_range(1..=world.max_interval),
            Profile::Eval => 1,
        };
        let mut seg = Vec::with_capacity(interval);
        for _ in 0..interval {
            if pose.distance_to(&goal) <= profile.forward_step() {
                goal = sample_goal(&mut rng, &pose, world);
            }
            let action = greedy_action(&pose, &goal, profile);
            let after = step(pose, action, profile, world);
            seg.push(TrajectoryStep {
                before: pose,
                action,
                after,
                goal,
            });
            pose = after;
        }
        poses.push(pose);
        segments.push(seg);
    }
    let jitter_h = world.alt_heading_jitter_deg.to_radians();
    let (mut alt_poses, mut alt_fov_deg) = (Vec::with_capacity(length), Vec::with_capacity(length));
    for p in &poses[..length] {
        let dx = sym(&mut rng, world.alt_position_jitter);
        let dy = sym(&mut rng, world.alt_position_jitter);
        let dh = sym(&mut rng, jitter_h);
        let dfov = sym(&mut rng, world.alt_fov_jitter_deg);
        alt_poses.push(Pose::new(
            (p.x + dx).clamp(0.0, world.arena_width),
            (p.y + dy).clamp(0.0, world.arena_height),
            p.heading + dh,
        ));
        alt_fov_deg.push(world.fov_deg + dfov);
    }
    Ok(Trajectory {
        poses,
        segments,
        alt_poses,
        alt_fov_deg,
    })
}

fn sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Generates an episode: a trajectory plus rendered observations, odometry
/// and alternative views. The first odometry entry is the zero motion.
pub fn generate_episode(
    scene: &Scene,
    world: &WorldConfig,
    seed: u64,
    length: usize,
    profile: Profile,
) -> Result<EpisodeRecord> {
    let traj = generate_trajectory(scene, world, seed, length, profile)?;
    let mut noise_rng = stream_rng(seed, "observation-noise", 0);
    let retina_noise = Normal::new(0.0, world.retina_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let odo_noise = Normal::new(0.0, world.odometry_noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let retina_len = world.retina_len();
    let mut retinas = Vec::with_capacity(length * retina_len);
    let mut alt_retinas = Vec::with_capacity(length * retina_len);
    let mut odometry = Vec::with_capacity(length);
    for t in 0..length {
        let r = render(scene, &traj.poses[t], world)?;
        retinas.extend(r.iter().map(|&v| {
            let n = if world.retina_noise_std > 0.0 {
                retina_noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            (v + n) as f32
        }));
        let a = render_with_fov(scene, &traj.alt_poses[t], world, traj.alt_fov_deg[t])?;
        alt_retinas.extend(a.iter().map(|&v| v as f32));
        let mut u = if t == 0 {
            Odometry::ZERO
        } else {
            Odometry::between(&traj.poses[t - 1], &traj.poses[t])
        };
        if world.odometry_noise_std > 0.0 && t > 0 {
            u.dx += odo_noise.sample(&mut noise_rng);
            u.dy += odo_noise.sample(&mut noise_rng);
            let th = wrap_angle(u.sin.atan2(u.cos) + odo_noise.sample(&mut noise_rng));
            u.cos = th.cos();
            u.sin = th.sin();
        }
        odometry.push(u.to_array());
    }
    Ok(EpisodeRecord {
        scene_id: scene.id.clone(),
        seed,
        length,
        retina_len,
        poses: traj.poses.iter().map(Pose::to_array).collect(),
        retinas,
        odometry,
        alt_poses: traj.alt_poses.iter().map(Pose::to_array).collect(),
        alt_retinas,
    })
}
