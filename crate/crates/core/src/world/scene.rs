// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Pose, WorldConfig};
use crate::seed::stream_rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: [f64; 2],
    /// Unit-norm appearance vector.
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub landmarks: Vec<Landmark>,
    pub rng_seed: u64,
}

impl Scene {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width).contains(&x) && (0.0..=self.height).contains(&y)
    }
}

/// Builds the scene for `seed`. Same seed and config give an identical scene.
pub fn make_scene(seed: u64, world: &WorldConfig) -> Result<Scene> {
    world.validate()?;
    let mut rng = stream_rng(seed, "scene", 0);
    let landmarks = (0..world.landmarks)
        .map(|_| {
            let position = [
                rng.random_range(0.0..=world.arena_width),
                rng.random_range(0.0..=world.arena_height),
            ];
            let feature = loop {
                let v: Vec<f64> = (0..world.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            };
            Landmark { position, feature }
        })
        .collect();
    Ok(Scene {
        id: format!("scene-{seed:016x}"),
        width: world.arena_width,
        height: world.arena_height,
        landmarks,
        rng_seed: seed,
    })
}

/// Angular bin of a landmark seen from `pose`, or `None` when it lies
/// outside the field of view or beyond `max_range`. Bin 0 is the rightmost.
fn landmark_bin(pose: &Pose, lm: &Landmark, fov: f64, bins: usize, max_range: f64) -> Option<(usize, f64)> {
    let (lx, ly) = pose.to_local(lm.position[0], lm.position[1]);
    let d = lx.hypot(ly);
    if d > max_range {
        return None;
    }
    let angle = if d == 0.0 { 0.0 } else { ly.atan2(lx) };
    let half = fov / 2.0;
    if angle.abs() > half {
        return None;
    }
    let width = fov / bins as f64;
    let bin = (((angle + half) / width).floor() as usize).min(bins - 1);
    Some((bin, d))
}

/// Indices of the landmarks that contribute to the retina at `pose`.
pub fn contributing_landmarks(scene: &Scene, pose: &Pose, world: &WorldConfig) -> Vec<usize> {
    let fov = world.fov_deg.to_radians();
    scene
        .landmarks
        .iter()
        .enumerate()
        .filter(|(_, lm)| landmark_bin(pose, lm, fov, world.bins, world.max_range).is_some())
        .map(|(i, _)| i)
        .collect()
}

/// Retina of `bins × feature_dim` values: each visible landmark adds
/// `feature / (1 + distance)` to its angular bin.
pub fn render(scene: &Scene, pose: &Pose, world: &WorldConfig) -> Result<Vec<f64>> {
    render_with_fov(scene, pose, world, world.fov_deg)
}

pub fn render_with_fov(scene: &Scene, pose: &Pose, world: &WorldConfig, fov_deg: f64) -> Result<Vec<f64>> {
    if !scene.contains(pose.x, pose.y) {
        return Err(Error::Domain(format!(
            "pose ({:.3}, {:.3}) lies outside the {}x{} arena",
            pose.x, pose.y, scene.width, scene.height
        )));
    }
    let f = world.feature_dim;
    let mut retina = vec![0.0; world.bins * f];
    let fov = fov_deg.to_radians();
    for lm in &scene.landmarks {
        if let Some((bin, d)) = landmark_bin(pose, lm, fov, world.bins, world.max_range) {
            let w = 1.0 / (1.0 + d);
            for (r, &v) in retina[bin * f..(bin + 1) * f].iter_mut().zip(&lm.feature) {
                *r += v * w;
            }
        }
    }
    Ok(retina)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn single(pos: [f64; 2], feature: Vec<f64>) -> Scene {
        Scene {
            id: "t".into(),
            width: 10.0,
            height: 10.0,
            landmarks: vec![Landmark { position: pos, feature }],
            rng_seed: 0,
        }
    }

    #[test]
    fn deterministic_scene() {
        let w = WorldConfig::default();
        assert_eq!(make_scene(0, &w).unwrap(), make_scene(0, &w).unwrap());
        assert_ne!(make_scene(0, &w).unwrap(), make_scene(1, &w).unwrap());
    }

    #[test]
    fn default_scene_invariants() {
        let w = WorldConfig::default();
        let s = make_scene(3, &w).unwrap();
        assert_eq!(s.landmarks.len(), 32);
        for lm in &s.landmarks {
            assert!(s.contains(lm.position[0], lm.position[1]));
            assert_eq!(lm.feature.len(), 8);
            let n: f64 = lm.feature.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_landmarks_is_config_error() {
        let w = WorldConfig {
            landmarks: 0,
            ..Default::default()
        };
        assert!(matches!(make_scene(0, &w), Err(Error::Config(_))));
    }

    #[test]
    fn single_landmark_is_scaled_feature() {
        let w = WorldConfig {
            landmarks: 1,
            ..Default::default()
        };
        let s = make_scene(5, &w).unwrap();
        let lm = &s.landmarks[0];
        let mut seen = 0;
        for i in 0..36 {
            let pose = Pose::new(5.0, 5.0, i as f64 * PI / 18.0);
            let r = render(&s, &pose, &w).unwrap();
            let nz: Vec<usize> = (0..w.bins)
                .filter(|b| r[b * 8..(b + 1) * 8].iter().any(|&v| v != 0.0))
                .collect();
            assert!(nz.len() <= 1);
            if let Some(&b) = nz.first() {
                seen += 1;
                let chunk = &r[b * 8..(b + 1) * 8];
                let scale = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (c, f) in chunk.iter().zip(&lm.feature) {
                    assert!((c - scale * f).abs() < 1e-12);
                }
            }
        }
        let d = Pose::new(5.0, 5.0, 0.0).distance_to(&Pose::new(lm.position[0], lm.position[1], 0.0));
        if d <= w.max_range {
            assert!(seen > 0);
        }
    }

    #[test]
    fn rotating_one_bin_shifts_contribution() {
        let w = WorldConfig::default();
        let width = (w.fov_deg / w.bins as f64).to_radians();
        // Landmark straight ahead at the center of bin 9 (bins span -45°..45°).
        let center = -w.fov_deg.to_radians() / 2.0 + 9.5 * width;
        let pos = [5.0 + 2.0 * center.cos(), 5.0 + 2.0 * center.sin()];
        let s = single(pos, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let bin_of = |h: f64| {
            let r = render(&s, &Pose::new(5.0, 5.0, h), &w).unwrap();
            (0..w.bins).find(|b| r[b * 8] != 0.0)
        };
        assert_eq!(bin_of(0.0), Some(9));
        assert_eq!(bin_of(width), Some(8));
        assert_eq!(bin_of(-width), Some(10));
    }

    #[test]
    fn landmark_behind_contributes_nothing() {
        let w = WorldConfig::default();
        let s = single([3.0, 5.0], [1.0; 8].iter().map(|x| x / 8f64.sqrt()).collect());
        let r = render(&s, &Pose::new(5.0, 5.0, 0.0), &w).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_is_additive_over_landmarks() {
        let w = WorldConfig::default();
        let full = make_scene(11, &w).unwrap();
        let pose = Pose::new(4.0, 6.0, 0.7);
        let a = Scene {
            landmarks: full.landmarks[..2].to_vec(),
            ..full.clone()
        };
        let parts: Vec<Scene> = (0..2)
            .map(|i| Scene {
                landmarks: vec![full.landmarks[i].clone()],
                ..full.clone()
            })
            .collect();
        let both = render(&a, &pose, &w).unwrap();
        let r0 = render(&parts[0], &pose, &w).unwrap();
        let r1 = render(&parts[1], &pose, &w).unwrap();
        for i in 0..both.len() {
            assert!((both[i] - r0[i] - r1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_outside_arena_is_domain_error() {
        let w = WorldConfig::default();
        let s = make_scene(0, &w).unwrap();
        assert!(matches!(
            render(&s, &Pose::new(-1.0, 5.0, 0.0), &w),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn far_apart_poses_see_disjoint_landmarks() {
        let w = WorldConfig {
            arena_width: 40.0,
            arena_height: 40.0,
            landmarks: 200,
            max_range: 5.0,
            ..Default::default()
        };
        let s = make_scene(2, &w).unwrap();
        let p = Pose::new(5.0, 5.0, 0.3);
        let q = Pose::new(35.0, 35.0, 2.0);
        let a = contributing_landmarks(&s, &p, &w);
        let b = contributing_landmarks(&s, &q, &w);
        assert!(a.iter().all(|i| !b.contains(i)));
        // Each retina is fully explained by its own landmark set.
        let only = |idx: &[usize]| Scene {
            landmarks: idx.iter().map(|&i| s.landmarks[i].clone()).collect(),
            ..s.clone()
        };
        assert_eq!(render(&only(&a), &p, &w).unwrap(), render(&s, &p, &w).unwrap());
        assert_eq!(render(&only(&b), &q, &w).unwrap(), render(&s, &q, &w).unwrap());
    }
}
