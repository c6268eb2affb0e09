// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::world::wrap_angle;
use crate::{Error, Result};

/// Success thresholds as (translation meters, rotation degrees).
pub const THRESHOLDS: [(f64, f64); 3] = [(1.0, 10.0), (1.0, 90.0), (2.0, 90.0)];

pub fn threshold_name(i: usize) -> String {
    let (d, r) = THRESHOLDS[i];
    format!("{d}m_{r}deg")
}

/// Translation and rotation error of one prediction
/// `[d, cos θ, sin θ, cos φ, sin φ]` against its target.
///
/// The predicted goal position is rebuilt from the distance and the
/// normalized bearing, so bearing mistakes show up as translation error.
pub fn pose_errors(pred: &[f32], target: &[f32]) -> (f64, f64) {
    let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let unit = |c: f64, s: f64| {
        let n = (c * c + s * s).sqrt();
        if n > 0.0 {
            (c / n, s / n)
        } else {
            (1.0, 0.0)
        }
    };
    let (pc, ps) = unit(p[1], p[2]);
    let (tc, ts) = unit(t[1], t[2]);
    let d = p[0].max(0.0);
    let dx = d * pc - t[0] * tc;
    let dy = d * ps - t[0] * ts;
    let (rc, rs) = unit(p[3], p[4]);
    let rot = wrap_angle(rs.atan2(rc) - t[4].atan2(t[3])).abs();
    ((dx * dx + dy * dy).sqrt(), rot)
}

/// Hit counts at each threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub count: usize,
    pub hits: [usize; 3],
}

impl Tally {
    pub fn add(&mut self, trans_err: f64, rot_err: f64) {
        self.count += 1;
        for (i, &(d, r)) in THRESHOLDS.iter().enumerate() {
            if trans_err < d && rot_err < r.to_radians() {
                self.hits[i] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.count += other.count;
        for i in 0..3 {
            self.hits[i] += other.hits[i];
        }
    }

    pub fn accuracy(&self, i: usize) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.hits[i] as f64 / self.count as f64
        }
    }
}

/// Accuracies rounded to four decimals for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    pub threshold: String,
    pub distance_m: f64,
    pub rotation_deg: f64,
    pub accuracy: f64,
    pub hits: usize,
    pub count: usize,
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub fn summarize(t: &Tally) -> Vec<ThresholdAccuracy> {
    (0..3)
        .map(|i| ThresholdAccuracy {
            threshold: threshold_name(i),
            distance_m: THRESHOLDS[i].0,
            rotation_deg: THRESHOLDS[i].1,
            accuracy: round4(t.accuracy(i)),
            hits: t.hits[i],
            count: t.count,
        })
        .collect()
}

/// Success rate and success weighted by path length.
pub fn nav_metrics(episodes: &[(bool, f64, f64)]) -> Result<(f64, f64)> {
    if episodes.is_empty() {
        return Err(Error::Input("no episodes".into()));
    }
    let mut sr = 0.0;
    let mut spl = 0.0;
    for &(success, len, shortest) in episodes {
        if !(len > 0.0 && shortest > 0.0) {
            return Err(Error::Input(format!(
                "path lengths must be positive, got {len} and {shortest}"
            )));
        }
        if success {
            sr += 1.0;
            spl += shortest / len.max(shortest);
        }
    }
    let n = episodes.len() as f64;
    Ok((sr / n, spl / n))
}
