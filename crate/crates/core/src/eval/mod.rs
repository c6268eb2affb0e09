// SPDX-License-Identifier: Apache-2.0

//! Evaluation, sweeps, benchmarks and attention dumps.

pub mod attention;
pub mod bench;
pub mod metrics;
pub mod rpe;
pub mod sweep;

use serde::{Deserialize, Serialize};

pub use metrics::{nav_metrics, pose_errors, Tally, THRESHOLDS};
pub use rpe::{
    eval_rpe, eval_with_floor, AccuracyReport, ConstantPredictor, EvalOptions, ModelPredictor, OraclePredictor,
    Predictor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluation lengths; empty means the training length times 1, 2, 4, 8.
    pub lengths: Vec<usize>,
    pub batch_episodes: usize,
    pub max_episodes: Option<usize>,
    /// Window for the within/beyond breakdown; defaults to `model.t_trunc`
    /// for truncated-history models.
    pub window: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lengths: Vec::new(),
            batch_episodes: 8,
            max_episodes: None,
            window: None,
        }
    }
}
