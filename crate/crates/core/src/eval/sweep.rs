// SPDX-License-Identifier: Apache-2.0

//! Length-generalization sweeps and their CSV form.

use super::metrics::{threshold_name, THRESHOLDS};
use super::rpe::{eval_rpe, EvalOptions, Predictor};
use crate::world::EpisodeRecord;
use crate::{Error, Result};

pub const SWEEP_HEADER: &str = "model,length,threshold,accuracy,hits,count";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub length: usize,
    pub threshold: String,
    pub accuracy: f64,
    pub hits: usize,
    pub count: usize,
}

/// The default grid: the training length times 1, 2, 4 and 8.
pub fn default_lengths(t_max: usize) -> Vec<usize> {
    [1, 2, 4, 8].iter().map(|f| f * t_max).collect()
}

pub fn sweep_lengths(
    predictor: &dyn Predictor,
    episodes: &[EpisodeRecord],
    lengths: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &t in lengths {
        let report = eval_rpe(predictor, episodes, &[t], opts)?;
        for (i, th) in report.thresholds.iter().enumerate().take(THRESHOLDS.len()) {
            rows.push(SweepRow {
                model: report.model.clone(),
                length: t,
                threshold: threshold_name(i),
                accuracy: th.accuracy,
                hits: th.hits,
                count: th.count,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{},{}\n",
            r.model, r.length, r.threshold, r.accuracy, r.hits, r.count
        ));
    }
    s
}

pub fn from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::Input("sweep CSV has an unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Input(format!("sweep CSV row {}: `{l}`", i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(SweepRow {
                model: f[0].to_string(),
                length: f[1].parse().map_err(|_| bad())?,
                threshold: f[2].to_string(),
                accuracy: f[3].parse().map_err(|_| bad())?,
                hits: f[4].parse().map_err(|_| bad())?,
                count: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
