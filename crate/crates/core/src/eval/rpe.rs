// SPDX-License-Identifier: Apache-2.0

//! Mem-RPE evaluation: roll the memory over the first `T` observations of
//! each episode and score all `2T` queries against the final pose.

use std::collections::BTreeMap;

use kinaema_tensor::{Graph, ParamSet};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{pose_errors, summarize, Tally, ThresholdAccuracy};
use crate::model::{Batch, Network};
use crate::train::batch::assemble;
use crate::world::EpisodeRecord;
use crate::{Error, Result};

/// Anything that maps a batch to `[Q, 5]` pose predictions.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, batch: &Batch) -> Result<Vec<f32>>;
}

/// A trained network.
pub struct ModelPredictor<'a> {
    pub net: &'a Network,
    pub params: &'a ParamSet<f32>,
    pub label: String,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<f32>> {
        let mut g = Graph::new(self.params);
        let state = self.net.rollout(&mut g, batch, None)?;
        let out = self.net.decode(&mut g, &state, batch)?;
        let pred = g.value(out.pred);
        if !pred.all_finite() {
            return Err(Error::Numeric("non-finite prediction during evaluation".into()));
        }
        Ok(pred.data().to_vec())
    }
}

/// Returns the ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<f32>> {
        Ok(batch.targets.clone())
    }
}

/// Always predicts one fixed relative pose.
pub struct ConstantPredictor(pub [f32; 5]);

impl ConstantPredictor {
    /// Mean target over all queries of `episodes` at the given lengths.
    pub fn dataset_mean(episodes: &[EpisodeRecord], lengths: &[usize]) -> Result<Self> {
        let mut sum = [0f64; 5];
        let mut n = 0usize;
        for &t in lengths {
            for ep in episodes {
                let q = crate::model::make_training_queries(ep, 0, t)?;
                for row in q.targets.chunks(5) {
                    for (s, &v) in sum.iter_mut().zip(row) {
                        *s += v as f64;
                    }
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::Input("no queries to average".into()));
        }
        Ok(ConstantPredictor(sum.map(|s| (s / n as f64) as f32)))
    }
}

impl Predictor for ConstantPredictor {
    fn name(&self) -> String {
        "constant".into()
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<f32>> {
        Ok(std::iter::repeat_n(self.0, batch.num_queries()).flatten().collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tallies {
    pub all: Tally,
    pub observed: Tally,
    pub alternative: Tally,
    pub within_window: Tally,
    pub beyond_window: Tally,
}

impl Tallies {
    fn merge(&mut self, o: &Tallies) {
        self.all.merge(&o.all);
        self.observed.merge(&o.observed);
        self.alternative.merge(&o.alternative);
        self.within_window.merge(&o.within_window);
        self.beyond_window.merge(&o.beyond_window);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub count: usize,
    pub thresholds: Vec<ThresholdAccuracy>,
}

impl From<&Tally> for Breakdown {
    fn from(t: &Tally) -> Self {
        Breakdown {
            count: t.count,
            thresholds: summarize(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub length: usize,
    pub all: Breakdown,
    pub observed: Breakdown,
    pub alternative: Breakdown,
    /// Queries depicting one of the last `window` observations.
    pub within_window: Option<Breakdown>,
    pub beyond_window: Option<Breakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub model: String,
    pub episodes: usize,
    pub count: usize,
    pub thresholds: Vec<ThresholdAccuracy>,
    pub observed: Breakdown,
    pub alternative: Breakdown,
    pub window: Option<usize>,
    pub by_length: Vec<LengthReport>,
    /// Accuracy at (2 m, 90°) of always predicting the dataset-mean pose.
    pub constant_floor: Option<f64>,
    pub below_chance_equivalent: Option<bool>,
}

impl AccuracyReport {
    /// Unrounded accuracy at threshold `i` over all lengths.
    pub fn accuracy(&self, i: usize) -> f64 {
        let t = &self.thresholds[i];
        if t.count == 0 {
            0.0
        } else {
            t.hits as f64 / t.count as f64
        }
    }

    pub fn length(&self, length: usize) -> Option<&LengthReport> {
        self.by_length.iter().find(|l| l.length == length)
    }

    /// Checks `acc(1m,10°) ≤ acc(1m,90°) ≤ acc(2m,90°)` on every breakdown.
    pub fn thresholds_nested(&self) -> bool {
        let nested = |ts: &[ThresholdAccuracy]| ts.windows(2).all(|w| w[0].hits <= w[1].hits);
        let mut all = vec![
            &self.thresholds[..],
            &self.observed.thresholds,
            &self.alternative.thresholds,
        ];
        for l in &self.by_length {
            all.extend([&l.all.thresholds[..], &l.observed.thresholds, &l.alternative.thresholds]);
            all.extend(l.within_window.iter().map(|b| &b.thresholds[..]));
            all.extend(l.beyond_window.iter().map(|b| &b.thresholds[..]));
        }
        all.into_iter().all(nested)
    }

    /// Records the constant-prediction floor and flags reports that fail to
    /// beat it at (2 m, 90°).
    pub fn attach_floor(&mut self, floor: f64) {
        self.constant_floor = Some(super::metrics::round4(floor));
        self.below_chance_equivalent = Some(self.accuracy(2) <= floor);
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Episodes decoded together in one graph.
    pub batch_episodes: usize,
    /// Window for the within/beyond breakdown, if any.
    pub window: Option<usize>,
    /// Use at most this many episodes.
    pub max_episodes: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch_episodes: 8,
            window: None,
            max_episodes: None,
        }
    }
}

fn tally_batch(batch: &Batch, pred: &[f32], window: Option<usize>) -> Tallies {
    let mut t = Tallies::default();
    for (q, (p, tg)) in pred.chunks(5).zip(batch.targets.chunks(5)).enumerate() {
        let (te, re) = pose_errors(p, tg);
        t.all.add(te, re);
        if batch.query_alternative[q] {
            t.alternative.add(te, re);
        } else {
            t.observed.add(te, re);
        }
        if let Some(w) = window {
            let age = batch.length - 1 - batch.query_steps[q];
            if age < w {
                t.within_window.add(te, re);
            } else {
                t.beyond_window.add(te, re);
            }
        }
    }
    t
}

/// Evaluates `predictor` at each length on the first `T` steps of every
/// episode. Episodes are processed in parallel; the result does not depend
/// on the number of threads.
pub fn eval_rpe(
    predictor: &dyn Predictor,
    episodes: &[EpisodeRecord],
    lengths: &[usize],
    opts: &EvalOptions,
) -> Result<AccuracyReport> {
    let episodes = &episodes[..opts.max_episodes.unwrap_or(episodes.len()).min(episodes.len())];
    if episodes.is_empty() || lengths.is_empty() {
        return Err(Error::Input(
            "evaluation needs at least one episode and one length".into(),
        ));
    }
    let longest = *lengths.iter().max().unwrap();
    if let Some(short) = episodes.iter().find(|e| e.length < longest) {
        return Err(Error::Input(format!(
            "episode of length {} is shorter than evaluation length {longest}",
            short.length
        )));
    }
    let mut per_length = BTreeMap::new();
    for &t in lengths {
        let chunks: Vec<&[EpisodeRecord]> = episodes.chunks(opts.batch_episodes.max(1)).collect();
        let parts = chunks
            .par_iter()
            .map(|chunk| -> Result<Tallies> {
                let slices: Vec<(&EpisodeRecord, usize)> = chunk.iter().map(|e| (e, 0)).collect();
                let batch = assemble(&slices, t)?;
                let pred = predictor.predict(&batch)?;
                Ok(tally_batch(&batch, &pred, opts.window))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = Tallies::default();
        for p in &parts {
            total.merge(p);
        }
        per_length.insert(t, total);
    }
    let mut all = Tallies::default();
    for t in per_length.values() {
        all.merge(t);
    }
    Ok(AccuracyReport {
        model: predictor.name(),
        episodes: episodes.len(),
        count: all.all.count,
        thresholds: summarize(&all.all),
        observed: (&all.observed).into(),
        alternative: (&all.alternative).into(),
        window: opts.window,
        by_length: per_length
            .iter()
            .map(|(&length, t)| LengthReport {
                length,
                all: (&t.all).into(),
                observed: (&t.observed).into(),
                alternative: (&t.alternative).into(),
                within_window: opts.window.map(|_| (&t.within_window).into()),
                beyond_window: opts.window.map(|_| (&t.beyond_window).into()),
            })
            .collect(),
        constant_floor: None,
        below_chance_equivalent: None,
    })
}

/// Evaluates a model and attaches the constant-prediction floor.
pub fn eval_with_floor(
    predictor: &dyn Predictor,
    episodes: &[EpisodeRecord],
    lengths: &[usize],
    opts: &EvalOptions,
) -> Result<AccuracyReport> {
    let mut report = eval_rpe(predictor, episodes, lengths, opts)?;
    let used = &episodes[..opts.max_episodes.unwrap_or(episodes.len()).min(episodes.len())];
    let floor = eval_rpe(&ConstantPredictor::dataset_mean(used, lengths)?, used, lengths, opts)?;
    report.attach_floor(floor.accuracy(2));
    Ok(report)
}
