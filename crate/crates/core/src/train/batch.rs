// SPDX-License-Identifier: Apache-2.0

use kinaema_tensor::Tensor;
use rand::Rng;

use super::TrainConfig;
use crate::model::{make_training_queries, slice_inputs, Batch};
use crate::world::EpisodeRecord;
use crate::{Error, Result};

/// Uniform sequence length in `[t_min, t_max]`.
pub fn sample_length<R: Rng>(rng: &mut R, t_min: usize, t_max: usize) -> usize {
    rng.random_range(t_min..=t_max)
}

/// Picks `max(1, round(ratio · chunks))` chunks of every query to mask.
pub fn sample_mask<R: Rng>(rng: &mut R, queries: usize, chunks: usize, ratio: f64) -> Vec<bool> {
    let k = ((ratio * chunks as f64).round() as usize).clamp(1, chunks);
    let mut mask = vec![false; queries * chunks];
    for q in 0..queries {
        for i in rand::seq::index::sample(rng, chunks, k) {
            mask[q * chunks + i] = true;
        }
    }
    mask
}

/// Assembles a batch from explicit `(episode, start)` slices of one length.
pub fn assemble(slices: &[(&EpisodeRecord, usize)], length: usize) -> Result<Batch> {
    let b = slices.len();
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let k = slices[0].0.retina_len;
    let mut inputs = Vec::with_capacity(b);
    let mut qs = Vec::with_capacity(b);
    for &(ep, start) in slices {
        if ep.retina_len != k {
            return Err(Error::Input("episodes in one batch must share a retina length".into()));
        }
        inputs.push(slice_inputs(ep, start, length)?);
        qs.push(make_training_queries(ep, start, length)?);
    }
    let mut retinas = Vec::with_capacity(length);
    let mut odometry = Vec::with_capacity(length);
    for t in 0..length {
        let mut r = Vec::with_capacity(b * k);
        let mut u = Vec::with_capacity(b * 4);
        for inp in &inputs {
            r.extend_from_slice(&inp.retinas[t * k..(t + 1) * k]);
            u.extend_from_slice(&inp.odometry[t]);
        }
        retinas.push(Tensor::new(vec![b, k], r)?);
        odometry.push(Tensor::new(vec![b, 4], u)?);
    }
    let nq: usize = qs.iter().map(|q| q.len()).sum();
    let mut queries = Vec::with_capacity(nq * k);
    let mut targets = Vec::with_capacity(nq * 5);
    let mut query_steps = Vec::with_capacity(nq);
    let mut query_alternative = Vec::with_capacity(nq);
    for q in qs {
        queries.extend(q.retinas);
        targets.extend(q.targets);
        query_steps.extend(q.steps);
        query_alternative.extend(q.alternative);
    }
    Ok(Batch {
        episodes: b,
        length,
        retinas,
        odometry,
        queries: Tensor::new(vec![nq, k], queries)?,
        targets,
        query_steps,
        query_alternative,
        mim_mask: None,
    })
}

/// Draws a training batch: one length for the whole batch, episodes with
/// replacement, uniform slice offsets, and a masked-modeling mask.
pub fn sample_batch<R: Rng>(
    episodes: &[EpisodeRecord],
    cfg: &TrainConfig,
    query_chunks: usize,
    rng: &mut R,
) -> Result<Batch> {
    if episodes.is_empty() {
        return Err(Error::Input("training set has no episodes".into()));
    }
    let shortest = episodes.iter().map(|e| e.length).min().unwrap_or(0);
    if shortest < cfg.t_max {
        return Err(Error::Input(format!(
            "episodes of length {shortest} are shorter than t_max = {}",
            cfg.t_max
        )));
    }
    let length = sample_length(rng, cfg.t_min, cfg.t_max);
    let slices: Vec<(&EpisodeRecord, usize)> = (0..cfg.batch_size)
        .map(|_| {
            let ep = &episodes[rng.random_range(0..episodes.len())];
            let start = rng.random_range(0..=ep.length - length);
            (ep, start)
        })
        .collect();
    let mut batch = assemble(&slices, length)?;
    if cfg.mim_weight > 0.0 {
        batch.mim_mask = Some(sample_mask(rng, batch.num_queries(), query_chunks, cfg.mim_mask_ratio));
    }
    Ok(batch)
}
