// SPDX-License-Identifier: Apache-2.0

//! Cross-attention dumps: which memory token each query chunk attends to.

use std::fs;
use std::path::Path;

use kinaema_tensor::{Graph, ParamSet};
use serde::{Deserialize, Serialize};

use crate::model::{DecoderKind, Network};
use crate::train::batch::assemble;
use crate::world::EpisodeRecord;
use crate::{Error, Result};

pub const ATTENTION_FILE: &str = "attention.json";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAttention {
    pub query: usize,
    pub step: usize,
    pub alternative: bool,
    /// `[head][chunk][memory token]`.
    pub probs: Vec<Vec<Vec<f64>>>,
    /// Memory token with the highest head-averaged probability, per chunk.
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub model: String,
    pub episode_seed: u64,
    pub length: usize,
    pub heads: usize,
    pub tokens: usize,
    pub chunks: usize,
    pub queries: Vec<QueryAttention>,
    /// Per head, attention mass on each memory token averaged over queries
    /// and chunks, scaled to sum to 100.
    pub head_mass: Vec<Vec<f64>>,
}

/// Runs the model over the first `length` steps of `episode` and collects
/// the probabilities of the first cross-attention layer.
pub fn collect_attention(
    net: &Network,
    params: &ParamSet<f32>,
    episode: &EpisodeRecord,
    length: usize,
) -> Result<AttentionDump> {
    let batch = assemble(&[(episode, 0)], length)?;
    let mut g = Graph::new(params);
    let state = net.rollout(&mut g, &batch, None)?;
    let out = net.decode(&mut g, &state, &batch)?;
    let (probs, heads, groups) = g
        .attention_probs(out.cross_attention)
        .ok_or_else(|| Error::Numeric("decoder exposes no attention probabilities".into()))?;
    debug_assert_eq!(groups, 1);
    let spec = &net.spec;
    let lq = spec.query_chunks;
    let (row_stride, row_skip) = match spec.decoder_kind() {
        DecoderKind::Kinaema => (lq, 0),
        DecoderKind::Chained => (lq + 1, 1),
    };
    let nq = batch.num_queries();
    let rows = nq * row_stride;
    let lk = probs.len() / (heads * rows);
    let mut queries = Vec::with_capacity(nq);
    let mut mass = vec![vec![0f64; lk]; heads];
    for q in 0..nq {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut per_chunk = Vec::with_capacity(lq);
            for c in 0..lq {
                let r = q * row_stride + row_skip + c;
                let row: Vec<f64> = probs[(h * rows + r) * lk..(h * rows + r + 1) * lk]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                for (m, &p) in mass[h].iter_mut().zip(&row) {
                    *m += p;
                }
                per_chunk.push(row);
            }
            per_head.push(per_chunk);
        }
        let assignment = (0..lq)
            .map(|c| {
                (0..lk)
                    .map(|k| (k, per_head.iter().map(|h| h[c][k]).sum::<f64>()))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(k, _)| k)
                    .unwrap_or(0)
            })
            .collect();
        queries.push(QueryAttention {
            query: q,
            step: batch.query_steps[q],
            alternative: batch.query_alternative[q],
            probs: per_head,
            assignment,
        });
    }
    for h in &mut mass {
        let total: f64 = h.iter().sum();
        if total > 0.0 {
            h.iter_mut().for_each(|v| *v *= 100.0 / total);
        }
    }
    Ok(AttentionDump {
        model: spec.family.to_string(),
        episode_seed: episode.seed,
        length,
        heads,
        tokens: lk,
        chunks: lq,
        queries,
        head_mass: mass,
    })
}

pub fn assignments_csv(dump: &AttentionDump) -> String {
    let mut s = String::from("query,step,alternative,chunk,token\n");
    for q in &dump.queries {
        for (c, t) in q.assignment.iter().enumerate() {
            s.push_str(&format!("{},{},{},{},{}\n", q.query, q.step, q.alternative, c, t));
        }
    }
    s
}

pub fn write_attention(dir: &Path, dump: &AttentionDump) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string(dump).map_err(|e| Error::Input(e.to_string()))?;
    let p = dir.join(ATTENTION_FILE);
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    let p = dir.join(ASSIGNMENTS_FILE);
    fs::write(&p, assignments_csv(dump)).map_err(|e| Error::io(&p, e))
}
