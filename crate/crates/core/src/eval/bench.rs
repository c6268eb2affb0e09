// SPDX-License-Identifier: Apache-2.0

//! Per-step cost of memory updates and decoding as the sequence grows.

use std::time::{Duration, Instant};

use kinaema_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::model::{MemoryState, ModelSpec, Network};
use crate::Result;

pub const BENCH_HEADER: &str = "model,op,step,median_ns,p95_ns,samples,footprint_bytes";

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub steps: Vec<usize>,
    pub warmup: usize,
    pub samples: usize,
    /// Each sample repeats the operation until at least this long.
    pub min_sample: Duration,
    pub queries: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            steps: vec![10, 100, 1000],
            warmup: 20,
            samples: 31,
            min_sample: Duration::from_millis(1),
            queries: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    /// `update` or `decode`.
    pub op: String,
    pub step: usize,
    pub median_ns: f64,
    pub p95_ns: f64,
    pub samples: usize,
    pub footprint_bytes: usize,
}

/// Median and 95th percentile of per-call time over `samples` samples.
fn time_op(opts: &BenchOptions, mut op: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..opts.warmup {
        op()?;
    }
    let mut reps = 1usize;
    loop {
        let t0 = Instant::now();
        for _ in 0..reps {
            op()?;
        }
        if t0.elapsed() >= opts.min_sample {
            break;
        }
        reps *= 2;
    }
    let mut per_call = Vec::with_capacity(opts.samples);
    for _ in 0..opts.samples {
        let t0 = Instant::now();
        for _ in 0..reps {
            op()?;
        }
        per_call.push(t0.elapsed().as_nanos() as f64 / reps as f64);
    }
    per_call.sort_by(f64::total_cmp);
    let median = per_call[per_call.len() / 2];
    let p95 = per_call[((per_call.len() as f64 * 0.95).ceil() as usize).clamp(1, per_call.len()) - 1];
    Ok((median, p95))
}

/// Benchmarks one model: the state is advanced with fixed inputs, and at
/// every requested step index the update (from that state) and the decode
/// of a fixed query set are timed.
pub fn bench_model(spec: &ModelSpec, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let (params, net): (ParamSet<f32>, Network) = Network::build(spec)?;
    let retina = vec![0.05f32; spec.retina_len];
    let odometry = [0.1f32, 0.0, 1.0, 0.0];
    let obs = net.encode(&params, &retina, odometry)?;
    let queries = Tensor::from_fn(vec![opts.queries, spec.retina_len], |i| ((i % 7) as f32) * 0.1);
    let mut state: MemoryState = net.init_state(&params)?;
    let mut steps = opts.steps.clone();
    steps.sort_unstable();
    let mut rows = Vec::new();
    for target in steps {
        while state.step_count < target {
            state = net.update_encoded(&params, &state, &obs)?;
        }
        let (m, p) = time_op(opts, || {
            net.update_encoded(&params, &state, &obs)?;
            Ok(())
        })?;
        rows.push(BenchRow {
            model: spec.family.to_string(),
            op: "update".into(),
            step: target,
            median_ns: m,
            p95_ns: p,
            samples: opts.samples,
            footprint_bytes: state.footprint_bytes(),
        });
        let (m, p) = time_op(opts, || {
            net.decode_state(&params, &state, &queries)?;
            Ok(())
        })?;
        rows.push(BenchRow {
            model: spec.family.to_string(),
            op: "decode".into(),
            step: target,
            median_ns: m,
            p95_ns: p,
            samples: opts.samples,
            footprint_bytes: state.footprint_bytes(),
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.0},{:.0},{},{}\n",
            r.model, r.op, r.step, r.median_ns, r.p95_ns, r.samples, r.footprint_bytes
        ));
    }
    s
}

pub fn find<'a>(rows: &'a [BenchRow], model: &str, op: &str, step: usize) -> Option<&'a BenchRow> {
    rows.iter().find(|r| r.model == model && r.op == op && r.step == step)
}
