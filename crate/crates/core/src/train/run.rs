// SPDX-License-Identifier: Apache-2.0

//! The training loop: producer thread for batches, AdamW steps, periodic
//! validation, JSON-lines log and `last/` + `best/` checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::time::Instant;

use kinaema_tensor::{Graph, ParamSet};
use serde::{Deserialize, Serialize};

use super::batch::sample_batch;
use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::optim::{clip_global_norm, AdamW, Schedule};
use super::TrainConfig;
use crate::eval::{eval_rpe, EvalOptions, ModelPredictor};
use crate::model::{Batch, ModelSpec, Network};
use crate::seed::stream_rng;
use crate::world::EpisodeRecord;
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.json";
pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub l_rpe: f64,
    pub l_mim: Option<f64>,
    pub grad_norm: f64,
}

/// One optimization step on `batch`.
pub fn train_step(
    net: &Network,
    params: &mut ParamSet<f32>,
    opt: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<StepStats> {
    let (stats, mut grads) = {
        let mut g = Graph::new(&*params);
        let out = net.forward(&mut g, batch, cfg.mim_weight, cfg.bptt_window)?;
        let loss = g.scalar(out.loss) as f64;
        if !loss.is_finite() {
            let norm: f64 = params
                .iter()
                .map(|(_, p)| p.value.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (parameter norm {norm:.4e})"
            )));
        }
        let stats = StepStats {
            loss,
            l_rpe: g.scalar(out.rpe) as f64,
            l_mim: out.mim.map(|m| g.scalar(m) as f64),
            grad_norm: 0.0,
        };
        (stats, g.backward(out.loss)?)
    };
    let norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
    }
    opt.update(params, &grads, lr);
    Ok(StepStats {
        grad_norm: norm,
        ..stats
    })
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub length: usize,
    pub loss: f64,
    pub l_rpe: f64,
    pub l_mim: Option<f64>,
    pub grad_norm: f64,
    /// Validation accuracies at the three thresholds, when validated.
    pub val: Option<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub net: Network,
    pub steps_run: usize,
    pub best_metric: Option<f64>,
    pub log: Vec<LogRecord>,
}

pub struct TrainRequest<'a> {
    pub spec: &'a ModelSpec,
    pub cfg: &'a TrainConfig,
    pub train: Arc<Vec<EpisodeRecord>>,
    pub val: Option<&'a [EpisodeRecord]>,
    pub out: &'a Path,
    /// Continue from `out/last` if it exists.
    pub resume: bool,
    /// Stop after this many steps in total (`None` runs to `total_steps`);
    /// the schedule still follows `total_steps`.
    pub stop_after: Option<usize>,
}

/// Parses one line of `train_log.jsonl`.
pub fn parse_log_line(line: &str) -> std::result::Result<LogRecord, serde_json::Error> {
    serde_json::from_str(line)
}

fn read_log(path: &Path, before: usize) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_log_line(l).map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
        .filter(|r| r.as_ref().map_or(true, |r| r.step < before))
        .collect()
}

fn validate(net: &Network, params: &ParamSet<f32>, val: &[EpisodeRecord], cfg: &TrainConfig) -> Result<[f64; 3]> {
    let n = cfg.val_episodes.min(val.len());
    let predictor = ModelPredictor {
        net,
        params,
        label: net.spec.family.to_string(),
    };
    let report = eval_rpe(&predictor, &val[..n], &[cfg.t_max], &EvalOptions::default())?;
    Ok([0, 1, 2].map(|i| report.accuracy(i)))
}

pub fn train(req: TrainRequest<'_>) -> Result<TrainOutcome> {
    let cfg = req.cfg;
    cfg.validate()?;
    req.spec.validate()?;
    fs::create_dir_all(req.out).map_err(|e| Error::io(req.out, e))?;
    let last_dir = req.out.join(LAST_DIR);
    let best_dir = req.out.join(BEST_DIR);
    let log_path = req.out.join(LOG_FILE);

    let (net, mut params, mut opt, start, mut best) =
        if req.resume && last_dir.join(super::checkpoint::CHECKPOINT_FILE).exists() {
            let ck = load_checkpoint(&last_dir)?;
            if ck.manifest.spec != *req.spec {
                return Err(Error::Config(
                    "checkpoint in `last/` was trained with a different model spec".into(),
                ));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Config("checkpoint in `last/` has no optimizer state".into()))?;
            (
                Network::layout(req.spec)?,
                ck.params,
                opt,
                ck.manifest.step as usize,
                ck.manifest.best_metric,
            )
        } else {
            let (params, net) = Network::build::<f32>(req.spec)?;
            let opt = AdamW::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
            (net, params, opt, 0, None)
        };
    let mut log = read_log(&log_path, start)?;
    {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for r in &log {
            writeln!(f, "{}", serde_json::to_string(r).expect("serializable")).map_err(|e| Error::io(&log_path, e))?;
        }
    }
    let mut log_file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let schedule = Schedule::new(cfg.peak_lr(), cfg.lr_min, cfg.warmup_fraction, cfg.total_steps);
    let end = req.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let started = Instant::now();

    let (tx, rx) = sync_channel::<Result<Batch>>(2);
    let producer = {
        let data = Arc::clone(&req.train);
        let cfg = cfg.clone();
        let chunks = req.spec.query_chunks;
        std::thread::spawn(move || {
            for step in start..end {
                let mut rng = stream_rng(cfg.seed, "batch", step as u64);
                let b = sample_batch(&data, &cfg, chunks, &mut rng);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        })
    };

    let mut result = Ok(());
    for step in start..end {
        let batch = match rx.recv() {
            Ok(Ok(b)) => b,
            Ok(Err(e)) => {
                result = Err(e);
                break;
            }
            Err(_) => {
                result = Err(Error::Numeric("batch producer stopped unexpectedly".into()));
                break;
            }
        };
        let lr = schedule.lr(step);
        let stats = match train_step(&net, &mut params, &mut opt, &batch, cfg, lr, step) {
            Ok(s) => s,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        let done = step + 1;
        let validate_now = req.val.is_some() && (done % cfg.val_every == 0 || done == cfg.total_steps);
        let val = match (validate_now, req.val) {
            (true, Some(v)) => Some(validate(&net, &params, v, cfg)?),
            _ => None,
        };
        if step % cfg.log_every == 0 || val.is_some() || done == cfg.total_steps {
            let rec = LogRecord {
                step,
                lr,
                length: batch.length,
                loss: stats.loss,
                l_rpe: stats.l_rpe,
                l_mim: stats.l_mim,
                grad_norm: stats.grad_norm,
                val,
            };
            writeln!(log_file, "{}", serde_json::to_string(&rec).expect("serializable"))
                .map_err(|e| Error::io(&log_path, e))?;
            log.push(rec);
        }
        if let Some(v) = val {
            if best.is_none_or(|b| v[2] > b) {
                best = Some(v[2]);
                let meta = CheckpointMeta {
                    step: done as u64,
                    train: Some(cfg.clone()),
                    best_metric: best,
                };
                save_checkpoint(&best_dir, req.spec, &params, None, &meta)?;
            }
        }
        if done % cfg.checkpoint_every == 0 || done == end {
            let meta = CheckpointMeta {
                step: done as u64,
                train: Some(cfg.clone()),
                best_metric: best,
            };
            save_checkpoint(&last_dir, req.spec, &params, Some(&opt), &meta)?;
        }
    }
    drop(rx);
    let _ = producer.join();
    result?;
    let timing = serde_json::json!({
        "steps": end.saturating_sub(start),
        "seconds": started.elapsed().as_secs_f64(),
    });
    let tp: PathBuf = req.out.join(TIMING_FILE);
    fs::write(&tp, timing.to_string() + "\n").map_err(|e| Error::io(&tp, e))?;
    Ok(TrainOutcome {
        params,
        net,
        steps_run: end.saturating_sub(start),
        best_metric: best,
        log,
    })
}
