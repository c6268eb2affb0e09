// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use kinaema_core::checks::{grad_check_all, grad_check_family, BlockCheck};
use kinaema_core::config::Config;
use kinaema_core::eval::attention::{collect_attention, write_attention};
use kinaema_core::eval::bench::{self, bench_model, BenchOptions};
use kinaema_core::eval::sweep::{self, default_lengths, sweep_lengths};
use kinaema_core::eval::{eval_with_floor, AccuracyReport, EvalOptions, ModelPredictor};
use kinaema_core::model::{param_counts, Family, Network};
use kinaema_core::train::{load_checkpoint, train as run_training, Checkpoint, TrainRequest};
use kinaema_core::world::{generate_dataset, read_dataset, write_dataset, Dataset, EPISODES_FILE, MANIFEST_FILE};
use kinaema_core::{Error, Result};
use kinaema_tensor::GradCheckOptions;

use crate::{load_config, BenchArgs, DumpAttnArgs, EvalArgs, GenDataArgs, GradCheckArgs, InspectArgs, TrainArgs};

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn shorthand<T: ToString>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={}", v.to_string()))
}

fn json_string(s: &str) -> String {
    serde_json::Value::String(s.to_owned()).to_string()
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let keys: Vec<String> = [
        shorthand("data.seed", &a.seed),
        shorthand("data.episodes", &a.episodes),
        shorthand("data.length", &a.length),
        shorthand("data.scenes", &a.scenes),
        a.profile.as_deref().map(|p| format!("data.profile={}", json_string(p))),
    ]
    .into_iter()
    .flatten()
    .collect();
    let cfg = load_config(&a.config, &keys)?;
    let data = generate_dataset(&cfg.world, &cfg.data)?;
    write_dataset(&a.out, &data)?;
    let bin = a.out.join(EPISODES_FILE);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    emit(
        out,
        &format!(
            "wrote {} episodes ({} scenes, length {}, profile {}) to {}\n{EPISODES_FILE}: {} bytes, crc32 {:08x}\n",
            data.episodes.len(),
            data.scenes.len(),
            cfg.data.length,
            cfg.data.profile.as_str(),
            a.out.display(),
            bytes.len(),
            crc32fast::hash(&bytes),
        ),
    )
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let family = a.model.as_deref().map(normalize_family).transpose()?;
    let keys: Vec<String> = [
        family.map(|f| format!("model.family={}", json_string(&f))),
        shorthand("train.total_steps", &a.steps),
        shorthand("train.seed", &a.seed),
        shorthand("model.seed", &a.seed),
        shorthand("train.batch_size", &a.batch_size),
    ]
    .into_iter()
    .flatten()
    .collect();
    let mut cfg = load_config(&a.config, &keys)?;
    let data = read_dataset(&a.dataset)?;
    cfg.model.retina_len = data.retina_len();
    cfg.world = data.world.clone();
    cfg.validate()?;
    let val = a.val.as_deref().map(read_dataset).transpose()?;
    if let Some(v) = &val {
        if v.retina_len() != data.retina_len() {
            return Err(Error::Config(
                "validation and training datasets have different retina widths".into(),
            ));
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("config.toml"), &cfg.to_toml()?)?;
    let outcome = run_training(TrainRequest {
        spec: &cfg.model,
        cfg: &cfg.train,
        train: Arc::new(data.episodes),
        val: val.as_ref().map(|v| v.episodes.as_slice()),
        out: &a.out,
        resume: a.resume,
        stop_after: a.stop_after,
    })?;
    let last = outcome.log.last();
    let mut text = format!(
        "trained {} for {} steps into {}\n",
        cfg.model.family,
        outcome.steps_run,
        a.out.display()
    );
    if let Some(r) = last {
        text.push_str(&format!("step {} loss {:.4} l_rpe {:.4}\n", r.step, r.loss, r.l_rpe));
    }
    if let Some(b) = outcome.best_metric {
        text.push_str(&format!("best validation accuracy at 2m/90deg: {b:.4}\n"));
    }
    emit(out, &text)
}

fn normalize_family(s: &str) -> Result<String> {
    Ok(s.parse::<Family>()?.as_str().to_owned())
}

struct EvalSetup {
    ckpt: Checkpoint,
    net: Network,
    data: Dataset,
    cfg: Config,
}

fn eval_setup(a: &EvalArgs) -> Result<EvalSetup> {
    let keys: Vec<String> = [
        a.lengths
            .as_ref()
            .map(|l| format!("eval.lengths={}", serde_json::to_string(l).expect("list"))),
        shorthand("eval.max_episodes", &a.max_episodes),
        shorthand("eval.window", &a.window),
    ]
    .into_iter()
    .flatten()
    .collect();
    let cfg = load_config(&a.config, &keys)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.dataset)?;
    if data.retina_len() != ckpt.manifest.spec.retina_len {
        return Err(Error::Config(format!(
            "dataset retina width {} does not match the checkpoint's {}",
            data.retina_len(),
            ckpt.manifest.spec.retina_len
        )));
    }
    let net = Network::layout(&ckpt.manifest.spec)?;
    Ok(EvalSetup { ckpt, net, data, cfg })
}

impl EvalSetup {
    fn t_max(&self) -> usize {
        self.ckpt
            .manifest
            .train
            .as_ref()
            .map_or(self.cfg.train.t_max, |t| t.t_max)
    }

    fn options(&self) -> EvalOptions {
        let spec = &self.ckpt.manifest.spec;
        EvalOptions {
            batch_episodes: self.cfg.eval.batch_episodes,
            max_episodes: self.cfg.eval.max_episodes,
            window: self
                .cfg
                .eval
                .window
                .or((spec.family == Family::TruncHist).then_some(spec.t_trunc)),
        }
    }

    fn predictor(&self) -> ModelPredictor<'_> {
        ModelPredictor {
            net: &self.net,
            params: &self.ckpt.params,
            label: self.ckpt.manifest.spec.family.to_string(),
        }
    }
}

pub fn eval_report(a: &EvalArgs) -> Result<AccuracyReport> {
    let s = eval_setup(a)?;
    let lengths = if s.cfg.eval.lengths.is_empty() {
        vec![s.t_max()]
    } else {
        s.cfg.eval.lengths.clone()
    };
    eval_with_floor(&s.predictor(), &s.data.episodes, &lengths, &s.options())
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let report = eval_report(a)?;
    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    if let Some(dir) = &a.out {
        write_file(&dir.join("report.json"), &text)?;
    }
    emit(out, &text)
}

pub fn sweep(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let s = eval_setup(a)?;
    let lengths = if s.cfg.eval.lengths.is_empty() {
        default_lengths(s.t_max())
    } else {
        s.cfg.eval.lengths.clone()
    };
    let rows = sweep_lengths(&s.predictor(), &s.data.episodes, &lengths, &s.options())?;
    let text = sweep::to_csv(&rows);
    if let Some(dir) = &a.out {
        write_file(&dir.join("sweep.csv"), &text)?;
    }
    emit(out, &text)
}

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.config, &[])?.resolve()?;
    if a.samples == 0 || a.steps.is_empty() {
        return Err(Error::Config(
            "bench needs at least one sample and one step index".into(),
        ));
    }
    let opts = BenchOptions {
        steps: a.steps.clone(),
        warmup: a.warmup,
        samples: a.samples,
        ..BenchOptions::default()
    };
    let mut rows = Vec::new();
    for m in &a.models {
        let family: Family = m.parse()?;
        let spec = kinaema_core::model::ModelSpec {
            family,
            ..cfg.model.clone()
        };
        rows.extend(bench_model(&spec, &opts)?);
    }
    let text = bench::to_csv(&rows);
    if let Some(dir) = &a.out {
        write_file(&dir.join("bench.csv"), &text)?;
    }
    emit(out, &text)
}

pub fn dump_attn(a: &DumpAttnArgs, out: &mut dyn Write) -> Result<()> {
    load_config(&a.config, &[])?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.dataset)?;
    let episode = data.episodes.get(a.episode).ok_or_else(|| {
        Error::Input(format!(
            "episode {} out of range (dataset has {})",
            a.episode,
            data.episodes.len()
        ))
    })?;
    let length = a.length.unwrap_or(episode.length);
    let net = Network::layout(&ckpt.manifest.spec)?;
    let dump = collect_attention(&net, &ckpt.params, episode, length)?;
    write_attention(&a.out, &dump)?;
    emit(
        out,
        &format!(
            "wrote attention of {} queries over {} memory tokens ({} heads) to {}\n",
            dump.queries.len(),
            dump.tokens,
            dump.heads,
            a.out.display()
        ),
    )
}

pub fn grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    load_config(&a.config, &[])?;
    let opts = GradCheckOptions {
        eps: a.eps,
        max_entries: (a.max_entries > 0).then_some(a.max_entries),
        ..GradCheckOptions::default()
    };
    let checks: Vec<BlockCheck> = if a.model == "all" {
        grad_check_all(&opts)?
    } else {
        grad_check_family(a.model.parse()?, &opts)?
    };
    let mut text = String::new();
    let mut worst = 0.0f64;
    for c in &checks {
        let e = c.max_rel_error();
        worst = worst.max(e);
        text.push_str(&format!("{:<40} {e:.3e}\n", c.block));
    }
    text.push_str(&format!("max relative error: {worst:.3e}\n"));
    emit(out, &text)?;
    if !(worst < a.tolerance) {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} exceeds {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}

pub fn inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.config, &[])?;
    let Some(path) = &a.path else {
        return emit(out, &cfg.resolve()?.to_toml()?);
    };
    let value = if path.join(MANIFEST_FILE).exists() {
        let data = read_dataset(path)?;
        serde_json::json!({
            "kind": "dataset",
            "seed": data.seed,
            "profile": data.profile,
            "retina_len": data.retina_len(),
            "scenes": data.scenes.len(),
            "episodes": data.episodes.len(),
            "min_length": data.min_length(),
        })
    } else if path.join(kinaema_core::train::checkpoint::CHECKPOINT_FILE).exists() {
        let ck = load_checkpoint(path)?;
        let net = Network::layout(&ck.manifest.spec)?;
        let state = net.init_state(&ck.params)?;
        serde_json::json!({
            "kind": "checkpoint",
            "step": ck.manifest.step,
            "best_metric": ck.manifest.best_metric,
            "has_optimizer": ck.optimizer.is_some(),
            "spec": ck.manifest.spec,
            "params": param_counts(&ck.params),
            "memory_footprint_bytes": state.footprint_bytes(),
        })
    } else {
        return Err(Error::Input(format!(
            "{} is neither a dataset nor a checkpoint directory",
            path.display()
        )));
    };
    emit(
        out,
        &(serde_json::to_string_pretty(&value).expect("serializable") + "\n"),
    )
}
