// SPDX-License-Identifier: Apache-2.0

//! Finite-difference gradient verification of every parameterized block,
//! run in double precision on reduced sizes.

use kinaema_tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::{loss_mim, loss_rpe, Batch, DecoderKind, Family, ModelSpec, Network};
use crate::seed::stream_rng;
use crate::Result;

/// Result for one block.
#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub block: String,
    pub report: GradCheckReport,
}

impl BlockCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error()
    }
}

/// A reduced specification small enough to finite-difference every entry
/// quickly while keeping every block present.
pub fn tiny_spec(family: Family) -> ModelSpec {
    ModelSpec {
        family,
        seed: 11,
        retina_len: 16,
        n_mem: 4,
        e_mem: 16,
        n_read: 4,
        e_read: 16,
        d_vis: 8,
        enc_hidden: 12,
        d_odo: 64,
        tf_layers: 1,
        tf_heads: Some(2),
        mlp_factor: 2,
        gating_layers: 2,
        gru_hidden: 6,
        gru_layers: 2,
        gru_read_hidden: 5,
        ema_size: 64,
        t_trunc: 3,
        dec_heads: 2,
        dec_blocks: 1,
        dec_chains: 2,
        head_hidden: 7,
        query_chunks: 2,
        mim_blocks: 1,
        ..ModelSpec::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Quadratic read-out weighted by fixed random coefficients, so that no
/// gradient vanishes by symmetry.
fn probe(g: &mut Graph<'_, f64>, x: Var, rng: &mut ChaCha8Rng) -> kinaema_tensor::Result<Var> {
    let w = random(rng, g.shape(x));
    let w = g.input(w);
    let h = g.tanh(x);
    let p = g.mul(h, w)?;
    Ok(g.sum(p))
}

fn tiny_batch(spec: &ModelSpec, episodes: usize, length: usize, queries: usize, seed: u64) -> Batch {
    let mut rng = stream_rng(seed, "check-batch", 0);
    let mut f = |shape: Vec<usize>| Tensor::<f32>::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
    let retinas = (0..length).map(|_| f(vec![episodes, spec.retina_len])).collect();
    let odometry = (0..length).map(|_| f(vec![episodes, 4])).collect();
    let q = episodes * queries;
    let queries_t = f(vec![q, spec.retina_len]);
    let targets = f(vec![q * 5]).into_data();
    let mask = (0..q * spec.query_chunks).map(|i| i % 3 == 0).collect();
    Batch {
        episodes,
        length,
        retinas,
        odometry,
        queries: queries_t,
        targets,
        query_steps: (0..q).map(|i| i % length).collect(),
        query_alternative: vec![false; q],
        mim_mask: Some(mask),
    }
}

fn run(
    block: &str,
    params: &ParamSet<f64>,
    opts: &GradCheckOptions,
    f: impl Fn(&mut Graph<'_, f64>) -> kinaema_tensor::Result<Var>,
) -> Result<BlockCheck> {
    Ok(BlockCheck {
        block: block.to_string(),
        report: grad_check(params, opts, f)?,
    })
}

/// Entries per tensor checked on the full training objective.
pub const OBJECTIVE_ENTRIES: usize = 16;

/// Runs the finite-difference suite for one family: encoders, the memory
/// update and read-out, the family's RPE decoder, the masked-modeling
/// decoder and the full training objective.
pub fn grad_check_family(family: Family, opts: &GradCheckOptions) -> Result<Vec<BlockCheck>> {
    let spec = tiny_spec(family);
    let (params, net) = Network::build::<f64>(&spec)?;
    let mut out = Vec::new();
    let seed = opts.seed;
    let (b, d_obs) = (2, spec.obs_dim());

    out.push(run(&format!("{family}.encoders"), &params, opts, |g| {
        let mut rng = stream_rng(seed, "check-enc", 0);
        let r = g.input(random(&mut rng, &[b, spec.retina_len]));
        let u = g.input(random(&mut rng, &[b, 4]));
        let x = net.memory.enc.forward(g, r, u)?;
        probe(g, x, &mut rng)
    })?);

    out.push(run(&format!("{family}.update"), &params, opts, |g| {
        let mut rng = stream_rng(seed, "check-update", 0);
        let mut s = net.memory.init(g, b)?;
        for _ in 0..3 {
            let obs = g.input(random(&mut rng, &[b, d_obs]));
            s = net.memory.update(g, &s, obs)?;
        }
        let y = net.memory.read(g, &s)?;
        probe(g, y, &mut rng)
    })?);

    out.push(run(&format!("{family}.rpe_decoder"), &params, opts, |g| {
        let mut rng = stream_rng(seed, "check-rpe", 0);
        let y = g.input(random(&mut rng, &[b * spec.token_count(), spec.token_dim()]));
        let q = g.input(random(&mut rng, &[b * 3, spec.retina_len]));
        let tok = net.query.forward(g, q)?;
        let dec = net.rpe.forward(g, y, tok, b, b * 3, spec.query_chunks)?;
        let targets: Vec<f32> = (0..b * 3 * 5).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        loss_rpe(g, dec.pred, &targets)
    })?);

    out.push(run(&format!("{family}.mim_decoder"), &params, opts, |g| {
        let mut rng = stream_rng(seed, "check-mim", 0);
        let y = g.input(random(&mut rng, &[b * spec.token_count(), spec.token_dim()]));
        let q = g.input(random(&mut rng, &[b * 2, spec.retina_len]));
        let mask: Vec<bool> = (0..b * 2 * spec.query_chunks).map(|i| i % 2 == 1).collect();
        let recon = net.mim.forward(g, &net.query, y, q, &mask, b)?;
        let target = net.query.split(g, q)?;
        loss_mim(g, recon, target, &mask)
    })?);

    // Every tensor was covered entry by entry above; the composed objective
    // only needs a sample.
    let sampled = GradCheckOptions {
        max_entries: Some(opts.max_entries.map_or(OBJECTIVE_ENTRIES, |m| m.min(OBJECTIVE_ENTRIES))),
        ..opts.clone()
    };
    let batch = tiny_batch(&spec, b, 3, 2, seed);
    out.push(run(&format!("{family}.objective"), &params, &sampled, |g| {
        Ok(net.forward(g, &batch, 1.0, None)?.loss)
    })?);
    Ok(out)
}

/// The chained decoder on the Kinaema read-out and vice versa, so both
/// decoder layouts are covered at equal token widths.
pub fn grad_check_decoders(opts: &GradCheckOptions) -> Result<Vec<BlockCheck>> {
    let mut out = Vec::new();
    for (family, kind) in [
        (Family::Kinaema, DecoderKind::Chained),
        (Family::Gru, DecoderKind::Kinaema),
    ] {
        let spec = ModelSpec {
            decoder: Some(kind),
            ..tiny_spec(family)
        };
        let (params, net) = Network::build::<f64>(&spec)?;
        let seed = opts.seed;
        let name = match kind {
            DecoderKind::Kinaema => "decoder.kinaema",
            DecoderKind::Chained => "decoder.chained",
        };
        out.push(run(name, &params, opts, |g| {
            let mut rng = stream_rng(seed, "check-dec", 0);
            let y = g.input(random(&mut rng, &[2 * spec.n_read, spec.e_read]));
            let q = g.input(random(&mut rng, &[4, spec.retina_len]));
            let tok = net.query.forward(g, q)?;
            let dec = net.rpe.forward(g, y, tok, 2, 4, spec.query_chunks)?;
            let targets: Vec<f32> = (0..20).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            loss_rpe(g, dec.pred, &targets)
        })?);
    }
    Ok(out)
}

/// Every block of every family.
pub fn grad_check_all(opts: &GradCheckOptions) -> Result<Vec<BlockCheck>> {
    let mut out = Vec::new();
    for f in Family::ALL {
        out.extend(grad_check_family(f, opts)?);
    }
    out.extend(grad_check_decoders(opts)?);
    Ok(out)
}
