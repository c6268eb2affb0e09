// SPDX-License-Identifier: Apache-2.0

//! Encoders and the four recurrent memory families. Every model exposes the
//! same contract: `init` an empty state, `update` it with one encoded
//! observation, `read` out a token set for the decoders.

use kinaema_tensor::nn::{GruCell, Linear, Mlp, SelfAttentionBlock};
use kinaema_tensor::{Graph, ParamBuilder, Result, Scalar, Tensor, TensorError, Var};
use rand::Rng;

use super::spec::{Family, ModelSpec};

/// Observation encoders: a two-layer MLP for the retina and a single linear
/// layer for odometry.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub vis: Mlp,
    pub odo: Linear,
}

impl Encoders {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, spec: &ModelSpec) -> Result<Self> {
        Ok(Encoders {
            vis: Mlp::new(&mut pb.scope("vis"), spec.retina_len, spec.enc_hidden, spec.d_vis)?,
            odo: Linear::new(&mut pb.scope("odo"), 4, spec.d_odo)?,
        })
    }

    /// `[B, K]` retinas and `[B, 4]` odometry to `[B, D_vis + D_odo]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, retina: Var, odometry: Var) -> Result<Var> {
        if g.value(retina).cols() != self.vis.fc1.d_in {
            return Err(TensorError::Config(format!(
                "retina width {} does not match the encoder input {}",
                g.value(retina).cols(),
                self.vis.fc1.d_in
            )));
        }
        let x = self.vis.forward(g, retina)?;
        let u = self.odo.forward(g, odometry)?;
        g.concat_cols(&[x, u])
    }
}

/// Per-batch recurrent state inside a graph.
#[derive(Clone, Debug)]
pub enum StateVar {
    /// Kinaema `[B·N, E]` or EMA `[B, M]`.
    Dense(Var),
    /// GRU hidden state per layer, each `[B, H]`.
    Layers(Vec<Var>),
    /// Encoded observations, oldest first, each `[B, D]`; at most `T_trunc`.
    History(Vec<Var>),
}

impl StateVar {
    pub fn detach<T: Scalar>(&self, g: &mut Graph<'_, T>) -> StateVar {
        match self {
            StateVar::Dense(v) => StateVar::Dense(g.detach(*v)),
            StateVar::Layers(vs) => StateVar::Layers(vs.iter().map(|&v| g.detach(v)).collect()),
            StateVar::History(vs) => StateVar::History(vs.iter().map(|&v| g.detach(v)).collect()),
        }
    }
}

/// Correction, transformer and gating blocks of the distributed memory.
#[derive(Clone, Debug)]
pub struct KinaemaCore {
    pub pos_emb: kinaema_tensor::ParamId,
    pub m0: Option<kinaema_tensor::ParamId>,
    /// Applied to `m_n + e_n`.
    pub corr_mem: Linear,
    /// Applied to `[x̃, ũ]`; together with `corr_mem` this is one linear map
    /// of the concatenation `[m_n + e_n, x̃, ũ]`.
    pub corr_obs: Linear,
    pub transformer: Vec<SelfAttentionBlock>,
    pub gating: Vec<GruCell>,
    pub n: usize,
    pub e: usize,
}

#[derive(Clone, Debug)]
pub struct GruCore {
    pub cells: Vec<GruCell>,
    /// One independent MLP per read-out token.
    pub readers: Vec<Mlp>,
}

#[derive(Clone, Debug)]
pub struct EmaCore {
    /// Pre-sigmoid decay.
    pub lambda: kinaema_tensor::ParamId,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub enum Core {
    Kinaema(KinaemaCore),
    Gru(GruCore),
    Ema(EmaCore),
    TruncHist { t_trunc: usize },
}

#[derive(Clone, Debug)]
pub struct MemoryModel {
    pub spec: ModelSpec,
    pub enc: Encoders,
    pub core: Core,
}

impl MemoryModel {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, spec: &ModelSpec) -> Result<Self> {
        spec.validate().map_err(|e| TensorError::Config(e.to_string()))?;
        let enc = Encoders::new(&mut pb.scope("enc"), spec)?;
        let d_obs = spec.obs_dim();
        let core = match spec.family {
            Family::Kinaema => {
                let mut pb = pb.scope("kinaema");
                let (n, e) = (spec.n_mem, spec.e_mem);
                let pos_emb = pb.normal("pos_emb", &[n, e], 0.02)?;
                let m0 = if spec.learned_m0 {
                    Some(pb.normal("m0", &[n, e], 0.02)?)
                } else {
                    None
                };
                let bound = 1.0 / ((e + d_obs) as f64).sqrt();
                let corr_mem = {
                    let mut s = pb.scope("corr");
                    Linear {
                        w: s.uniform("w_mem", &[e, e], bound)?,
                        b: Some(s.uniform("b", &[e], bound)?),
                        d_in: e,
                        d_out: e,
                    }
                };
                let corr_obs = Linear {
                    w: pb.scope("corr").uniform("w_obs", &[d_obs, e], bound)?,
                    b: None,
                    d_in: d_obs,
                    d_out: e,
                };
                let mut transformer = Vec::new();
                if spec.use_transformer {
                    for l in 0..spec.tf_layers {
                        transformer.push(SelfAttentionBlock::new(
                            &mut pb.scope(&format!("transformer.l{l}")),
                            e,
                            spec.heads(),
                            spec.mlp_factor,
                        )?);
                    }
                }
                let mut gating = Vec::new();
                if spec.use_gating {
                    for l in 0..spec.gating_layers {
                        gating.push(GruCell::new(&mut pb.scope(&format!("gating.l{l}")), e, e)?);
                    }
                }
                Core::Kinaema(KinaemaCore {
                    pos_emb,
                    m0,
                    corr_mem,
                    corr_obs,
                    transformer,
                    gating,
                    n,
                    e,
                })
            }
            Family::Gru => {
                let mut pb = pb.scope("gru");
                let h = spec.gru_hidden;
                let cells = (0..spec.gru_layers)
                    .map(|l| GruCell::new(&mut pb.scope(&format!("l{l}")), if l == 0 { d_obs } else { h }, h))
                    .collect::<Result<Vec<_>>>()?;
                let readers = (0..spec.n_read)
                    .map(|i| {
                        Mlp::new(
                            &mut pb.scope(&format!("read.t{i:03}")),
                            h * spec.gru_layers,
                            spec.gru_read_hidden,
                            spec.e_read,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Core::Gru(GruCore { cells, readers })
            }
            Family::Ema => {
                let mut pb = pb.scope("ema");
                // σ(2.2) ≈ 0.9: a slow decay to start from.
                let lambda = pb.constant("lambda", &[spec.ema_size], 2.2)?;
                let proj = Linear::new(&mut pb.scope("proj"), d_obs, spec.ema_size)?;
                Core::Ema(EmaCore { lambda, proj })
            }
            Family::TruncHist => Core::TruncHist { t_trunc: spec.t_trunc },
        };
        Ok(MemoryModel {
            spec: spec.clone(),
            enc,
            core,
        })
    }

    pub fn init<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: usize) -> Result<StateVar> {
        Ok(match &self.core {
            Core::Kinaema(k) => match k.m0 {
                Some(m0) => {
                    let m0 = g.param(m0);
                    StateVar::Dense(g.tile_rows(m0, batch)?)
                }
                None => StateVar::Dense(g.input(Tensor::zeros(vec![batch * k.n, k.e]))),
            },
            Core::Gru(c) => StateVar::Layers(
                c.cells
                    .iter()
                    .map(|cell| g.input(Tensor::zeros(vec![batch, cell.hidden])))
                    .collect(),
            ),
            Core::Ema(_) => StateVar::Dense(g.input(Tensor::zeros(vec![batch, self.spec.ema_size]))),
            Core::TruncHist { .. } => StateVar::History(Vec::new()),
        })
    }

    /// Integrates one encoded observation `obs` (`[B, D]`).
    pub fn update<T: Scalar>(&self, g: &mut Graph<'_, T>, state: &StateVar, obs: Var) -> Result<StateVar> {
        let batch = g.value(obs).rows();
        match (&self.core, state) {
            (Core::Kinaema(k), StateVar::Dense(m)) => k.update(g, *m, obs, batch).map(StateVar::Dense),
            (Core::Gru(c), StateVar::Layers(hs)) => {
                let mut input = obs;
                let mut next = Vec::with_capacity(hs.len());
                for (cell, &h) in c.cells.iter().zip(hs) {
                    let h2 = cell.forward(g, h, input)?;
                    next.push(h2);
                    input = h2;
                }
                Ok(StateVar::Layers(next))
            }
            (Core::Ema(c), StateVar::Dense(m)) => {
                let lam = g.param(c.lambda);
                let lam = g.sigmoid(lam);
                let kept = g.mul_row(*m, lam)?;
                let inp = c.proj.forward(g, obs)?;
                g.add(kept, inp).map(StateVar::Dense)
            }
            (Core::TruncHist { t_trunc }, StateVar::History(hist)) => {
                let skip = (hist.len() + 1).saturating_sub(*t_trunc);
                let mut next: Vec<Var> = hist[skip..].to_vec();
                next.push(obs);
                Ok(StateVar::History(next))
            }
            _ => Err(TensorError::Config("state does not belong to this model family".into())),
        }
    }

    /// Tokens for the decoders, `[B·N', E']` (or `[B·T_trunc, D]`).
    pub fn read<T: Scalar>(&self, g: &mut Graph<'_, T>, state: &StateVar) -> Result<Var> {
        let (n, e) = (self.spec.n_read, self.spec.e_read);
        match (&self.core, state) {
            (Core::Kinaema(_), StateVar::Dense(m)) | (Core::Ema(_), StateVar::Dense(m)) => {
                let total = g.value(*m).numel();
                g.reshape(*m, &[total / e, e])
            }
            (Core::Gru(c), StateVar::Layers(hs)) => {
                let m = g.concat_cols(hs)?;
                let batch = g.value(m).rows();
                let toks = c.readers.iter().map(|r| r.forward(g, m)).collect::<Result<Vec<_>>>()?;
                let flat = g.concat_cols(&toks)?;
                g.reshape(flat, &[batch * n, e])
            }
            (Core::TruncHist { t_trunc }, StateVar::History(hist)) => {
                let first = *hist
                    .first()
                    .ok_or_else(|| TensorError::Config("read-out of an empty history".into()))?;
                let mut items = vec![first; t_trunc - hist.len()];
                items.extend_from_slice(hist);
                let batch = g.value(first).rows();
                let d = g.value(first).cols();
                let flat = g.concat_cols(&items)?;
                g.reshape(flat, &[batch * t_trunc, d])
            }
            _ => Err(TensorError::Config("state does not belong to this model family".into())),
        }
    }
}

impl KinaemaCore {
    /// Correction, contextualization and gated update of `m` (`[B·N, E]`).
    pub fn update<T: Scalar>(&self, g: &mut Graph<'_, T>, m: Var, obs: Var, batch: usize) -> Result<Var> {
        if g.shape(m) != [batch * self.n, self.e] {
            return Err(TensorError::shape(
                "kinaema update",
                g.shape(m),
                &[batch * self.n, self.e],
            ));
        }
        let e = g.param(self.pos_emb);
        let e = g.tile_rows(e, batch)?;
        let me = g.add(m, e)?;
        let cm = self.corr_mem.forward(g, me)?;
        let co = self.corr_obs.forward(g, obs)?;
        let rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, self.n)).collect();
        let co = g.gather_rows(co, &rows)?;
        let mut x = g.add(cm, co)?;
        for block in &self.transformer {
            x = block.forward(g, x, batch)?;
        }
        if self.gating.is_empty() {
            return Ok(x);
        }
        let mut h = m;
        for cell in &self.gating {
            h = cell.forward(g, h, x)?;
        }
        Ok(h)
    }
}
