// SPDX-License-Identifier: Apache-2.0

//! A memory model together with its query encoder and decoders, plus the
//! host-side state used for step-by-step inference.

use std::collections::VecDeque;

use kinaema_tensor::{Graph, ParamBuilder, ParamSet, Result, Scalar, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::decoders::{DecodeOutput, MimDecoder, QueryEncoder, RpeDecoder};
use super::losses::{loss_mim, loss_rpe};
use super::memory::{Core, MemoryModel, StateVar};
use super::spec::ModelSpec;

/// All trainable blocks of one experiment. Holds only parameter ids; the
/// values live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: ModelSpec,
    pub memory: MemoryModel,
    pub query: QueryEncoder,
    pub rpe: RpeDecoder,
    pub mim: MimDecoder,
}

/// One training or evaluation batch of `B` episode slices of length `T`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub episodes: usize,
    pub length: usize,
    /// Per step: `[B, K]` retinas and `[B, 4]` odometry.
    pub retinas: Vec<Tensor<f32>>,
    pub odometry: Vec<Tensor<f32>>,
    /// `[Q, K]`, episode-major.
    pub queries: Tensor<f32>,
    /// `Q × 5`.
    pub targets: Vec<f32>,
    pub query_steps: Vec<usize>,
    pub query_alternative: Vec<bool>,
    /// One flag per query chunk; `None` disables masked modeling.
    pub mim_mask: Option<Vec<bool>>,
}

impl Batch {
    pub fn num_queries(&self) -> usize {
        self.queries.rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub loss: Var,
    pub rpe: Var,
    pub mim: Option<Var>,
    pub decode: DecodeOutput,
}

impl Network {
    pub fn build<T: Scalar>(spec: &ModelSpec) -> Result<(ParamSet<T>, Network)> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(spec.seed, "init", 0));
        let net = {
            let mut pb = ParamBuilder::new(&mut ps, &mut rng);
            Network {
                spec: spec.clone(),
                memory: MemoryModel::new(&mut pb.scope("model"), spec)?,
                query: QueryEncoder::new(&mut pb.scope("query"), spec)?,
                rpe: RpeDecoder::new(&mut pb.scope("rpe"), spec)?,
                mim: MimDecoder::new(&mut pb.scope("mim"), spec)?,
            }
        };
        Ok((ps, net))
    }

    /// Rebuilds the block layout for `spec` without keeping the values.
    pub fn layout(spec: &ModelSpec) -> Result<Network> {
        Ok(Self::build::<f32>(spec)?.1)
    }

    /// Unrolls the memory over the batch. Gradients flow through at most the
    /// last `bptt` steps.
    pub fn rollout<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &Batch, bptt: Option<usize>) -> Result<StateVar> {
        let mut state = self.memory.init(g, batch.episodes)?;
        let cut = bptt.map(|w| batch.length.saturating_sub(w)).unwrap_or(0);
        for t in 0..batch.length {
            if t == cut && cut > 0 {
                state = state.detach(g);
            }
            let r = g.input(batch.retinas[t].cast());
            let u = g.input(batch.odometry[t].cast());
            let obs = self.memory.enc.forward(g, r, u)?;
            state = self.memory.update(g, &state, obs)?;
        }
        Ok(state)
    }

    /// Decodes every query of the batch from the read-out of `state`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, state: &StateVar, batch: &Batch) -> Result<DecodeOutput> {
        let y = self.memory.read(g, state)?;
        let q = g.input(batch.queries.cast());
        let tokens = self.query.forward(g, q)?;
        self.rpe.forward(
            g,
            y,
            tokens,
            batch.episodes,
            batch.num_queries(),
            self.spec.query_chunks,
        )
    }

    /// Full objective `L_RPE + mim_weight · L_MIM` at the last memory.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        mim_weight: f64,
        bptt: Option<usize>,
    ) -> Result<ForwardOutput> {
        let state = self.rollout(g, batch, bptt)?;
        let y = self.memory.read(g, &state)?;
        let q = g.input(batch.queries.cast());
        let tokens = self.query.forward(g, q)?;
        let decode = self.rpe.forward(
            g,
            y,
            tokens,
            batch.episodes,
            batch.num_queries(),
            self.spec.query_chunks,
        )?;
        let rpe = loss_rpe(g, decode.pred, &batch.targets)?;
        let (loss, mim) = match &batch.mim_mask {
            Some(mask) if mim_weight > 0.0 => {
                let recon = self.mim.forward(g, &self.query, y, q, mask, batch.episodes)?;
                let target = self.query.split(g, q)?;
                let m = loss_mim(g, recon, target, mask)?;
                let scaled = g.scale(m, mim_weight);
                (g.add(rpe, scaled)?, Some(m))
            }
            _ => (rpe, None),
        };
        Ok(ForwardOutput { loss, rpe, mim, decode })
    }

    pub fn init_state(&self, params: &ParamSet<f32>) -> Result<MemoryState> {
        let mut g = Graph::new(params);
        let s = self.memory.init(&mut g, 1)?;
        Ok(MemoryState::from_var(&g, &s, 0))
    }

    /// One recurrent update of a single-episode state outside training.
    pub fn step_inference(
        &self,
        params: &ParamSet<f32>,
        state: &MemoryState,
        retina: &[f32],
        odometry: [f32; 4],
    ) -> Result<MemoryState> {
        let mut g = Graph::new(params);
        let s = state.to_var(&mut g);
        let r = g.input(Tensor::new(vec![1, retina.len()], retina.to_vec())?);
        let u = g.input(Tensor::new(vec![1, 4], odometry.to_vec())?);
        let obs = self.memory.enc.forward(&mut g, r, u)?;
        let next = self.memory.update(&mut g, &s, obs)?;
        Ok(MemoryState::from_var(&g, &next, state.step_count + 1))
    }

    /// Encodes one observation to `[1, D_vis + D_odo]`.
    pub fn encode(&self, params: &ParamSet<f32>, retina: &[f32], odometry: [f32; 4]) -> Result<Tensor<f32>> {
        let mut g = Graph::new(params);
        let r = g.input(Tensor::new(vec![1, retina.len()], retina.to_vec())?);
        let u = g.input(Tensor::new(vec![1, 4], odometry.to_vec())?);
        let obs = self.memory.enc.forward(&mut g, r, u)?;
        Ok(g.value(obs).clone())
    }

    /// Memory update from an already encoded observation.
    pub fn update_encoded(
        &self,
        params: &ParamSet<f32>,
        state: &MemoryState,
        obs: &Tensor<f32>,
    ) -> Result<MemoryState> {
        let mut g = Graph::new(params);
        let s = state.to_var(&mut g);
        let o = g.input(obs.clone());
        let next = self.memory.update(&mut g, &s, o)?;
        Ok(MemoryState::from_var(&g, &next, state.step_count + 1))
    }

    /// Read-out tokens of a single-episode state, `[N', E']`.
    pub fn read_state(&self, params: &ParamSet<f32>, state: &MemoryState) -> Result<Tensor<f32>> {
        let mut g = Graph::new(params);
        let s = state.to_var(&mut g);
        let y = self.memory.read(&mut g, &s)?;
        Ok(g.value(y).clone())
    }

    /// Decodes `[Q, K]` query retinas against one state.
    pub fn decode_state(
        &self,
        params: &ParamSet<f32>,
        state: &MemoryState,
        queries: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new(params);
        let s = state.to_var(&mut g);
        let y = self.memory.read(&mut g, &s)?;
        let q = g.input(queries.clone());
        let tokens = self.query.forward(&mut g, q)?;
        let out = self
            .rpe
            .forward(&mut g, y, tokens, 1, queries.rows(), self.spec.query_chunks)?;
        Ok(g.value(out.pred).clone())
    }
}

/// Concrete memory of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub kind: StateKind,
    pub step_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StateKind {
    Dense(Tensor<f32>),
    Layers(Vec<Tensor<f32>>),
    History(VecDeque<Tensor<f32>>),
}

impl MemoryState {
    fn from_var(g: &Graph<'_, f32>, s: &StateVar, step_count: usize) -> Self {
        let kind = match s {
            StateVar::Dense(v) => StateKind::Dense(g.value(*v).clone()),
            StateVar::Layers(vs) => StateKind::Layers(vs.iter().map(|&v| g.value(v).clone()).collect()),
            StateVar::History(vs) => StateKind::History(vs.iter().map(|&v| g.value(v).clone()).collect()),
        };
        MemoryState { kind, step_count }
    }

    fn to_var(&self, g: &mut Graph<'_, f32>) -> StateVar {
        match &self.kind {
            StateKind::Dense(t) => StateVar::Dense(g.input(t.clone())),
            StateKind::Layers(ts) => StateVar::Layers(ts.iter().map(|t| g.input(t.clone())).collect()),
            StateKind::History(ts) => StateVar::History(ts.iter().map(|t| g.input(t.clone())).collect()),
        }
    }

    /// Number of stored scalars.
    pub fn numel(&self) -> usize {
        match &self.kind {
            StateKind::Dense(t) => t.numel(),
            StateKind::Layers(ts) => ts.iter().map(Tensor::numel).sum(),
            StateKind::History(ts) => ts.iter().map(Tensor::numel).sum(),
        }
    }

    /// Payload bytes plus the step counter.
    pub fn footprint_bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<f32>() + std::mem::size_of::<u64>()
    }

    pub fn dense(&self) -> Option<&Tensor<f32>> {
        match &self.kind {
            StateKind::Dense(t) => Some(t),
            _ => None,
        }
    }
}

/// Parameter counts grouped by block.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub encoders: usize,
    pub memory: usize,
    pub pos_emb: usize,
    pub m0: usize,
    pub correction: usize,
    pub transformer: usize,
    pub gating: usize,
    pub query: usize,
    pub rpe_decoder: usize,
    pub mim_decoder: usize,
}

pub fn param_counts<T: Scalar>(params: &ParamSet<T>) -> ParamCounts {
    let c = |p: &str| params.count_prefix(p);
    ParamCounts {
        total: params.num_elements(),
        encoders: c("model.enc."),
        memory: c("model.") - c("model.enc."),
        pos_emb: c("model.kinaema.pos_emb"),
        m0: c("model.kinaema.m0"),
        correction: c("model.kinaema.corr."),
        transformer: c("model.kinaema.transformer."),
        gating: c("model.kinaema.gating."),
        query: c("query."),
        rpe_decoder: c("rpe."),
        mim_decoder: c("mim."),
    }
}

impl Network {
    pub fn is_kinaema(&self) -> bool {
        matches!(self.memory.core, Core::Kinaema(_))
    }
}

/// Sets the update-gate biases of every GRU cell in the memory to `value`;
/// large negative values freeze the state.
pub fn clamp_update_gates<T: Scalar>(net: &Network, params: &mut ParamSet<T>, value: f64) -> Result<()> {
    let cells = match &net.memory.core {
        Core::Kinaema(k) => &k.gating,
        Core::Gru(c) => &c.cells,
        _ => return Err(TensorError::Config("model has no update gates".into())),
    };
    for cell in cells {
        for id in [cell.b_ih, cell.b_hh] {
            let t = params.value_mut(id);
            for v in &mut t.data_mut()[cell.update_gate_cols()] {
                *v = T::of(value / 2.0);
            }
        }
    }
    Ok(())
}
