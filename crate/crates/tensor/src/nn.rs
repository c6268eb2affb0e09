// SPDX-License-Identifier: Apache-2.0

//! Parameterized building blocks. Each block stores only [`ParamId`]s and
//! is evaluated against whatever [`ParamSet`] the graph borrows.
//!
//! [`ParamSet`]: crate::ParamSet

use rand::Rng;

use crate::{Graph, ParamBuilder, ParamId, Result, Scalar, TensorError, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(±1/√d_in)`.
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            w: pb.uniform("w", &[d_in, d_out], bound)?,
            b: Some(pb.uniform("b", &[d_out], bound)?),
            d_in,
            d_out,
        })
    }

    pub fn no_bias<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            w: pb.uniform("w", &[d_in, d_out], bound)?,
            b: None,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: pb.constant("gamma", &[dim], 1.0)?,
            beta: pb.constant("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&mut pb.scope("fc1"), d_in, hidden)?,
            fc2: Linear::new(&mut pb.scope("fc2"), hidden, d_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with input and output projections. Keys and values
/// may come from tokens of a different width (`kv_dim`) than the queries.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of an attention layer plus the node holding its probabilities.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub core: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(&mut pb.scope("q"), dim, dim)?,
            wk: Linear::new(&mut pb.scope("k"), kv_dim, dim)?,
            wv: Linear::new(&mut pb.scope("v"), kv_dim, dim)?,
            wo: Linear::new(&mut pb.scope("o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xq: Var, xkv: Var, groups: usize) -> Result<Var> {
        Ok(self.forward_detailed(g, xq, xkv, groups)?.out)
    }

    pub fn forward_detailed<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xq: Var,
        xkv: Var,
        groups: usize,
    ) -> Result<AttentionOutput> {
        let q = self.wq.forward(g, xq)?;
        let k = self.wk.forward(g, xkv)?;
        let v = self.wv.forward(g, xkv)?;
        let core = g.attention(q, k, v, self.heads, groups)?;
        let out = self.wo.forward(g, core)?;
        Ok(AttentionOutput { out, core })
    }
}

/// Pre-norm attention sub-layer: `x + attn(ln(x), ln_kv(kv))`, or without
/// the residual term when `residual` is false.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub ln_q: LayerNorm,
    pub ln_kv: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub residual: bool,
}

impl AttentionLayer {
    pub fn self_attention<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(AttentionLayer {
            ln_q: LayerNorm::new(&mut pb.scope("ln"), dim)?,
            ln_kv: None,
            attn: MultiHeadAttention::new(&mut pb.scope("attn"), dim, dim, heads)?,
            residual: true,
        })
    }

    pub fn cross_attention<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        residual: bool,
    ) -> Result<Self> {
        Ok(AttentionLayer {
            ln_q: LayerNorm::new(&mut pb.scope("ln_q"), dim)?,
            ln_kv: Some(LayerNorm::new(&mut pb.scope("ln_kv"), kv_dim)?),
            attn: MultiHeadAttention::new(&mut pb.scope("attn"), dim, kv_dim, heads)?,
            residual,
        })
    }

    /// Self-attention when `kv` is `None`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        kv: Option<Var>,
        groups: usize,
    ) -> Result<AttentionOutput> {
        let q = self.ln_q.forward(g, x)?;
        let kv = match (kv, &self.ln_kv) {
            (Some(kv), Some(ln)) => ln.forward(g, kv)?,
            (Some(kv), None) => kv,
            (None, _) => q,
        };
        let a = self.attn.forward_detailed(g, q, kv, groups)?;
        let out = if self.residual { g.add(x, a.out)? } else { a.out };
        Ok(AttentionOutput { out, core: a.core })
    }
}

/// Pre-norm residual feed-forward sub-layer: `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct MlpLayer {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl MlpLayer {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, dim: usize, factor: usize) -> Result<Self> {
        Ok(MlpLayer {
            ln: LayerNorm::new(&mut pb.scope("ln"), dim)?,
            mlp: Mlp::new(&mut pb.scope("mlp"), dim, dim * factor, dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

/// Standard transformer encoder block with pre-layer-norm residuals.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub attn: AttentionLayer,
    pub ff: MlpLayer,
}

impl SelfAttentionBlock {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        dim: usize,
        heads: usize,
        mlp_factor: usize,
    ) -> Result<Self> {
        Ok(SelfAttentionBlock {
            attn: AttentionLayer::self_attention(&mut pb.scope("sa"), dim, heads)?,
            ff: MlpLayer::new(&mut pb.scope("ff"), dim, mlp_factor)?,
        })
    }

    /// `x` holds `groups` independent token sets stacked along rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, groups: usize) -> Result<Var> {
        let h = self.attn.forward(g, x, None, groups)?.out;
        self.ff.forward(g, h)
    }
}

/// Gated recurrent unit cell.
///
/// Gates follow the usual reset/update structure, with the update written as
/// `h' = (1 - z) ⊙ h + z ⊙ h̃`: `z → 0` keeps the state, `z → 1` replaces it
/// with the candidate `h̃ = tanh(W_n x + b_n + r ⊙ (U_n h + c_n))`.
#[derive(Clone, Debug)]
pub struct GruCell {
    /// `[input, 3·hidden]`, column blocks ordered reset, update, candidate.
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(GruCell {
            w_ih: pb.uniform("w_ih", &[input, 3 * hidden], bound)?,
            w_hh: pb.uniform("w_hh", &[hidden, 3 * hidden], bound)?,
            b_ih: pb.uniform("b_ih", &[3 * hidden], bound)?,
            b_hh: pb.uniform("b_hh", &[3 * hidden], bound)?,
            input,
            hidden,
        })
    }

    /// Column range of the update gate inside the fused weights.
    pub fn update_gate_cols(&self) -> std::ops::Range<usize> {
        self.hidden..2 * self.hidden
    }

    pub fn reset_gate_cols(&self) -> std::ops::Range<usize> {
        0..self.hidden
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, x: Var) -> Result<Var> {
        let hd = self.hidden;
        let (w_ih, w_hh) = (g.param(self.w_ih), g.param(self.w_hh));
        let (b_ih, b_hh) = (g.param(self.b_ih), g.param(self.b_hh));
        let gi = g.matmul(x, w_ih)?;
        let gi = g.add_row(gi, b_ih)?;
        let gh = g.matmul(h, w_hh)?;
        let gh = g.add_row(gh, b_hh)?;
        let gi_rz = g.slice_cols(gi, 0, 2 * hd)?;
        let gh_rz = g.slice_cols(gh, 0, 2 * hd)?;
        let rz = g.add(gi_rz, gh_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hd)?;
        let z = g.slice_cols(rz, hd, 2 * hd)?;
        let gi_n = g.slice_cols(gi, 2 * hd, 3 * hd)?;
        let gh_n = g.slice_cols(gh, 2 * hd, 3 * hd)?;
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n);
        let delta = g.sub(n, h)?;
        let step = g.mul(z, delta)?;
        g.add(h, step)
    }
}
