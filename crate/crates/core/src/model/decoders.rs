// SPDX-License-Identifier: Apache-2.0

//! Query encoding, the relative-pose decoders and the masked-modeling
//! decoder.
//!
//! Queries are batched: `Q` query retinas belonging to `B` episodes, stored
//! episode-major, so query rows of episode `b` are contiguous. Each query
//! becomes `Lq` chunk tokens.

use kinaema_tensor::nn::{AttentionLayer, Linear, Mlp, MlpLayer, SelfAttentionBlock};
use kinaema_tensor::{Graph, ParamBuilder, ParamId, Result, Scalar, TensorError, Var};
use rand::Rng;

use super::spec::{DecoderKind, ModelSpec};

/// Splits a retina into `Lq` contiguous chunks, each projected to `E'` and
/// tagged with a learned position embedding.
#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub proj: Linear,
    pub pos: ParamId,
    pub chunks: usize,
    pub chunk_len: usize,
}

impl QueryEncoder {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, spec: &ModelSpec) -> Result<Self> {
        let chunk_len = spec.chunk_len();
        Ok(QueryEncoder {
            proj: Linear::new(&mut pb.scope("proj"), chunk_len, spec.e_read)?,
            pos: pb.normal("pos", &[spec.query_chunks, spec.e_read], 0.02)?,
            chunks: spec.query_chunks,
            chunk_len,
        })
    }

    /// `[Q, K]` retinas as `[Q·Lq, chunk]` rows.
    pub fn split<T: Scalar>(&self, g: &mut Graph<'_, T>, retinas: Var) -> Result<Var> {
        let q = g.value(retinas).rows();
        if g.value(retinas).cols() != self.chunks * self.chunk_len {
            return Err(TensorError::Config(format!(
                "query width {} does not match {} chunks of {}",
                g.value(retinas).cols(),
                self.chunks,
                self.chunk_len
            )));
        }
        g.reshape(retinas, &[q * self.chunks, self.chunk_len])
    }

    /// `[Q, K]` retinas to `[Q·Lq, E']` tokens.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, retinas: Var) -> Result<Var> {
        let q = g.value(retinas).rows();
        let chunks = self.split(g, retinas)?;
        let tok = self.proj.forward(g, chunks)?;
        let pos = g.param(self.pos);
        let pos = g.tile_rows(pos, q)?;
        g.add(tok, pos)
    }

    /// Like [`forward`](Self::forward) but tokens with `mask[i]` set are
    /// replaced by `mask_token` plus their position embedding.
    pub fn forward_masked<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        retinas: Var,
        mask: &[bool],
        mask_token: ParamId,
    ) -> Result<Var> {
        let q = g.value(retinas).rows();
        if mask.len() != q * self.chunks {
            return Err(TensorError::Config(format!(
                "mask has {} entries for {} chunk tokens",
                mask.len(),
                q * self.chunks
            )));
        }
        let chunks = self.split(g, retinas)?;
        let tok = self.proj.forward(g, chunks)?;
        let mt = g.param(mask_token);
        let all = g.concat_rows(&[tok, mt])?;
        let index: Vec<usize> = mask
            .iter()
            .enumerate()
            .map(|(i, &m)| if m { q * self.chunks } else { i })
            .collect();
        let tok = g.gather_rows(all, &index)?;
        let pos = g.param(self.pos);
        let pos = g.tile_rows(pos, q)?;
        g.add(tok, pos)
    }
}

#[derive(Clone, Debug)]
pub enum RpeBody {
    Kinaema {
        ca: AttentionLayer,
        blocks: Vec<SelfAttentionBlock>,
    },
    Chained {
        chains: Vec<Chain>,
    },
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub ca: AttentionLayer,
    pub ff1: MlpLayer,
    pub sa: AttentionLayer,
    pub ff2: MlpLayer,
}

/// Regresses `[d, cos θ, sin θ, cos φ, sin φ]` from memory tokens.
#[derive(Clone, Debug)]
pub struct RpeDecoder {
    pub cls: ParamId,
    pub body: RpeBody,
    pub head: Mlp,
}

/// Decoder output plus the cross-attention node used for attention dumps.
#[derive(Clone, Copy, Debug)]
pub struct DecodeOutput {
    pub pred: Var,
    pub cross_attention: Var,
}

fn with_cls<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, cls: ParamId, queries: usize, lq: usize) -> Result<Var> {
    let c = g.param(cls);
    let all = g.concat_rows(&[tokens, c])?;
    let cls_row = queries * lq;
    let index: Vec<usize> = (0..queries)
        .flat_map(|q| std::iter::once(cls_row).chain(q * lq..(q + 1) * lq))
        .collect();
    g.gather_rows(all, &index)
}

impl RpeDecoder {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, spec: &ModelSpec) -> Result<Self> {
        let (d, kv, heads) = (spec.e_read, spec.token_dim(), spec.dec_heads);
        let cls = pb.normal("cls", &[1, d], 0.02)?;
        let body = match spec.decoder_kind() {
            DecoderKind::Kinaema => RpeBody::Kinaema {
                ca: AttentionLayer::cross_attention(&mut pb.scope("ca"), d, kv, heads, false)?,
                blocks: (0..spec.dec_blocks)
                    .map(|l| SelfAttentionBlock::new(&mut pb.scope(&format!("sa.l{l}")), d, heads, spec.mlp_factor))
                    .collect::<Result<Vec<_>>>()?,
            },
            DecoderKind::Chained => RpeBody::Chained {
                chains: (0..spec.dec_chains)
                    .map(|c| {
                        let mut pb = pb.scope(&format!("chain{c}"));
                        Ok(Chain {
                            ca: AttentionLayer::cross_attention(&mut pb.scope("ca"), d, kv, heads, c != 0)?,
                            ff1: MlpLayer::new(&mut pb.scope("ff1"), d, spec.chain_mlp_factor)?,
                            sa: AttentionLayer::self_attention(&mut pb.scope("sa"), d, heads)?,
                            ff2: MlpLayer::new(&mut pb.scope("ff2"), d, spec.chain_mlp_factor)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            },
        };
        Ok(RpeDecoder {
            cls,
            body,
            head: Mlp::new(&mut pb.scope("head"), d, spec.head_hidden, 5)?,
        })
    }

    /// `y` holds `B` token sets stacked by rows, `query_tokens` holds
    /// `queries` groups of `lq` tokens, episode-major. Returns `[queries, 5]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        y: Var,
        query_tokens: Var,
        episodes: usize,
        queries: usize,
        lq: usize,
    ) -> Result<DecodeOutput> {
        if !queries.is_multiple_of(episodes) || g.value(query_tokens).rows() != queries * lq {
            return Err(TensorError::Config(format!(
                "{} query tokens do not split into {queries} queries of {lq} over {episodes} episodes",
                g.value(query_tokens).rows()
            )));
        }
        let (x, core) = match &self.body {
            RpeBody::Kinaema { ca, blocks } => {
                let a = ca.forward(g, query_tokens, Some(y), episodes)?;
                let mut x = with_cls(g, a.out, self.cls, queries, lq)?;
                for b in blocks {
                    x = b.forward(g, x, queries)?;
                }
                (x, a.core)
            }
            RpeBody::Chained { chains } => {
                let mut x = with_cls(g, query_tokens, self.cls, queries, lq)?;
                let mut first = None;
                for c in chains {
                    let a = c.ca.forward(g, x, Some(y), episodes)?;
                    first.get_or_insert(a.core);
                    x = c.ff1.forward(g, a.out)?;
                    x = c.sa.forward(g, x, None, queries)?.out;
                    x = c.ff2.forward(g, x)?;
                }
                (x, first.expect("at least one chain"))
            }
        };
        let cls_rows: Vec<usize> = (0..queries).map(|q| q * (lq + 1)).collect();
        let cls = g.gather_rows(x, &cls_rows)?;
        let pred = self.head.forward(g, cls)?;
        Ok(DecodeOutput {
            pred,
            cross_attention: core,
        })
    }
}

/// Reconstructs masked retina chunks from memory and the visible chunks.
#[derive(Clone, Debug)]
pub struct MimDecoder {
    pub mask_token: ParamId,
    pub ca: AttentionLayer,
    pub blocks: Vec<SelfAttentionBlock>,
    pub head: Linear,
}

impl MimDecoder {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, spec: &ModelSpec) -> Result<Self> {
        let d = spec.e_read;
        Ok(MimDecoder {
            mask_token: pb.normal("mask_token", &[1, d], 0.02)?,
            ca: AttentionLayer::cross_attention(&mut pb.scope("ca"), d, spec.token_dim(), spec.dec_heads, true)?,
            blocks: (0..spec.mim_blocks)
                .map(|l| {
                    SelfAttentionBlock::new(&mut pb.scope(&format!("sa.l{l}")), d, spec.dec_heads, spec.mlp_factor)
                })
                .collect::<Result<Vec<_>>>()?,
            head: Linear::new(&mut pb.scope("head"), d, spec.chunk_len())?,
        })
    }

    /// Returns reconstructions of all `Q·Lq` chunks; callers score the
    /// masked ones. `mask` must select at least one chunk.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        qe: &QueryEncoder,
        y: Var,
        retinas: Var,
        mask: &[bool],
        episodes: usize,
    ) -> Result<Var> {
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::Config(
                "masked modeling needs at least one masked chunk".into(),
            ));
        }
        let queries = g.value(retinas).rows();
        let tokens = qe.forward_masked(g, retinas, mask, self.mask_token)?;
        let mut x = self.ca.forward(g, tokens, Some(y), episodes)?.out;
        for b in &self.blocks {
            x = b.forward(g, x, queries)?;
        }
        self.head.forward(g, x)
    }
}
