// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Memory model family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Kinaema,
    Gru,
    Ema,
    TruncHist,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Kinaema, Family::Gru, Family::Ema, Family::TruncHist];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Kinaema => "kinaema",
            Family::Gru => "gru",
            Family::Ema => "ema",
            Family::TruncHist => "trunc_hist",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kinaema" => Ok(Family::Kinaema),
            "gru" => Ok(Family::Gru),
            "ema" => Ok(Family::Ema),
            "trunc" | "trunc_hist" | "trunc-hist" => Ok(Family::TruncHist),
            other => Err(Error::Config(format!(
                "unknown model family `{other}` (kinaema|gru|ema|trunc_hist)"
            ))),
        }
    }
}

/// RPE decoder layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// One cross-attention without residual, CLS appended, then a stack of
    /// self-attention blocks.
    Kinaema,
    /// Repeated CA-MLP-SA-MLP chains with CLS attached up front.
    Chained,
}

/// Complete architecture description. Everything needed to rebuild a model
/// from a checkpoint lives here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub seed: u64,
    pub retina_len: usize,

    /// Memory slots `N` and their width `E`.
    pub n_mem: usize,
    pub e_mem: usize,
    /// Read-out tokens `N'` and their width `E'`.
    pub n_read: usize,
    pub e_read: usize,

    pub d_vis: usize,
    pub enc_hidden: usize,
    pub d_odo: usize,

    pub tf_layers: usize,
    /// `None` picks `min(24, E / 16)`.
    pub tf_heads: Option<usize>,
    pub mlp_factor: usize,
    pub gating_layers: usize,
    pub use_transformer: bool,
    pub use_gating: bool,
    /// Learned initial memory; zeros otherwise.
    pub learned_m0: bool,

    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub gru_read_hidden: usize,

    pub ema_size: usize,

    pub t_trunc: usize,

    /// `None` picks the family default: `kinaema` for Kinaema, `chained`
    /// for the baselines.
    pub decoder: Option<DecoderKind>,
    pub dec_heads: usize,
    pub dec_blocks: usize,
    pub dec_chains: usize,
    /// MLP expansion inside the chained decoder, smaller than `mlp_factor`
    /// so both decoder layouts have similar parameter counts.
    pub chain_mlp_factor: usize,
    pub head_hidden: usize,
    pub query_chunks: usize,
    pub mim_blocks: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            family: Family::Kinaema,
            seed: 0,
            retina_len: 128,
            n_mem: 8,
            e_mem: 64,
            n_read: 32,
            e_read: 16,
            d_vis: 64,
            enc_hidden: 128,
            d_odo: 64,
            tf_layers: 2,
            tf_heads: None,
            mlp_factor: 4,
            gating_layers: 2,
            use_transformer: true,
            use_gating: true,
            learned_m0: true,
            gru_hidden: 256,
            gru_layers: 2,
            gru_read_hidden: 32,
            ema_size: 512,
            t_trunc: 40,
            decoder: None,
            dec_heads: 1,
            dec_blocks: 4,
            dec_chains: 3,
            chain_mlp_factor: 2,
            head_hidden: 64,
            query_chunks: 4,
            mim_blocks: 4,
        }
    }
}

impl ModelSpec {
    pub fn for_family(family: Family) -> Self {
        ModelSpec {
            family,
            ..ModelSpec::default()
        }
    }

    /// Memory shape of the full-scale configuration. Only meant for
    /// shape checks; far too big to train here.
    pub fn full_scale() -> Self {
        ModelSpec {
            n_mem: 20,
            e_mem: 3072,
            n_read: 160,
            e_read: 384,
            tf_layers: 3,
            gating_layers: 3,
            ..ModelSpec::default()
        }
    }

    pub fn heads(&self) -> usize {
        self.tf_heads.unwrap_or_else(|| (self.e_mem / 16).clamp(1, 24))
    }

    pub fn decoder_kind(&self) -> DecoderKind {
        self.decoder.unwrap_or(match self.family {
            Family::Kinaema => DecoderKind::Kinaema,
            _ => DecoderKind::Chained,
        })
    }

    /// Width of one observation embedding `[x̃, ũ]`.
    pub fn obs_dim(&self) -> usize {
        self.d_vis + self.d_odo
    }

    /// Width of the tokens the decoders attend to.
    pub fn token_dim(&self) -> usize {
        match self.family {
            Family::TruncHist => self.obs_dim(),
            _ => self.e_read,
        }
    }

    /// Read-out tokens per episode.
    pub fn token_count(&self) -> usize {
        match self.family {
            Family::TruncHist => self.t_trunc,
            _ => self.n_read,
        }
    }

    pub fn chunk_len(&self) -> usize {
        self.retina_len / self.query_chunks.max(1)
    }

    /// Number of recurrent state scalars per episode.
    pub fn memory_size(&self) -> usize {
        match self.family {
            Family::Kinaema => self.n_mem * self.e_mem,
            Family::Gru => self.gru_hidden * self.gru_layers,
            Family::Ema => self.ema_size,
            Family::TruncHist => self.t_trunc * self.obs_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        let positive = [
            ("retina_len", self.retina_len),
            ("n_read", self.n_read),
            ("e_read", self.e_read),
            ("d_vis", self.d_vis),
            ("enc_hidden", self.enc_hidden),
            ("d_odo", self.d_odo),
            ("mlp_factor", self.mlp_factor),
            ("chain_mlp_factor", self.chain_mlp_factor),
            ("dec_heads", self.dec_heads),
            ("head_hidden", self.head_hidden),
            ("query_chunks", self.query_chunks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.retina_len.is_multiple_of(self.query_chunks) {
            return bad(format!(
                "retina length {} is not divisible into {} query chunks",
                self.retina_len, self.query_chunks
            ));
        }
        if !self.e_read.is_multiple_of(self.dec_heads) {
            return bad(format!(
                "e_read {} not divisible by dec_heads {}",
                self.e_read, self.dec_heads
            ));
        }
        match self.family {
            Family::Kinaema => {
                if self.n_mem == 0 || self.e_mem == 0 {
                    return bad("n_mem and e_mem must be positive".into());
                }
                if self.n_mem * self.e_mem != self.n_read * self.e_read {
                    return bad(format!(
                        "read-out {}x{} does not hold the {}x{} memory",
                        self.n_read, self.e_read, self.n_mem, self.e_mem
                    ));
                }
                if self.use_transformer && (self.heads() == 0 || !self.e_mem.is_multiple_of(self.heads())) {
                    return bad(format!("e_mem {} not divisible by {} heads", self.e_mem, self.heads()));
                }
                if self.use_gating && self.gating_layers == 0 {
                    return bad("gating_layers must be at least 1 when gating is enabled".into());
                }
            }
            Family::Gru => {
                if self.gru_hidden == 0 || self.gru_layers == 0 || self.gru_read_hidden == 0 {
                    return bad("gru sizes must be positive".into());
                }
            }
            Family::Ema => {
                if self.ema_size != self.n_read * self.e_read {
                    return bad(format!(
                        "ema_size {} must equal read-out size {}x{}",
                        self.ema_size, self.n_read, self.e_read
                    ));
                }
            }
            Family::TruncHist => {
                if self.t_trunc == 0 {
                    return bad("t_trunc must be at least 1".into());
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_family() {
        for f in Family::ALL {
            ModelSpec::for_family(f).validate().unwrap();
        }
        assert_eq!(ModelSpec::default().heads(), 4);
        assert_eq!(ModelSpec::full_scale().heads(), 24);
        ModelSpec::full_scale().validate().unwrap();
    }

    #[test]
    fn readout_must_hold_memory() {
        let s = ModelSpec {
            n_read: 30,
            ..ModelSpec::default()
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = ModelSpec {
            family: Family::Ema,
            ema_size: 500,
            ..ModelSpec::default()
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn matched_recurrent_memory() {
        let sizes: Vec<usize> = [Family::Kinaema, Family::Gru, Family::Ema]
            .iter()
            .map(|&f| ModelSpec::for_family(f).memory_size())
            .collect();
        assert_eq!(sizes, vec![512, 512, 512]);
    }

    #[test]
    fn family_parse() {
        assert_eq!("trunc".parse::<Family>().unwrap(), Family::TruncHist);
        assert!("lstm".parse::<Family>().is_err());
    }
}
