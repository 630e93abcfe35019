//! Hyperparameters and every tunable that the model and training stages read.
//!
//! Defaults reproduce the published settings (entity width 128, word width 768,
//! 40 tail entities, mixture weight 0.1, loss weights 1 / 10 / 0.0025, one RGCN
//! layer, per-group Adam rates and a 2000-step warm-up for the decoder). Desk-scale
//! fixtures shrink the widths through a config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Small transformer trained from scratch.
    Tiny,
    /// Same architecture, warm-started from `encoder_path`.
    Pretrained,
}

/// Which prior-network output weights the tail entities at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalWeights {
    /// Hard 0/1 connection bits from the argmax of the prior.
    Argmax,
    /// Raw prior connection probabilities.
    Prob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    Recall,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // recommendation objective
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub k_tail: usize,

    // widths
    pub ent_dim: usize,
    pub ctx_dim: usize,
    /// Hidden size of the self-attentive pooling scorer; `None` means `ent_dim`.
    pub d_att: Option<usize>,
    /// Hidden width of the relation MLPs; `None` means `2 * ent_dim`.
    pub mlp_hidden: Option<usize>,
    pub rgcn_layers: usize,

    // context encoder
    pub encoder: EncoderKind,
    pub encoder_path: Option<PathBuf>,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub max_ctx_len: usize,

    // decoder
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub vocab_size: usize,
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_len: usize,

    // optimisation
    pub lr_encoder: f64,
    pub lr_rgcn: f64,
    pub lr_other: f64,
    pub gen_lr_factor: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub rec_epochs: usize,
    pub gen_epochs: usize,

    // latent subgraph sampling
    pub tau: f64,
    pub straight_through: bool,
    pub clamp_eps: f64,
    pub n_samples: usize,
    pub eval_weights: EvalWeights,

    pub rouge: RougeVariant,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            alpha: 0.1,
            beta: 1.0,
            gamma: 10.0,
            lambda: 0.0025,
            k_tail: 40,
            ent_dim: 128,
            ctx_dim: 768,
            d_att: None,
            mlp_hidden: None,
            rgcn_layers: 1,
            encoder: EncoderKind::Tiny,
            encoder_path: None,
            enc_layers: 2,
            enc_heads: 4,
            max_ctx_len: 256,
            dec_layers: 2,
            dec_heads: 4,
            vocab_size: 23_929,
            mode: DecodeMode::Greedy,
            beam_width: 4,
            max_len: 32,
            lr_encoder: 1e-5,
            lr_rgcn: 5e-4,
            lr_other: 1e-3,
            gen_lr_factor: 0.5,
            warmup_steps: 2000,
            batch_size: 8,
            pretrain_epochs: 10,
            rec_epochs: 10,
            gen_epochs: 10,
            tau: 0.5,
            straight_through: true,
            clamp_eps: 1e-10,
            n_samples: 8,
            eval_weights: EvalWeights::Argmax,
            rouge: RougeVariant::Recall,
            seed: 42,
        }
    }
}

impl Config {
    pub fn d_att(&self) -> usize {
        self.d_att.unwrap_or(self.ent_dim)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(2 * self.ent_dim)
    }

    /// Whether parameters trained under `other` load into a model built from `self`.
    pub fn same_architecture(&self, other: &Config) -> bool {
        let shape = |c: &Config| {
            (
                c.ent_dim,
                c.ctx_dim,
                c.d_att(),
                c.mlp_hidden(),
                c.rgcn_layers,
                c.enc_layers,
                c.enc_heads,
                c.max_ctx_len,
                c.dec_layers,
                c.dec_heads,
                c.vocab_size,
                c.max_len,
            )
        };
        shape(self) == shape(other)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.ent_dim == 0 || self.ctx_dim == 0 {
            return fail("ent_dim and ctx_dim must be positive".into());
        }
        if self.rgcn_layers == 0 {
            return fail("rgcn_layers must be at least 1".into());
        }
        if self.enc_heads == 0 || self.ctx_dim % self.enc_heads != 0 {
            return fail(format!(
                "ctx_dim {} is not divisible by enc_heads {}",
                self.ctx_dim, self.enc_heads
            ));
        }
        if self.dec_heads == 0 || self.ctx_dim % self.dec_heads != 0 {
            return fail(format!(
                "ctx_dim {} is not divisible by dec_heads {}",
                self.ctx_dim, self.dec_heads
            ));
        }
        if self.max_ctx_len < 2 {
            return fail("max_ctx_len must leave room for the start token".into());
        }
        if self.vocab_size <= crate::corpus::vocab::RESERVED.len() {
            return fail("vocab_size must exceed the reserved tokens".into());
        }
        if self.batch_size == 0 || self.beam_width == 0 {
            return fail("batch_size and beam_width must be positive".into());
        }
        if self.encoder == EncoderKind::Pretrained && self.encoder_path.is_none() {
            return fail("encoder = \"pretrained\" requires encoder_path".into());
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1.0) {
            return fail("clamp_eps must lie in (0, 1)".into());
        }
        Ok(())
    }
}
