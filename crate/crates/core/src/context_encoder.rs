//! Transformer encoder over the flattened dialogue context.
//!
//! The prior condition vector is the first-position state of
//! `[<s>] ++ context`; the posterior one encodes
//! `[<s>] ++ context ++ [<sep>] ++ item words` with the same weights. Item
//! words come from the surface name, never from the item's graph embedding.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::vocab::{SEP, START};
use crate::corpus::{tokenize, EntityId, KnowledgeGraph, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Builder, Embedding, FeedForward, LayerNorm, MultiHeadAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextRole {
    Prior,
    Posterior,
}

#[derive(Debug, Clone)]
pub struct ContextVector {
    pub values: Tensor,
    pub role: ContextRole,
}

impl ContextVector {
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.values.to_vec1::<f64>()?)
    }
}

/// Per-position encoder states; rows follow the encoder input, start token included.
#[derive(Debug, Clone)]
pub struct TokenMatrix {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl TokenMatrix {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Zero-pads to `len` rows, marking the padding invalid.
    pub fn padded(&self, len: usize) -> Result<TokenMatrix> {
        let (rows, dim) = self.values.dims2()?;
        if len <= rows {
            return Ok(self.clone());
        }
        let pad = Tensor::zeros((len - rows, dim), self.values.dtype(), self.values.device())?;
        let mut mask = self.mask.clone();
        mask.resize(len, false);
        Ok(TokenMatrix {
            values: Tensor::cat(&[&self.values, &pad], 0)?,
            mask,
        })
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    ff: FeedForward,
    ff_norm: LayerNorm,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.attn_norm.forward(&(x + self.attn.forward(x, x, None)?)?)?;
        self.ff_norm.forward(&(&x + self.ff.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    tokens: Embedding,
    positions: Embedding,
    segments: Embedding,
    embed_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    max_len: usize,
    dim: usize,
}

impl ContextEncoder {
    pub fn new(b: &mut Builder, cfg: &Config, vocab_len: usize) -> Result<Self> {
        let dim = cfg.ctx_dim;
        let layers = (0..cfg.enc_layers)
            .map(|i| {
                let mut lb = b.pp(&format!("layer{i}"));
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(&mut lb.pp("attn"), dim, cfg.enc_heads)?,
                    attn_norm: LayerNorm::new(&mut lb.pp("attn_norm"), dim)?,
                    ff: FeedForward::new(&mut lb.pp("ff"), dim, 4 * dim)?,
                    ff_norm: LayerNorm::new(&mut lb.pp("ff_norm"), dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContextEncoder {
            tokens: Embedding::new(&mut b.pp("tokens"), vocab_len, dim)?,
            positions: Embedding::new(&mut b.pp("positions"), cfg.max_ctx_len, dim)?,
            segments: Embedding::new(&mut b.pp("segments"), 2, dim)?,
            embed_norm: LayerNorm::new(&mut b.pp("embed_norm"), dim)?,
            layers,
            max_len: cfg.max_ctx_len,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `[<s>]` plus the most recent context tokens that fit.
    pub fn prior_input(&self, vocab: &Vocabulary, context: &[Utterance]) -> (Vec<u32>, Vec<u32>) {
        let flat = flatten(vocab, context);
        let keep = flat.len().min(self.max_len - 1);
        let mut ids = Vec::with_capacity(keep + 1);
        ids.push(START);
        ids.extend_from_slice(&flat[flat.len() - keep..]);
        let segs = vec![0; ids.len()];
        (ids, segs)
    }

    /// Context (truncated from the front) followed by `<sep>` and the target
    /// names, each target introduced by its own `<sep>`.
    pub fn posterior_input(
        &self,
        vocab: &Vocabulary,
        kg: &KnowledgeGraph,
        context: &[Utterance],
        targets: &[EntityId],
    ) -> Result<(Vec<u32>, Vec<u32>)> {
        let mut item_part = Vec::new();
        for &t in targets {
            let ent = kg.entity(t)?;
            if !ent.is_item {
                return Err(Error::UnknownEntity(t.0));
            }
            item_part.push(SEP);
            item_part.extend(vocab.encode(&tokenize(&ent.name)));
        }
        if targets.is_empty() {
            item_part.push(SEP);
        }
        item_part.truncate(self.max_len - 1);

        let flat = flatten(vocab, context);
        let room = self.max_len - 1 - item_part.len();
        let keep = flat.len().min(room);
        let mut ids = Vec::with_capacity(1 + keep + item_part.len());
        ids.push(START);
        ids.extend_from_slice(&flat[flat.len() - keep..]);
        let ctx_len = ids.len();
        ids.extend(item_part);
        let segs = (0..ids.len()).map(|i| u32::from(i >= ctx_len)).collect();
        Ok((ids, segs))
    }

    pub fn encode_ids(&self, ids: &[u32], segs: &[u32]) -> Result<Tensor> {
        if ids.is_empty() || ids.len() > self.max_len || segs.len() != ids.len() {
            return Err(Error::Dimension(format!(
                "encoder input of {} tokens ({} segments), limit {}",
                ids.len(),
                segs.len(),
                self.max_len
            )));
        }
        let pos: Vec<u32> = (0..ids.len() as u32).collect();
        let x = ((self.tokens.forward(ids)? + self.positions.forward(&pos)?)? + self.segments.forward(segs)?)?;
        let mut x = self.embed_norm.forward(&x)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn encode_tokens(&self, vocab: &Vocabulary, context: &[Utterance]) -> Result<TokenMatrix> {
        let (ids, segs) = self.prior_input(vocab, context);
        let values = self.encode_ids(&ids, &segs)?;
        Ok(TokenMatrix {
            mask: vec![true; ids.len()],
            values,
        })
    }

    pub fn encode_context(&self, vocab: &Vocabulary, context: &[Utterance]) -> Result<ContextVector> {
        let m = self.encode_tokens(vocab, context)?;
        Ok(ContextVector {
            values: m.values.get(0)?,
            role: ContextRole::Prior,
        })
    }

    pub fn encode_context_with_target(
        &self,
        vocab: &Vocabulary,
        kg: &KnowledgeGraph,
        context: &[Utterance],
        targets: &[EntityId],
    ) -> Result<ContextVector> {
        let (ids, segs) = self.posterior_input(vocab, kg, context, targets)?;
        Ok(ContextVector {
            values: self.encode_ids(&ids, &segs)?.get(0)?,
            role: ContextRole::Posterior,
        })
    }
}

fn flatten(vocab: &Vocabulary, context: &[Utterance]) -> Vec<u32> {
    context.iter().flat_map(|u| vocab.encode(&u.tokens)).collect()
}
