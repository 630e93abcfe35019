//! Relation refactoring: per-pair binary "connected / not connected"
//! distributions from the prior (context only) and the posterior (context
//! plus target item), Gumbel sampling, and the graph regularizer.
//!
//! Probability tensors are `P x 2` with column 0 = not connected and
//! column 1 = connected.

use candle_core::{Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{EntityId, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::graph_encoder::EntityEmbeddings;
use crate::nn::{clamped_log, softmax_last, Builder, Init, Linear, DTYPE};

pub const NOT_CONNECTED: usize = 0;
pub const CONNECTED: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationDistribution {
    pub p_connect: f64,
    pub p_not: f64,
}

impl RelationDistribution {
    pub fn new(p_connect: f64) -> Self {
        RelationDistribution {
            p_connect,
            p_not: 1.0 - p_connect,
        }
    }

    pub fn prob(&self, connected: bool) -> f64 {
        if connected {
            self.p_connect
        } else {
            self.p_not
        }
    }
}

/// Reads a `P x 2` probability tensor.
pub fn to_distributions(probs: &Tensor) -> Result<Vec<RelationDistribution>> {
    Ok(probs
        .to_vec2::<f64>()?
        .into_iter()
        .map(|r| RelationDistribution {
            p_connect: r[CONNECTED],
            p_not: r[NOT_CONNECTED],
        })
        .collect())
}

pub fn from_distributions(dists: &[RelationDistribution]) -> Result<Tensor> {
    let flat: Vec<f64> = dists.iter().flat_map(|d| [d.p_not, d.p_connect]).collect();
    Ok(Tensor::from_vec(flat, (dists.len(), 2), &Device::Cpu)?)
}

/// Fusion of head, tail and context followed by a two-layer perceptron.
/// The prior and the posterior are two independent instances.
#[derive(Debug, Clone)]
pub struct RefactorNet {
    pub ctx_proj: Linear,
    /// `7d x 7d`, no bias.
    pub w_o: Tensor,
    pub hidden: Linear,
    pub out: Linear,
    dim: usize,
}

impl RefactorNet {
    pub fn new(b: &mut Builder, cfg: &Config) -> Result<Self> {
        let d = cfg.ent_dim;
        Ok(RefactorNet {
            ctx_proj: Linear::new(&mut b.pp("ctx_proj"), cfg.ctx_dim, d, true)?,
            w_o: b.var("w_o", &[7 * d, 7 * d], Init::Uniform(1.0 / ((7 * d) as f64).sqrt()))?,
            hidden: Linear::new(&mut b.pp("hidden"), 7 * d, cfg.mlp_hidden(), true)?,
            out: Linear::new(&mut b.pp("out"), cfg.mlp_hidden(), 2, true)?,
            dim: d,
        })
    }

    /// Maps an encoder context vector to the entity width.
    pub fn project_context(&self, ctx: &Tensor) -> Result<Tensor> {
        self.ctx_proj.forward(ctx)
    }

    /// `m = [f1; f2; f3] W_o` per row; `e_h`, `e_t` are `P x d`, `d` is a
    /// projected context vector shared by every row.
    pub fn fuse(&self, e_h: &Tensor, e_t: &Tensor, d: &Tensor) -> Result<Tensor> {
        let (rows, width) = e_h.dims2()?;
        if width != self.dim || e_t.dims2()? != (rows, width) || d.dims1()? != width {
            return Err(Error::Dimension(format!(
                "fusion expects width {}, got heads {:?}, tails {:?}, context {:?}",
                self.dim,
                e_h.dims(),
                e_t.dims(),
                d.dims()
            )));
        }
        let dd = d.unsqueeze(0)?.broadcast_as((rows, width))?;
        let ht = (e_h * e_t)?;
        let f = Tensor::cat(
            &[
                e_h,
                e_t,
                &dd,
                &ht,
                &(e_t * &dd)?,
                &(e_h * &dd)?,
                &(&ht * &dd)?,
            ],
            1,
        )?;
        Ok(f.matmul(&self.w_o)?)
    }

    pub fn logits(&self, m: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(m)?.tanh()?)
    }

    /// `P x 2` relation probabilities for rows of head/tail embeddings.
    pub fn distributions(&self, e_h: &Tensor, e_t: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let d = self.project_context(ctx)?;
        softmax_last(&self.logits(&self.fuse(e_h, e_t, &d)?)?)
    }

    /// Distributions for explicit pairs; empty pair lists give a `0 x 2` tensor.
    pub fn pair_distributions(
        &self,
        emb: &EntityEmbeddings,
        pairs: &[(EntityId, EntityId)],
        ctx: &Tensor,
    ) -> Result<Tensor> {
        if pairs.is_empty() {
            return Ok(Tensor::zeros((0, 2), DTYPE, &Device::Cpu)?);
        }
        let (e_h, e_t) = pair_embeddings(emb, pairs)?;
        self.distributions(&e_h, &e_t, ctx)
    }
}

pub fn pair_embeddings(emb: &EntityEmbeddings, pairs: &[(EntityId, EntityId)]) -> Result<(Tensor, Tensor)> {
    let heads: Vec<EntityId> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<EntityId> = pairs.iter().map(|p| p.1).collect();
    Ok((emb.rows(&heads)?, emb.rows(&tails)?))
}

/// `sum_pairs KL(q || p)` over `P x 2` tensors.
pub fn kl_term(q: &Tensor, p: &Tensor, eps: f64) -> Result<Tensor> {
    if q.dims() != p.dims() {
        return Err(Error::Dimension(format!("KL over {:?} and {:?}", q.dims(), p.dims())));
    }
    let diff = (clamped_log(q, eps)? - clamped_log(p, eps)?)?;
    Ok((q * diff)?.sum_all()?)
}

pub fn kl_pairs(q: &[RelationDistribution], p: &[RelationDistribution], eps: f64) -> f64 {
    q.iter()
        .zip(p)
        .map(|(q, p)| {
            let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a.max(eps).ln() - b.max(eps).ln()) };
            term(q.p_connect, p.p_connect) + term(q.p_not, p.p_not)
        })
        .sum()
}

/// Whether a triple links the pair in either direction.
pub fn original_labels(kg: &KnowledgeGraph, pairs: &[(EntityId, EntityId)]) -> Vec<bool> {
    pairs.iter().map(|&(h, t)| kg.is_connected(h, t)).collect()
}

fn one_hot(labels: &[bool]) -> Result<Tensor> {
    let flat: Vec<f64> = labels
        .iter()
        .flat_map(|&c| if c { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    Ok(Tensor::from_vec(flat, (labels.len(), 2), &Device::Cpu)?)
}

/// `sum_pairs -log prior(org) - log posterior(org)` with one-hot original labels.
pub fn reg_loss(prior: &Tensor, posterior: &Tensor, labels: &[bool], eps: f64) -> Result<Tensor> {
    let (rows, _) = prior.dims2()?;
    if rows != labels.len() || posterior.dims2()?.0 != rows {
        return Err(Error::Dimension("regularizer pair count mismatch".into()));
    }
    let target = one_hot(labels)?;
    let lp = (&target * clamped_log(prior, eps)?)?.sum_all()?;
    let lq = (&target * clamped_log(posterior, eps)?)?.sum_all()?;
    Ok((lp + lq)?.neg()?)
}

pub fn reg_loss_pairs(prior: &[RelationDistribution], posterior: &[RelationDistribution], labels: &[bool], eps: f64) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -prior[i].prob(c).max(eps).ln() - posterior[i].prob(c).max(eps).ln())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    GumbelRelaxed,
    GumbelHard,
    Argmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSubgraph {
    pub pairs: Vec<(EntityId, EntityId)>,
    /// Per-pair weight of the connected class: a bit for hard modes.
    pub weights: Vec<f64>,
    pub mode: SampleMode,
}

pub fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Connected-class weight of one Gumbel-softmax draw.
pub fn sample_gumbel(dist: &RelationDistribution, tau: f64, hard: bool, eps: f64, rng: &mut ChaCha8Rng) -> f64 {
    let g_not = gumbel(rng);
    let g_con = gumbel(rng);
    let a = (dist.p_not.max(eps).ln() + g_not) / tau;
    let b = (dist.p_connect.max(eps).ln() + g_con) / tau;
    if hard {
        if b >= a {
            1.0
        } else {
            0.0
        }
    } else {
        // softmax over two logits, written to avoid overflow
        1.0 / (1.0 + (a - b).exp())
    }
}

pub fn argmax_sample(dist: &RelationDistribution) -> bool {
    dist.p_connect >= dist.p_not
}

/// `P x 2` standard Gumbel noise.
pub fn gumbel_noise(rows: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let flat: Vec<f64> = (0..rows * 2).map(|_| gumbel(rng)).collect();
    Ok(Tensor::from_vec(flat, (rows, 2), &Device::Cpu)?)
}

/// Differentiable connected-class weights for a `P x 2` probability tensor and
/// fixed noise. Hard mode returns exact bits in the forward pass and the
/// relaxed gradient in the backward pass.
pub fn gumbel_weights(probs: &Tensor, noise: &Tensor, tau: f64, hard: bool, eps: f64) -> Result<Tensor> {
    let y = softmax_last(&((clamped_log(probs, eps)? + noise)? / tau)?)?;
    let y = if hard {
        let rows = y.to_vec2::<f64>()?;
        let bits: Vec<bool> = rows.iter().map(|r| r[CONNECTED] >= r[NOT_CONNECTED]).collect();
        let hot = one_hot(&bits)?;
        ((hot - y.detach())? + &y)?
    } else {
        y
    };
    Ok(y.narrow(D::Minus1, CONNECTED, 1)?.squeeze(D::Minus1)?.contiguous()?)
}

pub fn argmax_weights(dists: &[RelationDistribution]) -> Vec<f64> {
    dists.iter().map(|d| if argmax_sample(d) { 1.0 } else { 0.0 }).collect()
}

/// `log q(G) = sum_pairs log q(bit)` for a hard subgraph.
pub fn subgraph_log_prob(dists: &[RelationDistribution], bits: &[bool], eps: f64) -> f64 {
    dists.iter().zip(bits).map(|(d, &b)| d.prob(b).max(eps).ln()).sum()
}
