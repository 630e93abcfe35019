//! Relational graph convolution over the incomplete KG and the self-attentive
//! pre-recommendation head used to pretrain it.
//!
//! One layer computes, for every entity `i`,
//!
//! ```text
//! h_i' = W_self h_i + sum_r (1 / |N_r(i)|) sum_{j in N_r(i)} W_r h_j
//! ```
//!
//! where `N_r(i)` are the distinct neighbors linked to `i` by relation `r` in
//! either direction. Layers are separated by ReLU; the last layer is linear.

use std::collections::BTreeSet;

use candle_core::{Device, Tensor};

use crate::config::Config;
use crate::corpus::{EntityId, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::nn::{clamped_log, softmax_last, Builder, Init};

/// Message lists for one relation: `dst <- src` with weight `1 / |N_r(dst)|`.
#[derive(Debug, Clone)]
pub struct RelationEdges {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub norm: Vec<f64>,
    src_t: Tensor,
    dst_t: Tensor,
    norm_t: Tensor,
}

/// Precomputed message-passing index of a knowledge graph.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub num_entities: usize,
    pub relations: Vec<RelationEdges>,
}

impl GraphIndex {
    pub fn new(kg: &KnowledgeGraph) -> Result<Self> {
        let dev = Device::Cpu;
        let mut per_rel: Vec<BTreeSet<(u32, u32)>> = vec![BTreeSet::new(); kg.num_relations()];
        for t in kg.triples() {
            let set = &mut per_rel[t.relation.0 as usize];
            set.insert((t.tail.0, t.head.0));
            set.insert((t.head.0, t.tail.0));
        }
        let mut relations = Vec::with_capacity(per_rel.len());
        for set in per_rel {
            let mut degree = vec![0usize; kg.num_entities()];
            for &(dst, _) in &set {
                degree[dst as usize] += 1;
            }
            let dst: Vec<u32> = set.iter().map(|&(d, _)| d).collect();
            let src: Vec<u32> = set.iter().map(|&(_, s)| s).collect();
            let norm: Vec<f64> = dst.iter().map(|&d| 1.0 / degree[d as usize] as f64).collect();
            let n = dst.len();
            relations.push(RelationEdges {
                src_t: Tensor::new(src.as_slice(), &dev)?,
                dst_t: Tensor::new(dst.as_slice(), &dev)?,
                norm_t: Tensor::from_vec(norm.clone(), (n, 1), &dev)?,
                src,
                dst,
                norm,
            });
        }
        Ok(GraphIndex {
            num_entities: kg.num_entities(),
            relations,
        })
    }
}

/// `|E| x d_ent` entity representations; row `i` belongs to entity `i`.
#[derive(Debug, Clone)]
pub struct EntityEmbeddings {
    pub table: Tensor,
}

impl EntityEmbeddings {
    pub fn rows(&self, ids: &[EntityId]) -> Result<Tensor> {
        let idx: Vec<u32> = ids.iter().map(|e| e.0).collect();
        Ok(self.table.index_select(&Tensor::new(idx.as_slice(), self.table.device())?, 0)?)
    }

    pub fn row(&self, id: EntityId) -> Result<Tensor> {
        Ok(self.table.get(id.index())?)
    }

    pub fn detach(&self) -> EntityEmbeddings {
        EntityEmbeddings {
            table: self.table.detach(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RgcnLayer {
    pub self_loop: Tensor,
    pub relation: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct GraphEncoder {
    pub base: Tensor,
    pub layers: Vec<RgcnLayer>,
}

impl GraphEncoder {
    pub fn new(b: &mut Builder, cfg: &Config, num_entities: usize, num_relations: usize) -> Result<Self> {
        let d = cfg.ent_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let base = b.var("base", &[num_entities, d], Init::Uniform(bound))?;
        let layers = (0..cfg.rgcn_layers)
            .map(|l| {
                let mut lb = b.pp(&format!("layer{l}"));
                Ok(RgcnLayer {
                    self_loop: lb.var("self_loop", &[d, d], Init::Uniform(bound))?,
                    relation: (0..num_relations)
                        .map(|r| lb.var(&format!("rel{r}"), &[d, d], Init::Uniform(bound)))
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphEncoder { base, layers })
    }

    pub fn encode_entities(&self, index: &GraphIndex) -> Result<EntityEmbeddings> {
        let (n, _) = self.base.dims2()?;
        if n != index.num_entities {
            return Err(Error::Dimension(format!(
                "graph index has {} entities, encoder has {n}",
                index.num_entities
            )));
        }
        let mut h = self.base.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = h.matmul(&layer.self_loop)?;
            for (edges, w) in index.relations.iter().zip(&layer.relation) {
                if edges.src.is_empty() {
                    continue;
                }
                let msgs = h.matmul(w)?.index_select(&edges.src_t, 0)?.broadcast_mul(&edges.norm_t)?;
                out = out.index_add(&edges.dst_t, &msgs, 0)?;
            }
            h = if l + 1 < self.layers.len() { out.relu()? } else { out };
        }
        Ok(EntityEmbeddings { table: h })
    }
}

/// Self-attentive pooling parameters: `a = softmax(b^T tanh(W_a N))`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// `d_att x d_ent`.
    pub w_a: Tensor,
    /// `d_att`.
    pub b: Tensor,
}

impl AttentionParams {
    pub fn new(builder: &mut Builder, cfg: &Config) -> Result<Self> {
        let bound = 1.0 / (cfg.ent_dim as f64).sqrt();
        Ok(AttentionParams {
            w_a: builder.var("w_a", &[cfg.d_att(), cfg.ent_dim], Init::Uniform(bound))?,
            b: builder.var("b", &[cfg.d_att()], Init::Uniform(1.0 / (cfg.d_att() as f64).sqrt()))?,
        })
    }

    /// Returns the pooled user vector `u` and the attention weights `a`.
    /// The mention list must be non-empty.
    pub fn user_self_attention(&self, mentioned: &[EntityId], emb: &EntityEmbeddings) -> Result<(Tensor, Tensor)> {
        if mentioned.is_empty() {
            return Err(Error::Dimension("self-attention over an empty mention list".into()));
        }
        let n = emb.rows(mentioned)?;
        let hidden = n.matmul(&self.w_a.t()?)?.tanh()?;
        let logits = hidden.matmul(&self.b.unsqueeze(1)?)?.squeeze(1)?;
        let a = softmax_last(&logits)?;
        let u = a.unsqueeze(0)?.matmul(&n)?.squeeze(0)?;
        Ok((u, a))
    }

    /// Zero vector for turns without mentions, which makes item scores uniform.
    pub fn user_vector(&self, mentioned: &[EntityId], emb: &EntityEmbeddings) -> Result<Tensor> {
        if mentioned.is_empty() {
            let (_, d) = emb.table.dims2()?;
            return Ok(Tensor::zeros(d, emb.table.dtype(), emb.table.device())?);
        }
        Ok(self.user_self_attention(mentioned, emb)?.0)
    }
}

/// `softmax_i(u . e_i)` over the listed item entities.
pub fn pre_rec_distribution(u: &Tensor, emb: &EntityEmbeddings, items: &[EntityId]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::Dimension("no items to score".into()));
    }
    let logits = emb.rows(items)?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?;
    softmax_last(&logits)
}

/// Mean over targets of `-log dist[target]`; `targets` are positions in the item list.
pub fn pre_rec_loss(dist: &Tensor, targets: &[usize], eps: f64) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::Dimension("pre-recommendation loss needs at least one target".into()));
    }
    let idx: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
    let picked = dist.index_select(&Tensor::new(idx.as_slice(), dist.device())?, 0)?;
    Ok(clamped_log(&picked, eps)?.mean_all()?.neg()?)
}
