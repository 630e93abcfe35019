//! The full model: shared context encoder, graph encoder, pre-recommendation
//! attention, prior and posterior refactor networks and the decoder, plus the
//! corpus-derived resources they read.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, EncoderKind, EvalWeights};
use crate::context_encoder::ContextEncoder;
use crate::corpus::{
    build_examples, count_cooccurrence, tokenize, Dialogue, EntityId, KnowledgeGraph, TurnExample, Utterance,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::generator::{DecodeInputs, Decoder, GenerateOptions, KnowledgeMatrices};
use crate::graph_encoder::{pre_rec_distribution, pre_rec_loss, AttentionParams, EntityEmbeddings, GraphEncoder, GraphIndex};
use crate::nn::{seeded_rng, Builder, ParamStore, DTYPE};
use crate::recommender::{rank_items, rec_loss, target_nll, ScoringContext};
use crate::refactor::{
    argmax_weights, gumbel_noise, gumbel_weights, kl_term, original_labels, reg_loss, to_distributions, RefactorNet,
    RelationDistribution,
};
use crate::subgraph_select::{support, CandidatePairs, MiIndex};

/// Parameter-name prefixes of each component.
pub const ENCODER: &str = "encoder.";
pub const GRAPH: &str = "graph.";
pub const ATTENTION: &str = "attention.";
pub const PRIOR: &str = "prior.";
pub const POSTERIOR: &str = "posterior.";
pub const DECODER: &str = "decoder.";

/// Read-only data every stage and the service share.
#[derive(Debug, Clone)]
pub struct Resources {
    pub kg: KnowledgeGraph,
    pub index: GraphIndex,
    pub mi: MiIndex,
    pub vocab: Vocabulary,
}

impl Resources {
    pub fn new(kg: KnowledgeGraph, mi: MiIndex, vocab: Vocabulary) -> Result<Self> {
        Ok(Resources {
            index: GraphIndex::new(&kg)?,
            kg,
            mi,
            vocab,
        })
    }

    /// Vocabulary and MI statistics from training dialogues.
    pub fn from_training(kg: KnowledgeGraph, train: &[Dialogue], vocab_size: usize) -> Result<Self> {
        let examples = build_examples(train, &kg);
        let mi = MiIndex::new(&count_cooccurrence(&examples, kg.num_entities()));
        let name_tokens: Vec<String> = kg.entities().iter().flat_map(|e| tokenize(&e.name)).collect();
        let vocab = Vocabulary::build(
            train
                .iter()
                .flat_map(|d| d.utterances.iter().flat_map(|u| u.tokens.iter()))
                .chain(name_tokens.iter())
                .map(String::as_str),
            vocab_size,
        );
        Self::new(kg, mi, vocab)
    }
}

/// SHA-256 over entity keys, item flags, relations and triples.
pub fn kg_fingerprint(kg: &KnowledgeGraph) -> String {
    let mut h = Sha256::new();
    for e in kg.entities() {
        h.update(e.key.as_bytes());
        h.update([0, e.is_item as u8]);
    }
    for r in kg.relations() {
        h.update(r.as_bytes());
        h.update([0]);
    }
    for t in kg.triples() {
        for x in [t.head.0, t.relation.0, t.tail.0] {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Parameter-independent preparation of one turn.
#[derive(Debug, Clone)]
pub struct TurnPlan {
    pub example: TurnExample,
    pub heads: Vec<EntityId>,
    pub support: CandidatePairs,
    pub labels: Vec<bool>,
    pub prior_ids: Vec<u32>,
    pub prior_segs: Vec<u32>,
    pub posterior_ids: Vec<u32>,
    pub posterior_segs: Vec<u32>,
    /// Positions of the target items in the KG item list.
    pub targets: Vec<usize>,
    pub response_ids: Vec<u32>,
}

impl TurnPlan {
    /// Recommendation stages need both mentions and targets.
    pub fn trains_recommender(&self) -> bool {
        !self.heads.is_empty() && !self.targets.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RecOutputs {
    pub loss: Tensor,
    pub nll: f64,
    pub kl: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairInference {
    pub head: EntityId,
    pub tail: EntityId,
    pub p_connect: f64,
    pub connected: bool,
}

/// Prior-network reasoning for one context.
#[derive(Debug, Clone)]
pub struct Inference {
    pub heads: Vec<EntityId>,
    pub pairs: Vec<PairInference>,
    /// Scores aligned with the KG item list.
    pub scores: Vec<f64>,
}

impl Inference {
    pub fn ranking(&self, kg: &KnowledgeGraph, m: usize) -> Vec<(EntityId, f64)> {
        rank_items(&self.scores, kg.items(), m)
    }

    /// Distinct tails connected under argmax sampling, in pair order.
    pub fn filtered_tails(&self) -> Vec<EntityId> {
        let mut out = Vec::new();
        for p in &self.pairs {
            if p.connected && !out.contains(&p.tail) {
                out.push(p.tail);
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub encoder: ContextEncoder,
    pub graph: GraphEncoder,
    pub attention: AttentionParams,
    pub prior: RefactorNet,
    pub posterior: RefactorNet,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: &Config, vocab_len: usize, num_entities: usize, num_relations: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.seed, "init", 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = ContextEncoder::new(&mut b.pp("encoder"), config, vocab_len)?;
        let graph = GraphEncoder::new(&mut b.pp("graph"), config, num_entities, num_relations)?;
        let attention = AttentionParams::new(&mut b.pp("attention"), config)?;
        let prior = RefactorNet::new(&mut b.pp("prior"), config)?;
        let posterior = RefactorNet::new(&mut b.pp("posterior"), config)?;
        let decoder = Decoder::new(&mut b.pp("decoder"), config, vocab_len)?;
        Ok(Model {
            config: config.clone(),
            store,
            encoder,
            graph,
            attention,
            prior,
            posterior,
            decoder,
        })
    }

    pub fn for_resources(config: &Config, res: &Resources) -> Result<Self> {
        Self::new(config, res.vocab.len(), res.kg.num_entities(), res.kg.num_relations())
    }

    /// Overwrites the context encoder from `encoder_path` when the config asks
    /// for a pretrained encoder. The file holds `encoder.*` tensors.
    pub fn warm_start_encoder(&self) -> Result<()> {
        if self.config.encoder != EncoderKind::Pretrained {
            return Ok(());
        }
        let path = self
            .config
            .encoder_path
            .as_deref()
            .ok_or_else(|| Error::Config("pretrained encoder without encoder_path".into()))?;
        let loaded = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.store.assign(&loaded, ENCODER)
    }

    pub fn entity_embeddings(&self, res: &Resources) -> Result<EntityEmbeddings> {
        self.graph.encode_entities(&res.index)
    }

    pub fn plan(&self, res: &Resources, example: &TurnExample) -> Result<TurnPlan> {
        let heads = example.context_entities();
        let support = support(&heads, &res.mi, &res.kg, self.config.k_tail);
        let labels = original_labels(&res.kg, &support.pairs);
        let (prior_ids, prior_segs) = self.encoder.prior_input(&res.vocab, &example.context);
        let (posterior_ids, posterior_segs) =
            self.encoder
                .posterior_input(&res.vocab, &res.kg, &example.context, &example.target_items)?;
        let targets = example
            .target_items
            .iter()
            .map(|&t| res.kg.item_position(t).ok_or(Error::UnknownEntity(t.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TurnPlan {
            example: example.clone(),
            heads,
            support,
            labels,
            prior_ids,
            prior_segs,
            posterior_ids,
            posterior_segs,
            targets,
            response_ids: res.vocab.encode(&example.gold_response.tokens),
        })
    }

    pub fn plans(&self, res: &Resources, examples: &[TurnExample]) -> Result<Vec<TurnPlan>> {
        examples.iter().map(|e| self.plan(res, e)).collect()
    }

    /// Pooled encoding of the dialogue history.
    pub fn prior_context(&self, plan: &TurnPlan) -> Result<Tensor> {
        Ok(self.encoder.encode_ids(&plan.prior_ids, &plan.prior_segs)?.get(0)?)
    }

    /// Pooled encoding of the history plus the target item's name.
    pub fn posterior_context(&self, plan: &TurnPlan) -> Result<Tensor> {
        Ok(self.encoder.encode_ids(&plan.posterior_ids, &plan.posterior_segs)?.get(0)?)
    }

    /// Prior and posterior `P x 2` distributions for a plan.
    pub fn relation_distributions(&self, plan: &TurnPlan, emb: &EntityEmbeddings) -> Result<(Tensor, Tensor)> {
        let pairs = &plan.support.pairs;
        let p = self.prior.pair_distributions(emb, pairs, &self.prior_context(plan)?)?;
        let q = self.posterior.pair_distributions(emb, pairs, &self.posterior_context(plan)?)?;
        Ok((p, q))
    }

    /// Pretraining objective `L_pre + L_reg` and its two parts.
    pub fn pretrain_loss(&self, res: &Resources, plan: &TurnPlan, emb: &EntityEmbeddings) -> Result<(Tensor, f64, f64)> {
        let (u, _) = self.attention.user_self_attention(&plan.heads, emb)?;
        let dist = pre_rec_distribution(&u, emb, res.kg.items())?;
        let pre = pre_rec_loss(&dist, &plan.targets, self.config.clamp_eps)?;
        let (p, q) = self.relation_distributions(plan, emb)?;
        let reg = reg_loss(&p, &q, &plan.labels, self.config.clamp_eps)?;
        let (pre_v, reg_v) = (pre.to_scalar::<f64>()?, reg.to_scalar::<f64>()?);
        Ok(((pre + reg)?, pre_v, reg_v))
    }

    /// Recommendation objective with one Gumbel sample from the posterior.
    pub fn rec_loss(&self, res: &Resources, plan: &TurnPlan, emb: &EntityEmbeddings, rng: &mut ChaCha8Rng) -> Result<RecOutputs> {
        let cfg = &self.config;
        let (p, q) = self.relation_distributions(plan, emb)?;
        let kl = kl_term(&q, &p, cfg.clamp_eps)?;
        let reg = reg_loss(&p, &q, &plan.labels, cfg.clamp_eps)?;
        let noise = gumbel_noise(plan.support.len(), rng)?;
        let w = gumbel_weights(&q, &noise, cfg.tau, cfg.straight_through, cfg.clamp_eps)?;
        let scoring = ScoringContext::new(emb, &res.kg, &plan.support.pairs)?;
        let scores = scoring.scores(&w, cfg.alpha)?;
        let nll = target_nll(&scores, &plan.targets, cfg.clamp_eps)?.to_scalar::<f64>()?;
        let (kl_v, reg_v) = (kl.to_scalar::<f64>()?, reg.to_scalar::<f64>()?);
        Ok(RecOutputs {
            loss: rec_loss(&scores, &plan.targets, &kl, &reg, cfg)?,
            nll,
            kl: kl_v,
            reg: reg_v,
        })
    }

    /// Prior reasoning over explicit heads and prior encoder input.
    fn infer_inner(
        &self,
        res: &Resources,
        emb: &EntityEmbeddings,
        heads: &[EntityId],
        ids: &[u32],
        segs: &[u32],
    ) -> Result<Inference> {
        let pairs = support(heads, &res.mi, &res.kg, self.config.k_tail).pairs;
        let ctx = self.encoder.encode_ids(ids, segs)?.get(0)?;
        let dists = to_distributions(&self.prior.pair_distributions(emb, &pairs, &ctx)?)?;
        let bits = argmax_weights(&dists);
        let weights = match self.config.eval_weights {
            EvalWeights::Argmax => bits.clone(),
            EvalWeights::Prob => dists.iter().map(|d| d.p_connect).collect(),
        };
        let scoring = ScoringContext::new(emb, &res.kg, &pairs)?;
        let w = Tensor::from_vec(weights, pairs.len(), &Device::Cpu)?;
        let scores = scoring.scores(&w, self.config.alpha)?.to_vec1::<f64>()?;
        Ok(Inference {
            heads: heads.to_vec(),
            pairs: pairs
                .iter()
                .zip(dists.iter().zip(&bits))
                .map(|(&(head, tail), (d, &b))| PairInference {
                    head,
                    tail,
                    p_connect: d.p_connect,
                    connected: b == 1.0,
                })
                .collect(),
            scores,
        })
    }

    pub fn infer_plan(&self, res: &Resources, plan: &TurnPlan, emb: &EntityEmbeddings) -> Result<Inference> {
        self.infer_inner(res, emb, &plan.heads, &plan.prior_ids, &plan.prior_segs)
    }

    /// Prior reasoning over a raw context; used by the service.
    pub fn infer(&self, res: &Resources, emb: &EntityEmbeddings, context: &[Utterance]) -> Result<Inference> {
        let example = TurnExample {
            dialogue_id: String::new(),
            turn_index: context.len() + 1,
            context: context.to_vec(),
            target_items: vec![],
            gold_response: Utterance {
                speaker: crate::corpus::Speaker::Recommender,
                tokens: vec![],
                entities: vec![],
            },
        };
        let heads = example.context_entities();
        let (ids, segs) = self.encoder.prior_input(&res.vocab, context);
        self.infer_inner(res, emb, &heads, &ids, &segs)
    }

    /// Detached decoder inputs: encoded context, head rows and the tails the
    /// prior connects.
    pub fn decode_inputs(
        &self,
        res: &Resources,
        emb: &EntityEmbeddings,
        inference: &Inference,
        prior_ids: &[u32],
        prior_segs: &[u32],
    ) -> Result<DecodeInputs> {
        let d = self.config.ent_dim;
        let tails = inference.filtered_tails();
        let rows = |ids: &[EntityId]| -> Result<Tensor> {
            if ids.is_empty() {
                Ok(Tensor::zeros((0, d), DTYPE, &Device::Cpu)?)
            } else {
                Ok(emb.rows(ids)?.detach())
            }
        };
        let tail_name_ids = tails
            .iter()
            .flat_map(|&t| res.vocab.encode(&tokenize(res.kg.name(t))))
            .collect();
        let knowledge = if inference.heads.is_empty() && tails.is_empty() {
            KnowledgeMatrices::empty(d)?
        } else {
            KnowledgeMatrices {
                heads: rows(&inference.heads)?,
                tails: rows(&tails)?,
                head_ids: inference.heads.clone(),
                tail_ids: tails,
            }
        };
        Ok(DecodeInputs {
            knowledge,
            context: self.encoder.encode_ids(prior_ids, prior_segs)?.detach(),
            context_ids: prior_ids.to_vec(),
            tail_name_ids,
        })
    }

    pub fn plan_decode_inputs(&self, res: &Resources, plan: &TurnPlan, emb: &EntityEmbeddings) -> Result<DecodeInputs> {
        let inference = self.infer_plan(res, plan, emb)?;
        self.decode_inputs(res, emb, &inference, &plan.prior_ids, &plan.prior_segs)
    }

    pub fn generate(&self, inputs: &DecodeInputs, opts: &GenerateOptions) -> Result<Vec<u32>> {
        self.decoder.generate(inputs, opts)
    }

    /// Generation loss on a gold response; `END` is one of the predicted tokens.
    pub fn gen_loss(&self, plan: &TurnPlan, inputs: &DecodeInputs) -> Result<Tensor> {
        self.decoder.loss(&plan.response_ids, inputs, self.config.clamp_eps)
    }

    /// Prior and posterior relation distributions as plain values.
    pub fn distributions(&self, plan: &TurnPlan, emb: &EntityEmbeddings) -> Result<(Vec<RelationDistribution>, Vec<RelationDistribution>)> {
        let (p, q) = self.relation_distributions(plan, emb)?;
        Ok((to_distributions(&p)?, to_distributions(&q)?))
    }
}
