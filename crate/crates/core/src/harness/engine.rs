//! Read-only inference over a trained checkpoint: link mentions, infer the
//! dialogue subgraph, rank items and generate a reply.

use std::path::Path;

use crate::config::Config;
use crate::corpus::vocab::{END, RESERVED};
use crate::corpus::{load_kg_auto, tokenize, EntityId, EntityLinker, Speaker, Utterance};
use crate::error::{Error, Result};
use crate::generator::GenerateOptions;
use crate::graph_encoder::EntityEmbeddings;
use crate::harness::pipeline::Workspace;
use crate::harness::session::{Exchange, MessageResponse, Recommendation, SessionUtterance, SubgraphEdge};
use crate::model::{Model, Resources};

pub const DEFAULT_RECOMMENDATIONS: usize = 10;

pub struct Engine {
    model: Model,
    res: Resources,
    emb: EntityEmbeddings,
    linker: EntityLinker,
    pub options: GenerateOptions,
    pub recommendations: usize,
}

impl Engine {
    pub fn new(ws: Workspace) -> Result<Self> {
        let emb = ws.model.entity_embeddings(&ws.res)?.detach();
        Ok(Engine {
            linker: EntityLinker::new(&ws.res.kg),
            options: GenerateOptions::from_config(&ws.model.config),
            recommendations: DEFAULT_RECOMMENDATIONS,
            model: ws.model,
            res: ws.res,
            emb,
        })
    }

    /// Loads a checkpoint directory against the graph at `kg`.
    pub fn open(checkpoint: &Path, kg: &Path, config: Option<&Config>) -> Result<Self> {
        let kg = load_kg_auto(kg)?;
        Self::new(Workspace::load(checkpoint, config, kg)?)
    }

    pub fn resources(&self) -> &Resources {
        &self.res
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn utterance(&self, speaker: Speaker, text: String, tokens: Vec<String>) -> SessionUtterance {
        let entities = self.linker.link(&tokens).into_iter().map(|e| e.0).collect();
        SessionUtterance {
            speaker,
            text,
            tokens,
            entities,
        }
    }

    /// Answers `text` given the prior conversation.
    pub fn respond(&self, history: &[Utterance], text: &str) -> Result<Exchange> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::InvalidMessage("text has no tokens".into()));
        }
        let user = self.utterance(Speaker::User, text.trim().to_string(), tokens);
        let mut context = history.to_vec();
        context.push(user.to_utterance());

        let inference = self.model.infer(&self.res, &self.emb, &context)?;
        let mentioned: Vec<EntityId> = context.iter().flat_map(|u| u.entities.iter().copied()).collect();
        let kg = &self.res.kg;
        let recommendations = inference
            .ranking(kg, kg.items().len())
            .into_iter()
            .filter(|(id, _)| !mentioned.contains(id))
            .take(self.recommendations)
            .map(|(id, score)| Recommendation {
                item_id: id.0,
                name: kg.name(id).to_string(),
                score,
            })
            .collect();
        let subgraph = inference
            .pairs
            .iter()
            .map(|p| SubgraphEdge {
                head: p.head.0,
                tail: p.tail.0,
                p_connect: p.p_connect,
                connected: p.connected,
            })
            .collect();

        let (ids, segs) = self.model.encoder.prior_input(&self.res.vocab, &context);
        let inputs = self.model.decode_inputs(&self.res, &self.emb, &inference, &ids, &segs)?;
        let generated = self.model.generate(&inputs, &self.options)?;
        let words: Vec<String> = generated
            .iter()
            .filter(|&&id| id != END && (id as usize) >= RESERVED.len())
            .map(|&id| self.res.vocab.token(id).to_string())
            .collect();
        let response_text = words.join(" ");
        let reply = self.utterance(Speaker::Recommender, response_text.clone(), words);

        Ok(Exchange {
            user,
            reply,
            response: MessageResponse {
                response_text,
                recommendations,
                subgraph,
            },
        })
    }
}
