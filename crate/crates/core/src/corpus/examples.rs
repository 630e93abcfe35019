use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dialogue::{Dialogue, Speaker, Utterance};
use super::kg::{EntityId, KnowledgeGraph};

/// One recommender turn: the preceding context, the items it mentions and its text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnExample {
    pub dialogue_id: String,
    /// 1-based turn index `t`; the context holds `t - 1` utterances.
    pub turn_index: usize,
    pub context: Vec<Utterance>,
    pub target_items: Vec<EntityId>,
    pub gold_response: Utterance,
}

impl TurnExample {
    /// Context-mentioned entities in first-mention order; the head entities.
    pub fn context_entities(&self) -> Vec<EntityId> {
        let mut out = Vec::new();
        for u in &self.context {
            for &e in &u.entities {
                if !out.contains(&e) {
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn has_targets(&self) -> bool {
        !self.target_items.is_empty()
    }

    pub fn id(&self) -> String {
        format!("{}#{}", self.dialogue_id, self.turn_index)
    }
}

/// One example per recommender utterance at position `t >= 2`. Targets are
/// the items the response mentions; turns without items are kept.
pub fn build_examples(dialogues: &[Dialogue], kg: &KnowledgeGraph) -> Vec<TurnExample> {
    let mut out = Vec::new();
    for d in dialogues {
        for (i, utt) in d.utterances.iter().enumerate().skip(1) {
            if utt.speaker != Speaker::Recommender {
                continue;
            }
            let mut targets = Vec::new();
            for &e in &utt.entities {
                if kg.is_item(e) && !targets.contains(&e) {
                    targets.push(e);
                }
            }
            out.push(TurnExample {
                dialogue_id: d.id.clone(),
                turn_index: i + 1,
                context: d.utterances[..i].to_vec(),
                target_items: targets,
                gold_response: utt.clone(),
            });
        }
    }
    out
}

/// Empirical occurrence statistics, one counting unit per turn example.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub unit_count: u64,
    pub entity_count: Vec<u64>,
    /// Ordered pairs `(e, e_h)` with `e != e_h`; absent keys are zero.
    pub pair_count: BTreeMap<(EntityId, EntityId), u64>,
}

impl CooccurrenceStats {
    pub fn count(&self, e: EntityId) -> u64 {
        self.entity_count.get(e.index()).copied().unwrap_or(0)
    }

    pub fn pair(&self, e: EntityId, head: EntityId) -> u64 {
        self.pair_count.get(&(e, head)).copied().unwrap_or(0)
    }
}

pub fn count_cooccurrence(examples: &[TurnExample], num_entities: usize) -> CooccurrenceStats {
    let mut stats = CooccurrenceStats {
        unit_count: 0,
        entity_count: vec![0; num_entities],
        pair_count: BTreeMap::new(),
    };
    for ex in examples {
        stats.unit_count += 1;
        let mut present: Vec<EntityId> = ex
            .context
            .iter()
            .chain(std::iter::once(&ex.gold_response))
            .flat_map(|u| u.entities.iter().copied())
            .collect();
        present.sort_unstable();
        present.dedup();
        for &e in &present {
            stats.entity_count[e.index()] += 1;
        }
        for &a in &present {
            for &b in &present {
                if a != b {
                    *stats.pair_count.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
    }
    stats
}
