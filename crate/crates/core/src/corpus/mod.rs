//! Corpus ingestion: the knowledge graph, linked dialogues, turn-level
//! examples, co-occurrence statistics and the word vocabulary.

pub mod dialogue;
pub mod examples;
pub mod kg;
pub mod vocab;

pub use dialogue::{load_dialogues, Dialogue, DialogueSet, EntityLinker, Speaker, Split, Utterance};
pub use examples::{build_examples, count_cooccurrence, CooccurrenceStats, TurnExample};
pub use kg::{load_kg, load_kg_auto, Entity, EntityId, KgFormat, KnowledgeGraph, RelationId, Triple};
pub use vocab::Vocabulary;

/// Lowercases and splits on whitespace; punctuation characters become their
/// own tokens, apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
