use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kg::{EntityId, KnowledgeGraph};
use super::{normalize_name, tokenize};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Recommender,
}

impl Speaker {
    pub fn parse(label: &str) -> Option<Self> {
        match label.trim().to_ascii_lowercase().as_str() {
            "user" | "seeker" => Some(Speaker::User),
            "recommender" | "rec" => Some(Speaker::Recommender),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train|valid|test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    pub entities: Vec<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

/// Maps token n-grams of normalized entity names to entity ids; links by
/// greedy longest match, left to right.
#[derive(Debug, Clone)]
pub struct EntityLinker {
    phrases: HashMap<Vec<String>, EntityId>,
    max_len: usize,
}

impl EntityLinker {
    pub fn new(kg: &KnowledgeGraph) -> Self {
        let mut phrases = HashMap::new();
        let mut max_len = 0;
        for (i, e) in kg.entities().iter().enumerate() {
            let toks = tokenize(&e.name);
            if toks.is_empty() {
                continue;
            }
            max_len = max_len.max(toks.len());
            phrases.entry(toks).or_insert(EntityId(i as u32));
        }
        EntityLinker { phrases, max_len }
    }

    pub fn link(&self, tokens: &[String]) -> Vec<EntityId> {
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=self.max_len.min(tokens.len() - i))
                .rev()
                .find_map(|n| self.phrases.get(&tokens[i..i + n]).map(|&id| (n, id)));
            match longest {
                Some((n, id)) => {
                    if !found.contains(&id) {
                        found.push(id);
                    }
                    i += n;
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Dialogues plus any non-fatal linking warnings.
#[derive(Debug, Clone, Default)]
pub struct DialogueSet {
    pub dialogues: Vec<Dialogue>,
    pub warnings: Vec<String>,
}

impl DialogueSet {
    pub fn split(&self, split: Split) -> Vec<Dialogue> {
        self.dialogues.iter().filter(|d| d.split == split).cloned().collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRecord {
    pub speaker: String,
    pub text: String,
    /// Explicit mention annotations, as entity keys or surface names.
    #[serde(default)]
    pub entities: Vec<String>,
}

/// Resolves one raw record. Text mentions are found by exact normalized match;
/// explicit annotations are appended when not already linked.
pub fn resolve_record(
    record: &DialogueRecord,
    kg: &KnowledgeGraph,
    linker: &EntityLinker,
    warnings: &mut Vec<String>,
) -> Result<Dialogue> {
    if record.turns.is_empty() {
        return Err(Error::EmptyDialogue(record.dialogue_id.clone()));
    }
    let mut utterances = Vec::with_capacity(record.turns.len());
    for (t, turn) in record.turns.iter().enumerate() {
        let speaker = Speaker::parse(&turn.speaker).ok_or_else(|| Error::UnknownSpeaker {
            dialogue: record.dialogue_id.clone(),
            label: turn.speaker.clone(),
        })?;
        let tokens = tokenize(&turn.text);
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance {
                dialogue: record.dialogue_id.clone(),
                turn: t,
            });
        }
        let mut entities = linker.link(&tokens);
        for mention in &turn.entities {
            match kg.by_key(mention).or_else(|| kg.by_name(mention)) {
                Some(id) => {
                    if !entities.contains(&id) {
                        entities.push(id);
                    }
                }
                None => {
                    let msg = format!(
                        "dialogue `{}` turn {t}: mention `{}` not found in the knowledge graph",
                        record.dialogue_id,
                        normalize_name(mention)
                    );
                    tracing::warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        utterances.push(Utterance {
            speaker,
            tokens,
            entities,
        });
    }
    Ok(Dialogue {
        id: record.dialogue_id.clone(),
        split: record.split.unwrap_or(Split::Train),
        utterances,
    })
}

/// Loads line-delimited JSON dialogues and links their mentions against `kg`.
pub fn load_dialogues(path: &Path, kg: &KnowledgeGraph) -> Result<DialogueSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let linker = EntityLinker::new(kg);
    let mut set = DialogueSet::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let d = resolve_record(&record, kg, &linker, &mut set.warnings)?;
        set.dialogues.push(d);
    }
    Ok(set)
}

pub fn write_dialogues(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
