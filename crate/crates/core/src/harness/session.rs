//! Chat sessions and their append-only JSONL log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityId, Speaker, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item_id: u32,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphEdge {
    pub head: u32,
    pub tail: u32,
    pub p_connect: f64,
    pub connected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub response_text: String,
    pub recommendations: Vec<Recommendation>,
    pub subgraph: Vec<SubgraphEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionUtterance {
    pub speaker: Speaker,
    pub text: String,
    pub tokens: Vec<String>,
    pub entities: Vec<u32>,
}

impl SessionUtterance {
    pub fn to_utterance(&self) -> Utterance {
        Utterance {
            speaker: self.speaker,
            tokens: self.tokens.clone(),
            entities: self.entities.iter().map(|&e| EntityId(e)).collect(),
        }
    }
}

/// One user message with the system's reply and reasoning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub user: SessionUtterance,
    pub reply: SessionUtterance,
    pub response: MessageResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub history: Vec<SessionUtterance>,
    /// Linked entities in first-mention order.
    pub entity_history: Vec<u32>,
    pub last_subgraph: Vec<SubgraphEdge>,
    pub last_recommendations: Vec<Recommendation>,
}

impl Session {
    pub fn new(session_id: String) -> Self {
        Session {
            session_id,
            history: vec![],
            entity_history: vec![],
            last_subgraph: vec![],
            last_recommendations: vec![],
        }
    }

    pub fn context(&self) -> Vec<Utterance> {
        self.history.iter().map(SessionUtterance::to_utterance).collect()
    }

    pub fn apply(&mut self, exchange: &Exchange) {
        for u in [&exchange.user, &exchange.reply] {
            for &e in &u.entities {
                if !self.entity_history.contains(&e) {
                    self.entity_history.push(e);
                }
            }
            self.history.push(u.clone());
        }
        self.last_subgraph = exchange.response.subgraph.clone();
        self.last_recommendations = exchange.response.recommendations.clone();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Created { session_id: String },
    Exchange { session_id: String, exchange: Exchange },
}

/// Rebuilds sessions from a log. A missing file is an empty log; a truncated
/// final line is ignored.
pub fn replay(path: &Path) -> Result<HashMap<String, Session>> {
    let mut sessions = HashMap::new();
    if !path.exists() {
        return Ok(sessions);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: LogEvent = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                tracing::warn!(path = %path.display(), "ignoring truncated final log line");
                break;
            }
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        };
        match event {
            LogEvent::Created { session_id } => {
                sessions.insert(session_id.clone(), Session::new(session_id));
            }
            LogEvent::Exchange { session_id, exchange } => {
                let s = sessions.get_mut(&session_id).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("exchange for unknown session `{session_id}`"),
                })?;
                s.apply(&exchange);
            }
        }
    }
    Ok(sessions)
}

/// Appends events, one JSON object per line, flushed per event.
#[derive(Debug)]
pub struct SessionLog {
    path: PathBuf,
    file: File,
}

impl SessionLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(SessionLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, event: &LogEvent) -> Result<()> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
