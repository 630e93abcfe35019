//! Support of the latent subgraph: head entities from the context, tail
//! candidates from a global mutual-information pool plus KG neighbors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CooccurrenceStats, EntityId, KnowledgeGraph};
use crate::error::{Error, Result};

/// `P_c(e) = sum_{e_h} P(e|e_h) P(e_h) log(P(e|e_h) / P(e))` from raw counts.
/// Zero co-occurrence terms contribute nothing; the `e_h = e` term is not part of the sum.
pub fn mi_scores(stats: &CooccurrenceStats) -> Vec<f64> {
    let n = stats.entity_count.len();
    let mut scores = vec![0.0; n];
    if stats.unit_count == 0 {
        return scores;
    }
    let units = stats.unit_count as f64;
    for (&(e, head), &joint) in &stats.pair_count {
        if joint == 0 {
            continue;
        }
        let c_e = stats.count(e) as f64;
        let c_h = stats.count(head) as f64;
        let p_e_given_h = joint as f64 / c_h;
        let p_h = c_h / units;
        let p_e = c_e / units;
        scores[e.index()] += p_e_given_h * p_h * (p_e_given_h / p_e).ln();
    }
    scores
}

/// MI scores with their global ranking; computed once, read-only afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct MiIndex {
    scores: Vec<f64>,
    /// Entities that occur at least once, by score descending then id ascending.
    ranking: Vec<EntityId>,
}

impl MiIndex {
    pub fn new(stats: &CooccurrenceStats) -> Self {
        let scores = mi_scores(stats);
        let occurring: Vec<bool> = stats.entity_count.iter().map(|&c| c > 0).collect();
        Self::from_scores(scores, &occurring)
    }

    fn from_scores(scores: Vec<f64>, occurring: &[bool]) -> Self {
        let mut ranking: Vec<EntityId> = (0..scores.len())
            .filter(|&i| occurring[i])
            .map(|i| EntityId(i as u32))
            .collect();
        ranking.sort_by(|a, b| scores[b.index()].total_cmp(&scores[a.index()]).then(a.cmp(b)));
        MiIndex { scores, ranking }
    }

    pub fn score(&self, e: EntityId) -> f64 {
        self.scores.get(e.index()).copied().unwrap_or(0.0)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn ranking(&self) -> &[EntityId] {
        &self.ranking
    }

    pub fn top_k(&self, k: usize) -> &[EntityId] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    /// Cache format: `id<TAB>score` per ranked entity, in rank order.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = format!("# entities\t{}\n", self.scores.len());
        for e in &self.ranking {
            let _ = writeln!(out, "{}\t{:e}", e.0, self.scores[e.index()]);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let n: usize = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("# entities\t"))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| parse_err(1, "missing `# entities` header".into()))?;
        let mut scores = vec![0.0; n];
        let mut occurring = vec![false; n];
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (id, score) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(i + 1, "expected `id<TAB>score`".into()))?;
            let id: usize = id.parse().map_err(|_| parse_err(i + 1, format!("bad id `{id}`")))?;
            let score: f64 = score.parse().map_err(|_| parse_err(i + 1, format!("bad score `{score}`")))?;
            if id >= n {
                return Err(parse_err(i + 1, format!("id {id} out of range")));
            }
            scores[id] = score;
            occurring[id] = true;
        }
        Ok(Self::from_scores(scores, &occurring))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MiTopk,
    KgNeighbor,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailEntity {
    pub id: EntityId,
    pub provenance: Provenance,
}

/// Top-k MI entities in rank order, then KG neighbors of the heads not
/// already listed (head order, neighbor id order).
pub fn select_tail_entities(heads: &[EntityId], mi: &MiIndex, kg: &KnowledgeGraph, k: usize) -> Vec<TailEntity> {
    let mut tails: Vec<TailEntity> = mi
        .top_k(k)
        .iter()
        .map(|&id| TailEntity {
            id,
            provenance: Provenance::MiTopk,
        })
        .collect();
    for &h in heads {
        for &n in kg.neighbors(h) {
            match tails.iter_mut().find(|t| t.id == n) {
                Some(t) => {
                    if t.provenance == Provenance::MiTopk {
                        t.provenance = Provenance::Both;
                    }
                }
                None => tails.push(TailEntity {
                    id: n,
                    provenance: Provenance::KgNeighbor,
                }),
            }
        }
    }
    tails
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePairs {
    pub heads: Vec<EntityId>,
    pub tails: Vec<TailEntity>,
    /// Head-major, tail-minor; no self-pairs.
    pub pairs: Vec<(EntityId, EntityId)>,
}

impl CandidatePairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn tail_ids(&self) -> Vec<EntityId> {
        self.tails.iter().map(|t| t.id).collect()
    }

    /// Index of `(head, tail)` in [`Self::pairs`].
    pub fn position(&self, head: EntityId, tail: EntityId) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (head, tail))
    }
}

pub fn candidate_pairs(heads: &[EntityId], tails: &[TailEntity]) -> CandidatePairs {
    let mut pairs = Vec::new();
    if !heads.is_empty() {
        for &h in heads {
            for t in tails {
                if t.id != h && !pairs.contains(&(h, t.id)) {
                    pairs.push((h, t.id));
                }
            }
        }
    }
    CandidatePairs {
        heads: heads.to_vec(),
        tails: tails.to_vec(),
        pairs,
    }
}

/// Heads, tails and pairs for one context in a single call.
pub fn support(heads: &[EntityId], mi: &MiIndex, kg: &KnowledgeGraph, k: usize) -> CandidatePairs {
    candidate_pairs(heads, &select_tail_entities(heads, mi, kg, k))
}
