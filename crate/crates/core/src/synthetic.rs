//! Planted-graph fixture: items with two attributes each, a slice of the item
//! to attribute edges withheld from the observed graph, and templated dialogues
//! where a user names attributes and the recommender answers with the item.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::dialogue::{write_dialogues, DialogueRecord, TurnRecord};
use crate::corpus::{Entity, EntityId, KnowledgeGraph, RelationId, Split, Triple};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

const ITEMS: [&str; 10] = [
    "Wonder Woman",
    "North by Northwest",
    "Marnie",
    "Shallow Grave",
    "The Day of the Jackal",
    "Vertigo",
    "Alien",
    "Heat",
    "Toy Story",
    "Jaws",
];

const GENRES: [&str; 10] = [
    "superhero", "espionage", "melodrama", "black comedy", "political thriller", "mystery", "space horror",
    "heist", "animation", "creature feature",
];

const ACTORS: [&str; 10] = [
    "Gal Gadot",
    "Cary Grant",
    "Tippi Hedren",
    "Ewan McGregor",
    "Edward Fox",
    "James Stewart",
    "Sigourney Weaver",
    "Al Pacino",
    "Tom Hanks",
    "Roy Scheider",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixtureOptions {
    /// At most 10.
    pub items: usize,
    pub withheld_fraction: f64,
    pub dialogues_per_item: usize,
    pub seed: u64,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        FixtureOptions {
            items: 10,
            withheld_fraction: 0.3,
            dialogues_per_item: 2,
            seed: 7,
        }
    }
}

/// A generated corpus with its ground truth.
#[derive(Debug, Clone)]
pub struct Fixture {
    /// Every planted edge.
    pub planted: KnowledgeGraph,
    /// The planted graph minus the withheld edges; what training sees.
    pub observed: KnowledgeGraph,
    /// Withheld `(item, attribute)` edges.
    pub withheld: Vec<(EntityId, EntityId)>,
    pub dialogues: Vec<DialogueRecord>,
}

pub fn planted_fixture(opts: &FixtureOptions) -> Result<Fixture> {
    let n = opts.items;
    if n == 0 || n > ITEMS.len() {
        return Err(Error::Config(format!("fixture supports 1..={} items, got {n}", ITEMS.len())));
    }
    if !(0.0..=1.0).contains(&opts.withheld_fraction) {
        return Err(Error::Config("withheld_fraction must lie in [0, 1]".into()));
    }
    let mut entities = Vec::with_capacity(3 * n);
    for (i, name) in ITEMS[..n].iter().enumerate() {
        entities.push(Entity {
            key: format!("item{i}"),
            name: name.to_string(),
            is_item: true,
        });
    }
    for (i, name) in GENRES[..n].iter().enumerate() {
        entities.push(Entity {
            key: format!("genre{i}"),
            name: name.to_string(),
            is_item: false,
        });
    }
    for (i, name) in ACTORS[..n].iter().enumerate() {
        entities.push(Entity {
            key: format!("actor{i}"),
            name: name.to_string(),
            is_item: false,
        });
    }
    let genre = |i: usize| EntityId((n + i) as u32);
    let actor = |i: usize| EntityId((2 * n + i) as u32);
    let relations = vec!["genre".to_string(), "starring".to_string()];
    let mut triples = Vec::with_capacity(2 * n);
    for i in 0..n {
        let item = EntityId(i as u32);
        triples.push(Triple {
            head: item,
            relation: RelationId(0),
            tail: genre(i),
        });
        triples.push(Triple {
            head: item,
            relation: RelationId(1),
            tail: actor(i),
        });
    }

    let mut rng = seeded_rng(opts.seed, "fixture", 0);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut rng);
    let hidden = (opts.withheld_fraction * triples.len() as f64).round() as usize;
    let mut hide = order[..hidden].to_vec();
    hide.sort_unstable();
    let withheld = hide.iter().map(|&k| (triples[k].head, triples[k].tail)).collect();
    let observed_triples = triples
        .iter()
        .enumerate()
        .filter(|(k, _)| !hide.contains(k))
        .map(|(_, t)| *t)
        .collect();

    let mut dialogues = Vec::with_capacity(n * opts.dialogues_per_item);
    for i in 0..n {
        for d in 0..opts.dialogues_per_item {
            let (first, second) = if d % 2 == 0 {
                (GENRES[i], ACTORS[i])
            } else {
                (ACTORS[i], GENRES[i])
            };
            let turn = |speaker: &str, text: String| TurnRecord {
                speaker: speaker.into(),
                text,
                entities: vec![],
            };
            dialogues.push(DialogueRecord {
                dialogue_id: format!("d{i}-{d}"),
                split: Some(Split::Train),
                turns: vec![
                    turn("user", format!("i want something with {first}")),
                    turn("recommender", format!("you might enjoy {}", ITEMS[i])),
                    turn("user", format!("i also like {second}")),
                    turn("recommender", format!("then try {}", ITEMS[i])),
                ],
            });
        }
    }

    Ok(Fixture {
        planted: KnowledgeGraph::new(entities.clone(), relations.clone(), triples)?,
        observed: KnowledgeGraph::new(entities, relations, observed_triples)?,
        withheld,
        dialogues,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureFiles {
    pub kg: PathBuf,
    pub planted_kg: PathBuf,
    pub dialogues: PathBuf,
    pub withheld: PathBuf,
}

impl Fixture {
    /// Writes `kg.tsv` (observed), `planted.tsv`, `dialogues.jsonl` and
    /// `withheld.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<FixtureFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = FixtureFiles {
            kg: dir.join("kg.tsv"),
            planted_kg: dir.join("planted.tsv"),
            dialogues: dir.join("dialogues.jsonl"),
            withheld: dir.join("withheld.tsv"),
        };
        self.observed.write_tsv(&files.kg)?;
        self.planted.write_tsv(&files.planted_kg)?;
        write_dialogues(&files.dialogues, &self.dialogues)?;
        let mut out = String::new();
        for &(item, attr) in &self.withheld {
            out.push_str(&format!("{}\t{}\n", self.planted.key(item), self.planted.key(attr)));
        }
        std::fs::write(&files.withheld, out).map_err(|e| Error::io(&files.withheld, e))?;
        Ok(files)
    }
}
