use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::normalize_name;
use crate::error::{Error, Result};

/// Dense entity index into the KG entity table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    /// External key as written in the source files.
    pub key: String,
    pub name: String,
    pub is_item: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KgFormat {
    TripleTsv,
    TripleJson,
}

/// The incomplete knowledge graph: entity and relation tables, deduplicated
/// triples and an undirected neighbor index.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    key_index: HashMap<String, EntityId>,
    name_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<EntityId>>,
    connected: HashSet<(EntityId, EntityId)>,
    items: Vec<EntityId>,
    item_pos: Vec<Option<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from resolved tables. Duplicate triples are dropped,
    /// keeping first occurrence order.
    pub fn new(entities: Vec<Entity>, relations: Vec<String>, triples: Vec<Triple>) -> Result<Self> {
        let n = entities.len();
        let mut key_index = HashMap::with_capacity(n);
        let mut name_index = HashMap::with_capacity(n);
        for (i, e) in entities.iter().enumerate() {
            let id = EntityId(i as u32);
            if key_index.insert(e.key.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate entity key `{}`", e.key)));
            }
            name_index.entry(normalize_name(&e.name)).or_insert(id);
        }

        let mut seen = HashSet::with_capacity(triples.len());
        let mut kept = Vec::with_capacity(triples.len());
        for t in triples {
            if t.head.index() >= n {
                return Err(Error::UnknownEntity(t.head.0));
            }
            if t.tail.index() >= n {
                return Err(Error::UnknownEntity(t.tail.0));
            }
            if t.relation.0 as usize >= relations.len() {
                return Err(Error::Config(format!("unknown relation id {}", t.relation.0)));
            }
            if seen.insert(t) {
                kept.push(t);
            }
        }

        let mut adjacency = vec![Vec::new(); n];
        let mut connected = HashSet::new();
        for t in &kept {
            adjacency[t.head.index()].push(t.tail);
            adjacency[t.tail.index()].push(t.head);
            connected.insert(unordered(t.head, t.tail));
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
            nb.dedup();
        }

        let mut items = Vec::new();
        let mut item_pos = vec![None; n];
        for (i, e) in entities.iter().enumerate() {
            if e.is_item {
                item_pos[i] = Some(items.len());
                items.push(EntityId(i as u32));
            }
        }

        Ok(KnowledgeGraph {
            entities,
            key_index,
            name_index,
            relations,
            triples: kept,
            adjacency,
            connected,
            items,
            item_pos,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities.get(id.index()).ok_or(Error::UnknownEntity(id.0))
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Undirected neighbors, sorted by id.
    pub fn neighbors(&self, id: EntityId) -> &[EntityId] {
        &self.adjacency[id.index()]
    }

    /// True when some triple links the two entities in either direction.
    pub fn is_connected(&self, a: EntityId, b: EntityId) -> bool {
        self.connected.contains(&unordered(a, b))
    }

    pub fn items(&self) -> &[EntityId] {
        &self.items
    }

    pub fn is_item(&self, id: EntityId) -> bool {
        self.item_pos.get(id.index()).is_some_and(Option::is_some)
    }

    /// Position of an item entity within [`items`](Self::items).
    pub fn item_position(&self, id: EntityId) -> Option<usize> {
        self.item_pos.get(id.index()).copied().flatten()
    }

    pub fn by_key(&self, key: &str) -> Option<EntityId> {
        self.key_index.get(key).copied()
    }

    /// Exact match on the normalized surface name.
    pub fn by_name(&self, name: &str) -> Option<EntityId> {
        self.name_index.get(&normalize_name(name)).copied()
    }

    pub fn name(&self, id: EntityId) -> &str {
        &self.entities[id.index()].name
    }

    pub fn key(&self, id: EntityId) -> &str {
        &self.entities[id.index()].key
    }

    /// Writes the canonical TSV pair: triples at `path` and the entity sidecar next to it.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.key(t.head),
                self.relations[t.relation.0 as usize],
                self.key(t.tail)
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;

        let side = entity_sidecar(path);
        let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        for e in &self.entities {
            writeln!(f, "{}\t{}\t{}", e.key, e.name, u8::from(e.is_item)).map_err(|e| Error::io(&side, e))?;
        }
        Ok(())
    }
}

fn unordered(a: EntityId, b: EntityId) -> (EntityId, EntityId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// `kg.tsv` -> `kg.entities.tsv`.
pub fn entity_sidecar(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".tsv").unwrap_or(&name);
    path.with_file_name(format!("{stem}.entities.tsv"))
}

pub fn load_kg(path: &Path, format: KgFormat) -> Result<KnowledgeGraph> {
    match format {
        KgFormat::TripleTsv => load_tsv(path, &entity_sidecar(path)),
        KgFormat::TripleJson => load_json(path),
    }
}

/// Picks the format from the file extension (`.json` or TSV otherwise).
pub fn load_kg_auto(path: &Path) -> Result<KnowledgeGraph> {
    let fmt = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => KgFormat::TripleJson,
        _ => KgFormat::TripleTsv,
    };
    load_kg(path, fmt)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

fn load_tsv(triples_path: &Path, entities_path: &Path) -> Result<KnowledgeGraph> {
    let mut entities = Vec::new();
    for (lineno, line) in read(entities_path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse {
            path: entities_path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        if cols.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let is_item = parse_flag(cols[2]).ok_or_else(|| parse_err(format!("bad is_item flag `{}`", cols[2])))?;
        entities.push(Entity {
            key: cols[0].trim().to_string(),
            name: cols[1].trim().to_string(),
            is_item,
        });
    }
    let keys: HashMap<&str, EntityId> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.key.as_str(), EntityId(i as u32)))
        .collect();

    let mut relations: Vec<String> = Vec::new();
    let mut rel_index: HashMap<String, RelationId> = HashMap::new();
    let mut triples = Vec::new();
    for (lineno, line) in read(triples_path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Parse {
                path: triples_path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected `head<TAB>relation<TAB>tail`, got `{line}`"),
            });
        }
        let resolve = |key: &str| {
            keys.get(key).copied().ok_or_else(|| Error::DanglingId {
                path: triples_path.to_path_buf(),
                line: lineno + 1,
                kind: "entity",
                key: key.to_string(),
            })
        };
        let head = resolve(cols[0])?;
        let tail = resolve(cols[2])?;
        let relation = *rel_index.entry(cols[1].to_string()).or_insert_with(|| {
            relations.push(cols[1].to_string());
            RelationId(relations.len() as u32 - 1)
        });
        triples.push(Triple { head, relation, tail });
    }
    KnowledgeGraph::new(entities, relations, triples)
}

#[derive(Deserialize)]
struct JsonKg {
    entities: Vec<JsonEntity>,
    #[serde(default)]
    triples: Vec<(String, String, String)>,
}

#[derive(Deserialize)]
struct JsonEntity {
    id: String,
    name: String,
    #[serde(default)]
    is_item: bool,
}

fn load_json(path: &Path) -> Result<KnowledgeGraph> {
    let text = read(path)?;
    let raw: JsonKg = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let entities: Vec<Entity> = raw
        .entities
        .into_iter()
        .map(|e| Entity {
            key: e.id,
            name: e.name,
            is_item: e.is_item,
        })
        .collect();
    let keys: HashMap<&str, EntityId> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.key.as_str(), EntityId(i as u32)))
        .collect();
    let mut relations: Vec<String> = Vec::new();
    let mut rel_index: HashMap<String, RelationId> = HashMap::new();
    let mut triples = Vec::with_capacity(raw.triples.len());
    for (i, (h, r, t)) in raw.triples.iter().enumerate() {
        // For JSON the "line" is the 1-based position in the triples array.
        let resolve = |key: &str| {
            keys.get(key).copied().ok_or_else(|| Error::DanglingId {
                path: path.to_path_buf(),
                line: i + 1,
                kind: "entity",
                key: key.to_string(),
            })
        };
        let head = resolve(h)?;
        let tail = resolve(t)?;
        let relation = *rel_index.entry(r.clone()).or_insert_with(|| {
            relations.push(r.clone());
            RelationId(relations.len() as u32 - 1)
        });
        triples.push(Triple { head, relation, tail });
    }
    KnowledgeGraph::new(entities, relations, triples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, entities: &str, triples: &str) -> PathBuf {
        let p = dir.join("kg.tsv");
        std::fs::write(&p, triples).unwrap();
        std::fs::write(dir.join("kg.entities.tsv"), entities).unwrap();
        p
    }

    #[test]
    fn empty_triples_keep_declared_entities() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_pair(dir.path(), "a\tAlpha\t1\nb\tBeta\t0\nc\tGamma\t0\n", "");
        let kg = load_kg(&p, KgFormat::TripleTsv).unwrap();
        assert_eq!(kg.num_entities(), 3);
        assert!(kg.triples().is_empty());
        assert!((0..3).all(|i| kg.neighbors(EntityId(i)).is_empty()));
        assert_eq!(kg.items(), &[EntityId(0)]);
    }

    #[test]
    fn duplicate_triples_are_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_pair(dir.path(), "a\tA\t0\nb\tB\t0\n", "a\tr1\tb\na\tr1\tb\n");
        let kg = load_kg(&p, KgFormat::TripleTsv).unwrap();
        assert_eq!(kg.triples().len(), 1);
    }

    #[test]
    fn chain_adjacency() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_pair(
            dir.path(),
            "a\tA\t0\nb\tB\t0\nc\tC\t0\nd\tD\t0\ne\tE\t0\n",
            "a\tr\tb\nb\tr\tc\nc\tr\td\nd\tr\te\n",
        );
        let kg = load_kg(&p, KgFormat::TripleTsv).unwrap();
        let c = kg.by_key("c").unwrap();
        let expected = vec![kg.by_key("b").unwrap(), kg.by_key("d").unwrap()];
        assert_eq!(kg.neighbors(c), expected.as_slice());
        // adjacency agrees with the triple list
        for t in kg.triples() {
            assert!(kg.neighbors(t.head).contains(&t.tail));
            assert!(kg.neighbors(t.tail).contains(&t.head));
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_pair(dir.path(), "a\tA\t0\nb\tB\t0\n", "a\tr\tb\nbroken line\n");
        match load_kg(&p, KgFormat::TripleTsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_entity_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_pair(dir.path(), "a\tA\t0\n", "a\tr\tzzz\n");
        match load_kg(&p, KgFormat::TripleTsv) {
            Err(Error::DanglingId { key, line, .. }) => {
                assert_eq!(key, "zzz");
                assert_eq!(line, 1);
            }
            other => panic!("expected dangling id, got {other:?}"),
        }
    }

    #[test]
    fn json_format_and_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kg.json");
        std::fs::write(
            &p,
            r#"{"entities":[{"id":"m1","name":"Wonder Woman","is_item":true},{"id":"g","name":"action"}],
                "triples":[["m1","genre","g"],["m1","genre","g"]]}"#,
        )
        .unwrap();
        let kg = load_kg_auto(&p).unwrap();
        assert_eq!(kg.triples().len(), 1);
        assert_eq!(kg.by_name("  wonder   WOMAN "), kg.by_key("m1"));
        assert!(kg.is_connected(EntityId(1), EntityId(0)));

        let tsv = dir.path().join("copy.tsv");
        kg.write_tsv(&tsv).unwrap();
        let back = load_kg_auto(&tsv).unwrap();
        assert_eq!(back.entities(), kg.entities());
        assert_eq!(back.triples(), kg.triples());
    }
}
