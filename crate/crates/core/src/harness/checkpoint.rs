//! Self-describing checkpoint directories.
//!
//! ```text
//! meta.json           format version, config, stage progress, vocabulary, KG fingerprint
//! params.safetensors  every model parameter
//! optim.safetensors   Adam moments of the stage named in meta.json (optional)
//! mi_scores.tsv       cached mutual-information scores
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{KnowledgeGraph, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{kg_fingerprint, Model, Resources};
use crate::nn::Adam;
use crate::subgraph_select::MiIndex;
use crate::train::{EpochLog, Stage};

pub const FORMAT_VERSION: u32 = 1;

const META: &str = "meta.json";
const PARAMS: &str = "params.safetensors";
const OPTIM: &str = "optim.safetensors";
const MI: &str = "mi_scores.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub log: EpochLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: Config,
    /// Stages that ran all their configured epochs, in completion order.
    pub completed: Vec<Stage>,
    /// Epochs run so far per stage.
    pub epochs: BTreeMap<Stage, usize>,
    /// Stage whose optimizer state `optim.safetensors` holds.
    pub optimizer: Option<Stage>,
    pub kg_fingerprint: String,
    pub num_entities: usize,
    pub num_relations: usize,
    pub vocab: Vec<String>,
    pub history: Vec<StageRecord>,
}

impl CheckpointMeta {
    pub fn fresh(config: &Config, res: &Resources) -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            completed: vec![],
            epochs: BTreeMap::new(),
            optimizer: None,
            kg_fingerprint: kg_fingerprint(&res.kg),
            num_entities: res.kg.num_entities(),
            num_relations: res.kg.num_relations(),
            vocab: res.vocab.clone().into(),
            history: vec![],
        }
    }

    pub fn epochs_done(&self, stage: Stage) -> usize {
        self.epochs.get(&stage).copied().unwrap_or(0)
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }
}

pub fn exists(dir: &Path) -> bool {
    dir.join(META).is_file()
}

pub fn save(dir: &Path, meta: &CheckpointMeta, model: &Model, res: &Resources, optim: Option<&Adam>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.store.save(&dir.join(PARAMS))?;
    res.mi.save_tsv(&dir.join(MI))?;
    let optim_path = dir.join(OPTIM);
    match optim {
        Some(o) => o.save(&optim_path)?,
        None => {
            if optim_path.exists() {
                std::fs::remove_file(&optim_path).map_err(|e| Error::io(&optim_path, e))?;
            }
        }
    }
    let meta_path = dir.join(META);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Loads a checkpoint against `kg`. The model is built from `config`, which
/// must share the stored architecture; `None` uses the stored config.
pub fn load(dir: &Path, kg: KnowledgeGraph, config: Option<&Config>) -> Result<(CheckpointMeta, Model, Resources)> {
    let meta = read_meta(dir)?;
    let fingerprint = kg_fingerprint(&kg);
    if fingerprint != meta.kg_fingerprint {
        return Err(Error::Checkpoint(format!(
            "knowledge graph does not match the one the checkpoint was trained on ({} vs {})",
            &fingerprint[..12],
            &meta.kg_fingerprint[..12.min(meta.kg_fingerprint.len())]
        )));
    }
    let config = match config {
        Some(c) if !c.same_architecture(&meta.config) => {
            return Err(Error::Checkpoint(
                "config widths or layer counts differ from the checkpoint's".into(),
            ))
        }
        Some(c) => c.clone(),
        None => meta.config.clone(),
    };
    let mi = MiIndex::load_tsv(&dir.join(MI))?;
    if mi.scores().len() != kg.num_entities() {
        return Err(Error::Checkpoint(format!(
            "cached MI covers {} entities, graph has {}",
            mi.scores().len(),
            kg.num_entities()
        )));
    }
    let res = Resources::new(kg, mi, Vocabulary::from(meta.vocab.clone()))?;
    let model = Model::for_resources(&config, &res)?;
    model.store.load(&dir.join(PARAMS))?;
    Ok((meta, model, res))
}

/// Restores optimizer moments when the checkpoint holds them for `stage`.
pub fn restore_optimizer(dir: &Path, meta: &CheckpointMeta, stage: Stage, optim: &mut Adam) -> Result<bool> {
    let path = dir.join(OPTIM);
    if meta.optimizer != Some(stage) || !path.is_file() {
        return Ok(false);
    }
    optim.load(&path)?;
    Ok(true)
}
