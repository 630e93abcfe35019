//! Stage orchestration shared by the CLI, the acceptance suite and the FFI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{build_examples, load_dialogues, load_kg_auto, DialogueSet, EntityId, KnowledgeGraph, Split};
use crate::error::{Error, Result};
use crate::generator::GenerateOptions;
use crate::harness::checkpoint::{self, CheckpointMeta, StageRecord};
use crate::metrics::EvalReport;
use crate::model::{Model, Resources, TurnPlan, ATTENTION, DECODER, ENCODER, GRAPH, POSTERIOR, PRIOR};
use crate::nn::Adam;
use crate::train::{self, EpochLog, Stage};

/// Knowledge graph plus linked dialogues.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub kg: KnowledgeGraph,
    pub dialogues: DialogueSet,
}

impl Corpus {
    pub fn load(kg: &Path, dialogues: &Path) -> Result<Self> {
        let kg = load_kg_auto(kg)?;
        let dialogues = load_dialogues(dialogues, &kg)?;
        Ok(Corpus { kg, dialogues })
    }

    pub fn in_memory(kg: KnowledgeGraph, dialogues: DialogueSet) -> Self {
        Corpus { kg, dialogues }
    }
}

/// A model with its resources and training progress.
pub struct Workspace {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub res: Resources,
    /// Directory the state was loaded from, for optimizer restoration.
    pub source: Option<PathBuf>,
    /// Optimizer of the most recent stage run in this process.
    pub optimizer: Option<(Stage, Adam)>,
}

impl Workspace {
    /// Fresh initialization: vocabulary and MI scores from the training split.
    pub fn fresh(config: &Config, corpus: &Corpus) -> Result<Self> {
        let train = corpus.dialogues.split(Split::Train);
        let res = Resources::from_training(corpus.kg.clone(), &train, config.vocab_size)?;
        let model = Model::for_resources(config, &res)?;
        model.warm_start_encoder()?;
        Ok(Workspace {
            meta: CheckpointMeta::fresh(config, &res),
            model,
            res,
            source: None,
            optimizer: None,
        })
    }

    /// Loads `dir`; `config` may change training settings but not widths.
    pub fn load(dir: &Path, config: Option<&Config>, kg: KnowledgeGraph) -> Result<Self> {
        let (meta, model, res) = checkpoint::load(dir, kg, config)?;
        Ok(Workspace {
            meta,
            model,
            res,
            source: Some(dir.to_path_buf()),
            optimizer: None,
        })
    }

    /// Loads `dir` when it holds a checkpoint, otherwise initializes.
    pub fn open(dir: Option<&Path>, config: &Config, corpus: &Corpus) -> Result<Self> {
        match dir {
            Some(d) if checkpoint::exists(d) => Self::load(d, Some(config), corpus.kg.clone()),
            _ => Self::fresh(config, corpus),
        }
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    pub fn plans(&self, corpus: &Corpus, split: Split) -> Result<Vec<TurnPlan>> {
        let examples = build_examples(&corpus.dialogues.split(split), &self.res.kg);
        self.model.plans(&self.res, &examples)
    }

    fn configured_epochs(&self, stage: Stage) -> usize {
        let c = self.config();
        match stage {
            Stage::Pretrain => c.pretrain_epochs,
            Stage::Rec => c.rec_epochs,
            Stage::Gen => c.gen_epochs,
        }
    }

    /// Runs the remaining epochs of `stage` on the training split, resuming
    /// from stored progress and optimizer state.
    pub fn run_stage(&mut self, stage: Stage, corpus: &Corpus) -> Result<Vec<EpochLog>> {
        if stage == Stage::Gen && !self.meta.has_completed(Stage::Rec) {
            return Err(Error::StageOrder(
                "train-gen needs a checkpoint that finished the recommendation stage".into(),
            ));
        }
        let plans = self.plans(corpus, Split::Train)?;
        let mut optim = match self.optimizer.take() {
            Some((s, o)) if s == stage => o,
            _ => {
                let mut o = train::optimizer_for(&self.model, stage)?;
                if let Some(dir) = &self.source {
                    checkpoint::restore_optimizer(dir, &self.meta, stage, &mut o)?;
                }
                o
            }
        };
        let start = if self.meta.optimizer == Some(stage) || self.meta.has_completed(stage) {
            self.meta.epochs_done(stage)
        } else {
            0
        };
        let end = self.configured_epochs(stage).max(start);
        let logs = match stage {
            Stage::Pretrain => train::pretrain(&self.model, &self.res, &plans, start, end, &mut optim)?,
            Stage::Rec => train::train_rec(&self.model, &self.res, &plans, start, end, &mut optim)?,
            Stage::Gen => {
                let frozen = [ENCODER, GRAPH, ATTENTION, PRIOR, POSTERIOR];
                let before = self.model.store.fingerprint(&frozen)?;
                let inputs = train::frozen_decode_inputs(&self.model, &self.res, &plans)?;
                let logs = train::train_gen(&self.model, &plans, &inputs, start, end, &mut optim)?;
                if self.model.store.fingerprint(&frozen)? != before {
                    return Err(Error::StageOrder("frozen parameters changed during train-gen".into()));
                }
                logs
            }
        };
        self.meta.epochs.insert(stage, end);
        if !self.meta.completed.contains(&stage) {
            self.meta.completed.push(stage);
        }
        self.meta.optimizer = Some(stage);
        self.meta.config = self.config().clone();
        self.meta
            .history
            .extend(logs.iter().map(|log| StageRecord { stage, log: log.clone() }));
        self.optimizer = Some((stage, optim));
        Ok(logs)
    }

    /// Writes the checkpoint; optimizer state loaded from the source
    /// directory is carried over when no stage ran in this process.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if let Some((_, o)) = &self.optimizer {
            return checkpoint::save(dir, &self.meta, &self.model, &self.res, Some(o));
        }
        let carried = match (self.meta.optimizer, &self.source) {
            (Some(stage), Some(src)) => {
                let mut o = train::optimizer_for(&self.model, stage)?;
                checkpoint::restore_optimizer(src, &self.meta, stage, &mut o)?.then_some(o)
            }
            _ => None,
        };
        checkpoint::save(dir, &self.meta, &self.model, &self.res, carried.as_ref())
    }

    /// Fingerprint of every non-decoder parameter.
    pub fn frozen_fingerprint(&self) -> Result<String> {
        self.model.store.fingerprint(&[ENCODER, GRAPH, ATTENTION, PRIOR, POSTERIOR])
    }

    pub fn decoder_fingerprint(&self) -> Result<String> {
        self.model.store.fingerprint(&[DECODER])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub example_id: String,
    pub gold: Vec<u32>,
    pub ranking: Vec<RankedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub example_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub rankings: Vec<RankingRecord>,
    pub generations: Vec<GenerationRecord>,
}

pub const RANKING_DEPTH: usize = 50;

/// Ranks and generates for every recommender turn of `split`. Rankings cover
/// turns with both mentions and target items. Perplexity is reported once
/// the decoder has been trained.
pub fn evaluate(ws: &Workspace, corpus: &Corpus, split: Split, opts: &GenerateOptions) -> Result<Evaluation> {
    let plans = ws.plans(corpus, split)?;
    let emb = ws.model.entity_embeddings(&ws.res)?.detach();
    let vocab = &ws.res.vocab;
    let mut rankings = Vec::new();
    let mut generations = Vec::with_capacity(plans.len());
    let mut references = Vec::with_capacity(plans.len());
    let mut nll = 0.0;
    let mut tokens = 0usize;
    let with_decoder = ws.meta.has_completed(Stage::Gen);
    for plan in &plans {
        let inference = ws.model.infer_plan(&ws.res, plan, &emb)?;
        if plan.trains_recommender() {
            rankings.push(RankingRecord {
                example_id: plan.example.id(),
                gold: plan.example.target_items.iter().map(|e| e.0).collect(),
                ranking: inference
                    .ranking(&ws.res.kg, RANKING_DEPTH)
                    .into_iter()
                    .map(|(id, score)| RankedItem { item_id: id.0, score })
                    .collect(),
            });
        }
        let inputs = ws
            .model
            .decode_inputs(&ws.res, &emb, &inference, &plan.prior_ids, &plan.prior_segs)?;
        let ids = ws.model.generate(&inputs, opts)?;
        generations.push(GenerationRecord {
            example_id: plan.example.id(),
            tokens: vocab.decode(&ids),
        });
        references.push(vocab.decode(&plan.response_ids));
        if with_decoder {
            let count = ws.model.decoder.teacher_forcing(&plan.response_ids).1.len();
            nll += ws.model.gen_loss(plan, &inputs)?.to_scalar::<f64>()? * count as f64;
            tokens += count;
        }
    }
    let ranked: Vec<Vec<EntityId>> = rankings
        .iter()
        .map(|r| r.ranking.iter().map(|x| EntityId(x.item_id)).collect())
        .collect();
    let gold: Vec<Vec<EntityId>> = rankings.iter().map(|r| r.gold.iter().map(|&g| EntityId(g)).collect()).collect();
    let generated: Vec<Vec<String>> = generations.iter().map(|g| g.tokens.clone()).collect();
    let mut report = EvalReport::new(split_name(split), &ranked, &gold, &generated, &references, ws.config().rouge);
    report.example_count = plans.len();
    if with_decoder && tokens > 0 {
        report.perplexity = Some((nll / tokens as f64).exp());
    }
    Ok(Evaluation {
        report,
        rankings,
        generations,
    })
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl Evaluation {
    /// Writes `report.json`, `rankings.jsonl` and `generations.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("report.json");
        std::fs::write(&report, serde_json::to_string_pretty(&self.report)?).map_err(|e| Error::io(&report, e))?;
        write_jsonl(&dir.join("rankings.jsonl"), &self.rankings)?;
        write_jsonl(&dir.join("generations.jsonl"), &self.generations)
    }
}
