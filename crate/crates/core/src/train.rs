//! The three training stages: pre-recommendation plus graph regularization,
//! the recommendation objective, and the decoder with everything else frozen.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::DecodeInputs;
use crate::model::{Model, Resources, TurnPlan, DECODER, ENCODER, GRAPH};
use crate::nn::{seeded_rng, warmup_lr, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Rec,
    Gen,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Rec => "rec",
            Stage::Gen => "gen",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Stage-specific parts, averaged over examples.
    pub pre: f64,
    pub reg: f64,
    pub nll: f64,
    pub kl: f64,
    pub examples: usize,
    pub lr: f64,
}

const ENCODER_GROUP: usize = 0;
const GRAPH_GROUP: usize = 1;
const OTHER_GROUP: usize = 2;

/// Optimizer over the parameters a stage updates, grouped for per-group rates.
pub fn optimizer_for(model: &Model, stage: Stage) -> Result<Adam> {
    let params = model
        .store
        .iter()
        .filter(|(name, _)| (stage == Stage::Gen) == name.starts_with(DECODER))
        .map(|(name, var)| {
            let group = if name.starts_with(ENCODER) {
                ENCODER_GROUP
            } else if name.starts_with(GRAPH) {
                GRAPH_GROUP
            } else {
                OTHER_GROUP
            };
            (name.clone(), var.clone(), group)
        })
        .collect();
    Adam::new(params)
}

fn group_lrs(model: &Model) -> [f64; 3] {
    let c = &model.config;
    [c.lr_encoder, c.lr_rgcn, c.lr_other]
}

fn check_finite(stage: Stage, epoch: usize, step: usize, value: f64, detail: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.name(),
            epoch,
            step,
            detail: detail(),
        })
    }
}

fn batches(len: usize, batch_size: usize, stage: Stage, seed: u64, epoch: usize) -> (Vec<Vec<usize>>, rand_chacha::ChaCha8Rng) {
    let mut rng = seeded_rng(seed, stage.name(), epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    (order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect(), rng)
}

/// Runs pretraining epochs `start..end`; only turns with mentions and targets contribute.
pub fn pretrain(
    model: &Model,
    res: &Resources,
    plans: &[TurnPlan],
    start: usize,
    end: usize,
    optim: &mut Adam,
) -> Result<Vec<EpochLog>> {
    let usable: Vec<&TurnPlan> = plans.iter().filter(|p| p.trains_recommender()).collect();
    let lrs = group_lrs(model);
    let mut logs = Vec::new();
    for epoch in start..end {
        let (order, _) = batches(usable.len(), model.config.batch_size, Stage::Pretrain, model.config.seed, epoch);
        let mut log = EpochLog {
            epoch,
            lr: lrs[OTHER_GROUP],
            ..Default::default()
        };
        for (step, batch) in order.iter().enumerate() {
            let emb = model.entity_embeddings(res)?;
            let mut total = None;
            for &i in batch {
                let (loss, pre, reg) = model.pretrain_loss(res, usable[i], &emb)?;
                log.pre += pre;
                log.reg += reg;
                total = Some(match total {
                    None => loss,
                    Some(t) => (t + loss)?,
                });
            }
            let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
            let value = loss.to_scalar::<f64>()?;
            check_finite(Stage::Pretrain, epoch, step, value, || format!("batch {batch:?}"))?;
            log.loss += value * batch.len() as f64;
            optim.step(&loss.backward()?, &lrs)?;
        }
        finish(&mut log, usable.len());
        tracing::info!(stage = "pretrain", epoch, loss = log.loss, pre = log.pre, reg = log.reg, "epoch done");
        logs.push(log);
    }
    Ok(logs)
}

/// Runs recommendation epochs `start..end` with one posterior sample per turn.
pub fn train_rec(
    model: &Model,
    res: &Resources,
    plans: &[TurnPlan],
    start: usize,
    end: usize,
    optim: &mut Adam,
) -> Result<Vec<EpochLog>> {
    let usable: Vec<&TurnPlan> = plans.iter().filter(|p| p.trains_recommender()).collect();
    let lrs = group_lrs(model);
    let mut logs = Vec::new();
    for epoch in start..end {
        let (order, mut rng) = batches(usable.len(), model.config.batch_size, Stage::Rec, model.config.seed, epoch);
        let mut log = EpochLog {
            epoch,
            lr: lrs[OTHER_GROUP],
            ..Default::default()
        };
        for (step, batch) in order.iter().enumerate() {
            let emb = model.entity_embeddings(res)?;
            let mut total = None;
            for &i in batch {
                let out = model.rec_loss(res, usable[i], &emb, &mut rng)?;
                log.nll += out.nll;
                log.kl += out.kl;
                log.reg += out.reg;
                total = Some(match total {
                    None => out.loss,
                    Some(t) => (t + out.loss)?,
                });
            }
            let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
            let value = loss.to_scalar::<f64>()?;
            check_finite(Stage::Rec, epoch, step, value, || format!("batch {batch:?}"))?;
            log.loss += value * batch.len() as f64;
            optim.step(&loss.backward()?, &lrs)?;
        }
        finish(&mut log, usable.len());
        tracing::info!(stage = "rec", epoch, loss = log.loss, nll = log.nll, kl = log.kl, "epoch done");
        logs.push(log);
    }
    Ok(logs)
}

/// Decoder inputs computed once from the frozen encoder, graph and prior.
pub fn frozen_decode_inputs(model: &Model, res: &Resources, plans: &[TurnPlan]) -> Result<Vec<DecodeInputs>> {
    let emb = model.entity_embeddings(res)?.detach();
    plans.iter().map(|p| model.plan_decode_inputs(res, p, &emb)).collect()
}

/// Runs decoder epochs `start..end` under the warm-up schedule; the step
/// counter continues from the optimizer state.
pub fn train_gen(
    model: &Model,
    plans: &[TurnPlan],
    inputs: &[DecodeInputs],
    start: usize,
    end: usize,
    optim: &mut Adam,
) -> Result<Vec<EpochLog>> {
    let cfg = &model.config;
    let mut logs = Vec::new();
    for epoch in start..end {
        let (order, _) = batches(plans.len(), cfg.batch_size, Stage::Gen, cfg.seed, epoch);
        let mut log = EpochLog {
            epoch,
            ..Default::default()
        };
        for (step, batch) in order.iter().enumerate() {
            let mut total = None;
            for &i in batch {
                let loss = model.gen_loss(&plans[i], &inputs[i])?;
                log.nll += loss.to_scalar::<f64>()?;
                total = Some(match total {
                    None => loss,
                    Some(t) => (t + loss)?,
                });
            }
            let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
            let value = loss.to_scalar::<f64>()?;
            check_finite(Stage::Gen, epoch, step, value, || format!("batch {batch:?}"))?;
            log.loss += value * batch.len() as f64;
            let lr = warmup_lr(cfg.gen_lr_factor, model.decoder.width(), cfg.warmup_steps, optim.steps_taken() as usize + 1);
            log.lr = lr;
            optim.step(&loss.backward()?, &[lr, lr, lr])?;
        }
        finish(&mut log, plans.len());
        tracing::info!(stage = "gen", epoch, loss = log.loss, lr = log.lr, "epoch done");
        logs.push(log);
    }
    Ok(logs)
}

fn finish(log: &mut EpochLog, n: usize) {
    log.examples = n;
    if n > 0 {
        let n = n as f64;
        log.loss /= n;
        log.pre /= n;
        log.reg /= n;
        log.nll /= n;
        log.kl /= n;
    }
}
