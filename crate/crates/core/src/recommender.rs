//! Item scoring from the latent subgraph and the recommendation objective.
//!
//! ```text
//! e_u      = sum_{(h,t)} w(h,t) e_t
//! score(i) = alpha softmax_i(e_u . e_i) + (1 - alpha) sum_h w(h,i) / Z
//! ```
//!
//! `w` is the connected-class weight of each candidate pair: a posterior
//! sample while training, the prior at inference.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{EntityId, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::graph_encoder::EntityEmbeddings;
use crate::nn::{clamped_log, softmax_last, DTYPE};
use crate::refactor::{kl_pairs, sample_gumbel, RelationDistribution};

/// `w^T T` for `P` weights and `P x d` tail rows; zero for an empty pair set.
pub fn user_representation(weights: &Tensor, tail_emb: &Tensor) -> Result<Tensor> {
    let (rows, d) = tail_emb.dims2()?;
    if weights.dims1()? != rows {
        return Err(Error::Dimension(format!("{} weights for {rows} tails", weights.dims1()?)));
    }
    if rows == 0 {
        return Ok(Tensor::zeros(d, DTYPE, &Device::Cpu)?);
    }
    Ok(weights.unsqueeze(0)?.matmul(tail_emb)?.squeeze(0)?)
}

/// Mixture of the embedding softmax and the normalized link mass. When the
/// link mass sums to zero the softmax is returned alone.
pub fn recommend_scores(e_u: &Tensor, item_emb: &Tensor, link_mass: &Tensor, alpha: f64) -> Result<Tensor> {
    let soft = softmax_last(&item_emb.matmul(&e_u.unsqueeze(1)?)?.squeeze(1)?)?;
    let z = link_mass.sum_all()?;
    if z.to_scalar::<f64>()? <= 0.0 {
        return Ok(soft);
    }
    let linked = link_mass.broadcast_div(&z)?;
    Ok(((soft * alpha)? + (linked * (1.0 - alpha))?)?)
}

/// `-beta mean_t log score(t) + gamma kl + lambda reg`; `targets` index the item list.
pub fn rec_loss(scores: &Tensor, targets: &[usize], kl: &Tensor, reg: &Tensor, cfg: &Config) -> Result<Tensor> {
    let nll = target_nll(scores, targets, cfg.clamp_eps)?;
    Ok(((nll * cfg.beta)? + (kl * cfg.gamma)?)?.add(&(reg * cfg.lambda)?)?)
}

/// `-mean_t log score(t)`.
pub fn target_nll(scores: &Tensor, targets: &[usize], eps: f64) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::Dimension("recommendation loss needs at least one target".into()));
    }
    let idx: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
    let picked = scores.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
    Ok(clamped_log(&picked, eps)?.mean_all()?.neg()?)
}

/// Top-`m` items by score, ties broken by ascending entity id.
pub fn rank_items(scores: &[f64], items: &[EntityId], m: usize) -> Vec<(EntityId, f64)> {
    let mut order: Vec<(EntityId, f64)> = items.iter().copied().zip(scores.iter().copied()).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.truncate(m);
    order
}

/// Everything needed to score items for one candidate-pair set.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    pub tail_emb: Tensor,
    pub item_emb: Tensor,
    /// Item-list position of each pair's tail, when the tail is an item.
    pair_item: Vec<Option<usize>>,
    num_items: usize,
}

impl ScoringContext {
    pub fn new(emb: &EntityEmbeddings, kg: &KnowledgeGraph, pairs: &[(EntityId, EntityId)]) -> Result<Self> {
        let tails: Vec<EntityId> = pairs.iter().map(|p| p.1).collect();
        let d = emb.table.dims2()?.1;
        let tail_emb = if tails.is_empty() {
            Tensor::zeros((0, d), DTYPE, &Device::Cpu)?
        } else {
            emb.rows(&tails)?
        };
        Ok(ScoringContext {
            tail_emb,
            item_emb: emb.rows(kg.items())?,
            pair_item: tails.iter().map(|&t| kg.item_position(t)).collect(),
            num_items: kg.items().len(),
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pair_item.len()
    }

    /// `sum_h w(h, i)` for every item `i`.
    pub fn link_mass(&self, weights: &Tensor) -> Result<Tensor> {
        let zero = Tensor::zeros(self.num_items, DTYPE, &Device::Cpu)?;
        let (src, dst): (Vec<u32>, Vec<u32>) = self
            .pair_item
            .iter()
            .enumerate()
            .filter_map(|(p, pos)| pos.map(|i| (p as u32, i as u32)))
            .unzip();
        if src.is_empty() {
            return Ok(zero);
        }
        let w = weights.index_select(&Tensor::new(src.as_slice(), &Device::Cpu)?, 0)?;
        Ok(zero.index_add(&Tensor::new(dst.as_slice(), &Device::Cpu)?, &w, 0)?)
    }

    pub fn scores(&self, weights: &Tensor, alpha: f64) -> Result<Tensor> {
        let e_u = user_representation(weights, &self.tail_emb)?;
        recommend_scores(&e_u, &self.item_emb, &self.link_mass(weights)?, alpha)
    }

    /// `mean_t log score(t)` for a hard subgraph.
    pub fn log_likelihood(&self, bits: &[bool], targets: &[usize], alpha: f64, eps: f64) -> Result<f64> {
        let w: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let weights = Tensor::from_vec(w, bits.len(), &Device::Cpu)?;
        Ok(-target_nll(&self.scores(&weights, alpha)?, targets, eps)?.to_scalar::<f64>()?)
    }
}

/// Every assignment of `n` bits, in binary counting order.
pub fn all_subgraphs(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u64..1 << n).map(move |mask| (0..n).map(|i| mask >> i & 1 == 1).collect())
}

/// `E_q[log P(I|G)] - KL(q || p)` by enumerating every subgraph; only
/// feasible for a handful of pairs.
pub fn exact_elbo(
    q: &[RelationDistribution],
    p: &[RelationDistribution],
    log_lik: impl Fn(&[bool]) -> Result<f64>,
    eps: f64,
) -> Result<f64> {
    if q.len() > 20 {
        return Err(Error::Dimension(format!("{} pairs is too many to enumerate", q.len())));
    }
    let mut expected = 0.0;
    for bits in all_subgraphs(q.len()) {
        let weight: f64 = q.iter().zip(&bits).map(|(d, &b)| d.prob(b)).product();
        if weight > 0.0 {
            expected += weight * log_lik(&bits)?;
        }
    }
    Ok(expected - kl_pairs(q, p, eps))
}

/// Monte-Carlo version of [`exact_elbo`] with hard Gumbel draws from `q`.
pub fn elbo_estimate(
    q: &[RelationDistribution],
    p: &[RelationDistribution],
    log_lik: impl Fn(&[bool]) -> Result<f64>,
    n_samples: usize,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = n_samples.max(1);
    let mut total = 0.0;
    for _ in 0..n {
        let bits: Vec<bool> = q
            .iter()
            .map(|d| sample_gumbel(d, cfg.tau, true, cfg.clamp_eps, rng) == 1.0)
            .collect();
        total += log_lik(&bits)?;
    }
    Ok(total / n as f64 - kl_pairs(q, p, cfg.clamp_eps))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::nn::seeded_rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    fn v(t: &Tensor) -> Vec<f64> {
        t.to_vec1::<f64>().unwrap()
    }

    #[test]
    fn user_representation_cases() {
        let tails = t2(&[&[1.0, 2.0], &[-1.0, 0.5], &[3.0, 3.0]]);
        assert_eq!(v(&user_representation(&t1(&[0.0; 3]), &tails).unwrap()), vec![0.0, 0.0]);
        let one = t2(&[&[1.0, 2.0]]);
        assert_eq!(v(&user_representation(&t1(&[1.0]), &one).unwrap()), vec![1.0, 2.0]);
        let got = v(&user_representation(&t1(&[0.5, 0.2, 0.1]), &tails).unwrap());
        let want = [0.5 - 0.2 + 0.3, 1.0 + 0.1 + 0.3];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let empty = Tensor::zeros((0, 2), DTYPE, &Device::Cpu).unwrap();
        let empty_w = Tensor::zeros(0, DTYPE, &Device::Cpu).unwrap();
        assert_eq!(v(&user_representation(&empty_w, &empty).unwrap()), vec![0.0, 0.0]);
    }

    #[test]
    fn score_mixture_cases() {
        let items = t2(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let e_u = t1(&[0.5, -0.3]);
        let logits = [0.5, -0.3, 0.2];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let soft: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();

        let pure = v(&recommend_scores(&e_u, &items, &t1(&[0.2, 0.0, 0.8]), 1.0).unwrap());
        for (a, b) in pure.iter().zip(&soft) {
            assert!((a - b).abs() < 1e-12);
        }
        let linked = v(&recommend_scores(&e_u, &items, &t1(&[0.0, 0.7, 0.0]), 0.0).unwrap());
        assert_eq!(linked[1], 1.0);

        let mass = [0.9, 0.0, 0.3];
        let got = v(&recommend_scores(&e_u, &items, &t1(&mass), 0.1).unwrap());
        for i in 0..3 {
            let want = 0.1 * soft[i] + 0.9 * mass[i] / 1.2;
            assert!((got[i] - want).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let fallback = v(&recommend_scores(&e_u, &items, &t1(&[0.0; 3]), 0.1).unwrap());
        for (a, b) in fallback.iter().zip(&soft) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_arithmetic() {
        let cfg = Config::default();
        let zero = t1(&[0.0]).squeeze(0).unwrap();
        let l = rec_loss(&t1(&[0.0, 1.0]), &[1], &zero, &zero, &cfg).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);

        let kl = Tensor::new(0.1f64, &Device::Cpu).unwrap();
        let reg = Tensor::new(2.0f64, &Device::Cpu).unwrap();
        let l = rec_loss(&t1(&[0.5, 0.5]), &[0], &kl, &reg, &cfg).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - (2f64.ln() + 1.0 + 0.005)).abs() < 1e-12);

        let ce = Config {
            gamma: 0.0,
            lambda: 0.0,
            ..Config::default()
        };
        let l = rec_loss(&t1(&[0.25, 0.75]), &[0, 1], &kl, &reg, &ce).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - -(0.25f64.ln() + 0.75f64.ln()) / 2.0).abs() < 1e-12);
        assert!(rec_loss(&t1(&[1.0]), &[], &kl, &reg, &cfg).is_err());
    }

    #[test]
    fn ranking_rules() {
        let ids = [EntityId(4), EntityId(1), EntityId(7)];
        assert_eq!(rank_items(&[0.1, 0.7, 0.2], &ids, 1), vec![(EntityId(1), 0.7)]);
        let tied = rank_items(&[0.5, 0.2, 0.5], &ids, 1);
        assert_eq!(tied[0].0, EntityId(4));
        let all = rank_items(&[0.5, 0.2, 0.5], &ids, 10);
        assert_eq!(all.iter().map(|x| x.0).collect::<Vec<_>>(), vec![EntityId(4), EntityId(7), EntityId(1)]);
    }

    #[test]
    fn elbo_equals_likelihood_when_q_is_p_and_likelihood_is_flat() {
        let q = [RelationDistribution::new(0.3), RelationDistribution::new(0.8)];
        let e = exact_elbo(&q, &q, |_| Ok(-1.25), 1e-10).unwrap();
        assert!((e - -1.25).abs() < 1e-12);
        let mut rng = seeded_rng(1, "elbo", 0);
        let e = elbo_estimate(&q, &q, |_| Ok(-1.25), 16, &Config::default(), &mut rng).unwrap();
        assert!((e - -1.25).abs() < 1e-12);
    }

    #[test]
    fn subgraph_enumeration() {
        let all: Vec<_> = all_subgraphs(2).collect();
        assert_eq!(all, vec![vec![false, false], vec![true, false], vec![false, true], vec![true, true]]);
    }

    proptest! {
        #[test]
        fn ranking_invariant_under_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 1..12), m in 1usize..15) {
            let ids: Vec<EntityId> = (0..scores.len() as u32).map(EntityId).collect();
            let a: Vec<EntityId> = rank_items(&scores, &ids, m).into_iter().map(|x| x.0).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            let b: Vec<EntityId> = rank_items(&mapped, &ids, m).into_iter().map(|x| x.0).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scores_are_a_distribution(
            e_u in prop::collection::vec(-2.0f64..2.0, 3),
            items in prop::collection::vec(-2.0f64..2.0, 12),
            mass in prop::collection::vec(0.0f64..3.0, 4),
            alpha in 0.0f64..=1.0,
        ) {
            let s = recommend_scores(&t1(&e_u), &Tensor::from_vec(items, (4, 3), &Device::Cpu).unwrap(), &t1(&mass), alpha).unwrap();
            let s = v(&s);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(s.iter().all(|&x| x >= 0.0));
        }
    }
}
