//! Recall@m for rankings; Distinct-n and ROUGE for generated text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::config::RougeVariant;
use crate::corpus::EntityId;

/// Fraction of (example, gold item) pairs whose item is in the top `m`.
/// Examples without gold items are skipped; no pairs at all gives 0.
pub fn recall_at_k(rankings: &[Vec<EntityId>], gold: &[Vec<EntityId>], m: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (ranking, gold) in rankings.iter().zip(gold) {
        let top = &ranking[..m.min(ranking.len())];
        for g in gold {
            total += 1;
            if top.contains(g) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn ngrams<T: Clone>(tokens: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    let count = if n == 0 || tokens.len() < n { 0 } else { tokens.len() - n + 1 };
    (0..count).map(move |i| &tokens[i..i + n])
}

/// Unique over total n-grams pooled across all responses; 0 for an empty pool.
pub fn distinct_n<T: Clone + Eq + Hash>(responses: &[Vec<T>], n: usize) -> f64 {
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

fn counts<T: Clone + Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut map = HashMap::new();
    for g in ngrams(tokens, n) {
        *map.entry(g).or_insert(0) += 1;
    }
    map
}

/// `(clipped overlap, generated n-grams, reference n-grams)`.
fn overlap<T: Clone + Eq + Hash>(generated: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let gen = counts(generated, n);
    let reference_counts = counts(reference, n);
    let hit = reference_counts
        .iter()
        .map(|(g, &c)| c.min(gen.get(g).copied().unwrap_or(0)))
        .sum();
    (hit, gen.values().sum(), reference_counts.values().sum())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn score(hit: usize, gen_total: usize, ref_total: usize, variant: RougeVariant) -> f64 {
    let recall = if ref_total == 0 { 0.0 } else { hit as f64 / ref_total as f64 };
    match variant {
        RougeVariant::Recall => recall,
        RougeVariant::F1 => {
            let precision = if gen_total == 0 { 0.0 } else { hit as f64 / gen_total as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

/// ROUGE-1/2/L per pair, averaged over pairs with a non-empty reference.
pub fn rouge_scores<T: Clone + Eq + Hash>(
    generated: &[Vec<T>],
    references: &[Vec<T>],
    variant: RougeVariant,
) -> RougeScores {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (g, r) in generated.iter().zip(references) {
        if r.is_empty() {
            continue;
        }
        count += 1;
        for (slot, n) in [(0, 1), (1, 2)] {
            let (hit, gt, rt) = overlap(g, r, n);
            sum[slot] += score(hit, gt, rt, variant);
        }
        sum[2] += score(lcs_len(g, r), g.len(), r.len(), variant);
    }
    let avg = |x: f64| if count == 0 { 0.0 } else { x / count as f64 };
    RougeScores {
        rouge1: avg(sum[0]),
        rouge2: avg(sum[1]),
        rouge_l: avg(sum[2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    /// Keys `1`, `10`, `50`.
    pub recall: BTreeMap<String, f64>,
    /// Keys `3`, `4`.
    pub distinct: BTreeMap<String, f64>,
    /// Keys `1`, `2`, `l`.
    pub rouge: BTreeMap<String, f64>,
    pub rouge_variant: RougeVariant,
    pub example_count: usize,
    pub rec_example_count: usize,
    /// Mean per-token perplexity of gold responses, when a decoder was trained.
    pub perplexity: Option<f64>,
}

impl EvalReport {
    pub fn new(
        split: &str,
        rankings: &[Vec<EntityId>],
        gold: &[Vec<EntityId>],
        generated: &[Vec<String>],
        references: &[Vec<String>],
        variant: RougeVariant,
    ) -> Self {
        let recall = [1, 10, 50]
            .iter()
            .map(|&m| (m.to_string(), recall_at_k(rankings, gold, m)))
            .collect();
        let distinct = [3, 4].iter().map(|&n| (n.to_string(), distinct_n(generated, n))).collect();
        let r = rouge_scores(generated, references, variant);
        let rouge = [("1", r.rouge1), ("2", r.rouge2), ("l", r.rouge_l)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        EvalReport {
            split: split.to_string(),
            recall,
            distinct,
            rouge,
            rouge_variant: variant,
            example_count: generated.len(),
            rec_example_count: gold.iter().filter(|g| !g.is_empty()).count(),
            perplexity: None,
        }
    }

    /// Checks that every metric lies in `[0, 1]` and every key is present.
    pub fn validate(&self) -> Result<(), String> {
        let need = [
            (&self.recall, &["1", "10", "50"][..]),
            (&self.distinct, &["3", "4"][..]),
            (&self.rouge, &["1", "2", "l"][..]),
        ];
        for (map, keys) in need {
            for k in keys {
                let v = map.get(*k).ok_or_else(|| format!("missing metric key `{k}`"))?;
                if !(0.0..=1.0).contains(v) {
                    return Err(format!("metric `{k}` = {v} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn ids(v: &[u32]) -> Vec<EntityId> {
        v.iter().map(|&i| EntityId(i)).collect()
    }

    #[test]
    fn recall_cases() {
        let rank: Vec<EntityId> = ids(&(0..100).collect::<Vec<_>>());
        assert_eq!(recall_at_k(&[rank.clone()], &[ids(&[0])], 1), 1.0);
        assert_eq!(recall_at_k(&[rank.clone()], &[ids(&[70])], 50), 0.0);
        let gold = vec![ids(&[0]), ids(&[4]), ids(&[10]), ids(&[59])];
        assert_eq!(recall_at_k(&vec![rank.clone(); 4], &gold, 10), 0.5);
        assert_eq!(recall_at_k(&[rank], &[vec![]], 10), 0.0);
    }

    #[test]
    fn distinct_cases() {
        assert_eq!(distinct_n(&[toks("a b c d")], 3), 1.0);
        assert_eq!(distinct_n(&[toks("a a a a")], 3), 0.5);
        assert_eq!(distinct_n::<String>(&[], 3), 0.0);
        assert_eq!(distinct_n(&[toks("a b")], 3), 0.0);
    }

    #[test]
    fn rouge_cases() {
        let same = rouge_scores(&[toks("the cat sat")], &[toks("the cat sat")], RougeVariant::Recall);
        assert_eq!(same, RougeScores { rouge1: 1.0, rouge2: 1.0, rouge_l: 1.0 });
        let none = rouge_scores(&[toks("a b")], &[toks("c d")], RougeVariant::Recall);
        assert_eq!(none, RougeScores { rouge1: 0.0, rouge2: 0.0, rouge_l: 0.0 });
        let r = rouge_scores(&[toks("the cat sat")], &[toks("the cat slept")], RougeVariant::Recall);
        assert_eq!(r.rouge1, 2.0 / 3.0);
        assert_eq!(r.rouge2, 1.0 / 2.0);
        assert_eq!(r.rouge_l, 2.0 / 3.0);
        let f = rouge_scores(&[toks("the cat")], &[toks("the cat slept")], RougeVariant::F1);
        assert!((f.rouge1 - 0.8).abs() < 1e-12);
        let skipped = rouge_scores(&[toks("x"), toks("a")], &[vec![], toks("a")], RougeVariant::Recall);
        assert_eq!(skipped.rouge1, 1.0);
    }

    #[test]
    fn report_keys_and_bounds() {
        let r = EvalReport::new(
            "train",
            &[ids(&[1, 2])],
            &[ids(&[2])],
            &[toks("a b c d")],
            &[toks("a b c")],
            RougeVariant::Recall,
        );
        assert_eq!(r.recall["1"], 0.0);
        assert_eq!(r.recall["10"], 1.0);
        r.validate().unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["rouge"]["l"].is_number());
    }

    proptest! {
        #[test]
        fn recall_monotone_in_m(
            rankings in prop::collection::vec(Just((0u32..30).collect::<Vec<_>>()).prop_shuffle(), 1..6),
            gold in prop::collection::vec(prop::collection::vec(0u32..30, 0..3), 6),
        ) {
            let r: Vec<Vec<EntityId>> = rankings.iter().map(|v| ids(v)).collect();
            let g: Vec<Vec<EntityId>> = gold[..r.len()].iter().map(|v| ids(v)).collect();
            let a = recall_at_k(&r, &g, 1);
            let b = recall_at_k(&r, &g, 10);
            let c = recall_at_k(&r, &g, 50);
            prop_assert!(a <= b && b <= c && c <= 1.0 && a >= 0.0);
        }

        #[test]
        fn distinct_is_order_invariant(mut resp in prop::collection::vec(prop::collection::vec(0u8..4, 0..8), 0..6)) {
            let a = distinct_n(&resp, 3);
            resp.reverse();
            prop_assert_eq!(a, distinct_n(&resp, 3));
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn rouge_bounded(g in prop::collection::vec(0u8..5, 0..8), r in prop::collection::vec(0u8..5, 1..8)) {
            for v in [RougeVariant::Recall, RougeVariant::F1] {
                let s = rouge_scores(&[g.clone()], &[r.clone()], v);
                for x in [s.rouge1, s.rouge2, s.rouge_l] {
                    prop_assert!((0.0..=1.0).contains(&x));
                }
            }
        }
    }
}
