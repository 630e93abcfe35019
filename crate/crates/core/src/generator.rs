//! Knowledge-enhanced transformer decoder with a copy mechanism.
//!
//! Each layer runs causal self-attention, attention over head entities,
//! attention over filtered tail entities, attention over the encoded
//! context, then a feed-forward block; every sublayer is residual plus layer
//! norm. An empty entity matrix skips its sublayer.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::vocab::{END, RESERVED, START};
use crate::corpus::EntityId;
use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, clamped_log, sigmoid, softmax_last, Builder, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, DTYPE,
};

/// Head and filtered-tail entity rows, `n x d_ent`; either may have zero rows.
#[derive(Debug, Clone)]
pub struct KnowledgeMatrices {
    pub heads: Tensor,
    pub tails: Tensor,
    pub head_ids: Vec<EntityId>,
    pub tail_ids: Vec<EntityId>,
}

impl KnowledgeMatrices {
    pub fn empty(d_ent: usize) -> Result<Self> {
        let z = Tensor::zeros((0, d_ent), DTYPE, &Device::Cpu)?;
        Ok(KnowledgeMatrices {
            heads: z.clone(),
            tails: z,
            head_ids: vec![],
            tail_ids: vec![],
        })
    }
}

/// Frozen per-turn inputs to the decoder.
#[derive(Debug, Clone)]
pub struct DecodeInputs {
    pub knowledge: KnowledgeMatrices,
    /// Encoded context tokens, `S x width`.
    pub context: Tensor,
    /// Vocabulary id of every context row.
    pub context_ids: Vec<u32>,
    /// Vocabulary ids of the filtered tail entities' names.
    pub tail_name_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub head_attn: MultiHeadAttention,
    pub head_norm: LayerNorm,
    pub tail_attn: MultiHeadAttention,
    pub tail_norm: LayerNorm,
    pub ctx_attn: MultiHeadAttention,
    pub ctx_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new(b: &mut Builder, width: usize, heads: usize) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(&mut b.pp("self_attn"), width, heads)?,
            self_norm: LayerNorm::new(&mut b.pp("self_norm"), width)?,
            head_attn: MultiHeadAttention::new(&mut b.pp("head_attn"), width, heads)?,
            head_norm: LayerNorm::new(&mut b.pp("head_norm"), width)?,
            tail_attn: MultiHeadAttention::new(&mut b.pp("tail_attn"), width, heads)?,
            tail_norm: LayerNorm::new(&mut b.pp("tail_norm"), width)?,
            ctx_attn: MultiHeadAttention::new(&mut b.pp("ctx_attn"), width, heads)?,
            ctx_norm: LayerNorm::new(&mut b.pp("ctx_norm"), width)?,
            ffn: FeedForward::new(&mut b.pp("ffn"), width, 4 * width)?,
            ffn_norm: LayerNorm::new(&mut b.pp("ffn_norm"), width)?,
        })
    }

    /// `c: L x w`; `n_h`, `n_t` already projected to the model width.
    pub fn forward(&self, c: &Tensor, n_h: &Tensor, n_t: &Tensor, x: &Tensor) -> Result<Tensor> {
        let len = c.dims2()?.0;
        let mask = causal_mask(len, &Device::Cpu)?;
        let a0 = self.self_norm.forward(&(c + self.self_attn.forward(c, c, Some(&mask))?)?)?;
        let a1 = cross(&self.head_attn, &self.head_norm, &a0, n_h)?;
        let a2 = cross(&self.tail_attn, &self.tail_norm, &a1, n_t)?;
        let a3 = cross(&self.ctx_attn, &self.ctx_norm, &a2, x)?;
        self.ffn_norm.forward(&(&a3 + self.ffn.forward(&a3)?)?)
    }
}

fn cross(attn: &MultiHeadAttention, norm: &LayerNorm, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
    if kv.dims2()?.0 == 0 {
        return Ok(q.clone());
    }
    norm.forward(&(q + attn.forward(q, kv, None)?)?)
}

/// `gate * gen + (1 - gate) * copy`, where `copy` scatters the `L x S`
/// source weights onto the `S` source token ids. `gate` is `L x 1`.
pub fn copy_mix(gen: &Tensor, copy_weights: &Tensor, source_ids: &[u32], gate: &Tensor) -> Result<Tensor> {
    let (rows, vocab) = gen.dims2()?;
    if source_ids.is_empty() {
        return Ok(gen.clone());
    }
    if copy_weights.dims2()? != (rows, source_ids.len()) {
        return Err(Error::Dimension(format!(
            "copy weights {:?} for {rows} rows and {} sources",
            copy_weights.dims(),
            source_ids.len()
        )));
    }
    if let Some(&bad) = source_ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::Dimension(format!("source token {bad} outside a vocabulary of {vocab}")));
    }
    let ids = Tensor::new(source_ids, &Device::Cpu)?;
    let copied = Tensor::zeros((rows, vocab), DTYPE, &Device::Cpu)?.index_add(&ids, copy_weights, 1)?;
    let keep = gate.broadcast_as((rows, vocab))?;
    Ok(((gen * &keep)? + (copied * (1.0 - keep)?)?)?)
}

/// `-(1/L) sum_j log dist[j, target_j]`.
pub fn gen_loss(dists: &Tensor, targets: &[u32], eps: f64) -> Result<Tensor> {
    let (rows, vocab) = dists.dims2()?;
    if rows != targets.len() || rows == 0 {
        return Err(Error::Dimension(format!("{rows} distributions for {} targets", targets.len())));
    }
    let flat_idx: Vec<u32> = targets
        .iter()
        .enumerate()
        .map(|(j, &t)| (j * vocab) as u32 + t)
        .collect();
    let picked = dists.flatten_all()?.index_select(&Tensor::new(flat_idx.as_slice(), &Device::Cpu)?, 0)?;
    Ok(clamped_log(&picked, eps)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub tokens: Embedding,
    pub positions: Embedding,
    pub ent_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub out: Linear,
    pub gate: Linear,
    pub copy_query: Linear,
    width: usize,
    max_positions: usize,
    vocab: usize,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &Config, vocab: usize) -> Result<Self> {
        let width = cfg.ctx_dim;
        let max_positions = cfg.max_len + 1;
        Ok(Decoder {
            tokens: Embedding::new(&mut b.pp("tokens"), vocab, width)?,
            positions: Embedding::new(&mut b.pp("positions"), max_positions, width)?,
            ent_proj: Linear::new(&mut b.pp("ent_proj"), cfg.ent_dim, width, true)?,
            layers: (0..cfg.dec_layers)
                .map(|l| DecoderLayer::new(&mut b.pp(&format!("layer{l}")), width, cfg.dec_heads))
                .collect::<Result<Vec<_>>>()?,
            out: Linear::new(&mut b.pp("out"), width, vocab, true)?,
            gate: Linear::new(&mut b.pp("gate"), width, 1, true)?,
            copy_query: Linear::new(&mut b.pp("copy_query"), width, width, false)?,
            width,
            max_positions,
            vocab,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Longest token prefix the decoder can condition on.
    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn project(&self, m: &Tensor) -> Result<Tensor> {
        if m.dims2()?.0 == 0 {
            return Ok(Tensor::zeros((0, self.width), DTYPE, &Device::Cpu)?);
        }
        self.ent_proj.forward(m)
    }

    /// Token plus position embeddings of a prefix.
    pub fn embed(&self, prefix: &[u32]) -> Result<Tensor> {
        if prefix.is_empty() || prefix.len() > self.max_positions {
            return Err(Error::Dimension(format!(
                "prefix of {} tokens (limit {})",
                prefix.len(),
                self.max_positions
            )));
        }
        let pos: Vec<u32> = (0..prefix.len() as u32).collect();
        Ok((self.tokens.forward(prefix)? + self.positions.forward(&pos)?)?)
    }

    /// Output of every layer for an embedded prefix, each `L x w`.
    pub fn layer_states(&self, embedded: &Tensor, inputs: &DecodeInputs) -> Result<Vec<Tensor>> {
        let n_h = self.project(&inputs.knowledge.heads)?;
        let n_t = self.project(&inputs.knowledge.tails)?;
        let mut c = embedded.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            c = layer.forward(&c, &n_h, &n_t, &inputs.context)?;
            out.push(c.clone());
        }
        Ok(out)
    }

    /// Final decoder states for an embedded prefix, `L x w`.
    pub fn states(&self, embedded: &Tensor, inputs: &DecodeInputs) -> Result<Tensor> {
        match self.layer_states(embedded, inputs)?.pop() {
            Some(c) => Ok(c),
            None => Ok(embedded.clone()),
        }
    }

    /// Copy sources: non-reserved context rows and tail-name tokens.
    fn sources(&self, inputs: &DecodeInputs) -> Result<(Tensor, Vec<u32>)> {
        let reserved = RESERVED.len() as u32;
        let ctx_rows: Vec<u32> = (0..inputs.context_ids.len() as u32)
            .filter(|&i| inputs.context_ids[i as usize] >= reserved)
            .collect();
        let mut ids: Vec<u32> = ctx_rows.iter().map(|&i| inputs.context_ids[i as usize]).collect();
        let mut parts = Vec::new();
        if !ctx_rows.is_empty() {
            parts.push(inputs.context.index_select(&Tensor::new(ctx_rows.as_slice(), &Device::Cpu)?, 0)?);
        }
        let names: Vec<u32> = inputs.tail_name_ids.iter().copied().filter(|&t| t >= reserved).collect();
        if !names.is_empty() {
            parts.push(self.tokens.forward(&names)?);
            ids.extend(&names);
        }
        if parts.is_empty() {
            return Ok((Tensor::zeros((0, self.width), DTYPE, &Device::Cpu)?, ids));
        }
        Ok((Tensor::cat(&parts, 0)?, ids))
    }

    /// Per-position output distributions over the vocabulary, `L x V`.
    pub fn distributions(&self, prefix: &[u32], inputs: &DecodeInputs) -> Result<Tensor> {
        self.distributions_from(&self.embed(prefix)?, inputs)
    }

    pub fn distributions_from(&self, embedded: &Tensor, inputs: &DecodeInputs) -> Result<Tensor> {
        let c = self.states(embedded, inputs)?;
        let gen = softmax_last(&self.out.forward(&c)?)?;
        let (src, ids) = self.sources(inputs)?;
        if ids.is_empty() {
            return Ok(gen);
        }
        let scale = 1.0 / (self.width as f64).sqrt();
        let copy_w = softmax_last(&(self.copy_query.forward(&c)?.matmul(&src.t()?)? * scale)?)?;
        let gate = sigmoid(&self.gate.forward(&c)?)?;
        copy_mix(&gen, &copy_w, &ids, &gate)
    }

    /// Teacher-forced input and target ids: `[START, w..]` and `[w.., END]`,
    /// truncated to the position budget.
    pub fn teacher_forcing(&self, response: &[u32]) -> (Vec<u32>, Vec<u32>) {
        let keep = response.len().min(self.max_positions - 1);
        let mut input = vec![START];
        input.extend_from_slice(&response[..keep]);
        let mut target = response[..keep].to_vec();
        target.push(END);
        (input, target)
    }

    pub fn loss(&self, response: &[u32], inputs: &DecodeInputs, eps: f64) -> Result<Tensor> {
        let (input, target) = self.teacher_forcing(response);
        gen_loss(&self.distributions(&input, inputs)?, &target, eps)
    }

    fn next_distribution(&self, prefix: &[u32], inputs: &DecodeInputs) -> Result<Vec<f64>> {
        let d = self.distributions(prefix, inputs)?;
        let last = d.dims2()?.0 - 1;
        Ok(d.get(last)?.to_vec1::<f64>()?)
    }

    /// Greedy decoding; the END token is not included in the output.
    pub fn generate_greedy(&self, inputs: &DecodeInputs, max_len: usize) -> Result<Vec<u32>> {
        let mut prefix = vec![START];
        let mut out = Vec::new();
        for _ in 0..max_len.min(self.max_positions) {
            let dist = self.next_distribution(&prefix, inputs)?;
            let best = argmax(&dist);
            if best == END {
                break;
            }
            out.push(best);
            prefix.push(best);
        }
        Ok(out)
    }

    /// Beam search over summed log-probabilities; ties prefer lower token ids.
    pub fn generate_beam(&self, inputs: &DecodeInputs, max_len: usize, width: usize) -> Result<Vec<u32>> {
        let width = width.max(1);
        let mut beams = vec![Beam {
            tokens: vec![],
            score: 0.0,
            done: false,
        }];
        for _ in 0..max_len.min(self.max_positions) {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut next = Vec::new();
            for beam in &beams {
                if beam.done {
                    next.push(beam.clone());
                    continue;
                }
                let mut prefix = vec![START];
                prefix.extend(&beam.tokens);
                let dist = self.next_distribution(&prefix, inputs)?;
                let mut order: Vec<u32> = (0..dist.len() as u32).collect();
                order.sort_by(|&a, &b| dist[b as usize].total_cmp(&dist[a as usize]).then(a.cmp(&b)));
                for &tok in order.iter().take(width) {
                    let score = beam.score + dist[tok as usize].max(1e-300).ln();
                    let mut tokens = beam.tokens.clone();
                    let done = tok == END;
                    if !done {
                        tokens.push(tok);
                    }
                    next.push(Beam { tokens, score, done });
                }
            }
            // stable sort keeps expansion order on score ties
            next.sort_by(|a, b| b.score.total_cmp(&a.score));
            next.truncate(width);
            beams = next;
        }
        Ok(beams.into_iter().next().map(|b| b.tokens).unwrap_or_default())
    }

    pub fn generate(&self, inputs: &DecodeInputs, cfg: &GenerateOptions) -> Result<Vec<u32>> {
        match cfg.mode {
            crate::config::DecodeMode::Greedy => self.generate_greedy(inputs, cfg.max_len),
            crate::config::DecodeMode::Beam => self.generate_beam(inputs, cfg.max_len, cfg.beam_width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub mode: crate::config::DecodeMode,
    pub beam_width: usize,
    pub max_len: usize,
}

impl GenerateOptions {
    pub fn from_config(cfg: &Config) -> Self {
        GenerateOptions {
            mode: cfg.mode,
            beam_width: cfg.beam_width,
            max_len: cfg.max_len,
        }
    }
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<u32>,
    score: f64,
    done: bool,
}

fn argmax(dist: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DecodeMode;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::nn::{seeded_rng, ParamStore};

    fn cfg() -> Config {
        Config {
            ent_dim: 4,
            ctx_dim: 8,
            dec_layers: 2,
            dec_heads: 2,
            max_len: 6,
            ..Config::default()
        }
    }

    fn build(store: &mut ParamStore, cfg: &Config, vocab: usize, seed: u64) -> Decoder {
        let mut rng = seeded_rng(seed, "decoder-test", 0);
        let mut b = Builder::new(store, &mut rng);
        Decoder::new(&mut b.pp("decoder"), cfg, vocab).unwrap()
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = seeded_rng(seed, "m", 0);
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (rows, cols), &Device::Cpu).unwrap()
    }

    fn inputs(cfg: &Config, heads: usize, tails: usize) -> DecodeInputs {
        DecodeInputs {
            knowledge: KnowledgeMatrices {
                heads: rand_matrix(heads, cfg.ent_dim, 1),
                tails: rand_matrix(tails, cfg.ent_dim, 2),
                head_ids: (0..heads as u32).map(EntityId).collect(),
                tail_ids: (0..tails as u32).map(EntityId).collect(),
            },
            context: rand_matrix(4, cfg.ctx_dim, 3),
            context_ids: vec![START, 7, 8, 9],
            tail_name_ids: vec![10],
        }
    }

    #[test]
    fn copy_mix_cases() {
        let gen = Tensor::new(&[[0.2f64, 0.3, 0.5]], &Device::Cpu).unwrap();
        let w = Tensor::new(&[[0.25f64, 0.75]], &Device::Cpu).unwrap();
        let g = |x: f64| Tensor::new(&[[x]], &Device::Cpu).unwrap();
        let out = copy_mix(&gen, &w, &[2, 0], &g(1.0)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out[0], vec![0.2, 0.3, 0.5]);

        let one = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        let out = copy_mix(&gen, &one, &[1], &g(0.0)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out[0], vec![0.0, 1.0, 0.0]);

        let out = copy_mix(&gen, &w, &[2, 0], &g(0.5)).unwrap().to_vec2::<f64>().unwrap();
        let want = [0.5 * 0.2 + 0.5 * 0.75, 0.5 * 0.3, 0.5 * 0.5 + 0.5 * 0.25];
        for (a, b) in out[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);

        // repeated source tokens accumulate
        let out = copy_mix(&gen, &w, &[1, 1], &g(0.0)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out[0], vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn loss_closed_forms() {
        let d = |rows: &[&[f64]]| {
            let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            Tensor::from_vec(flat, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
        };
        let l = |t: &Tensor, g: &[u32]| gen_loss(t, g, 1e-10).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l(&d(&[&[0.0, 1.0], &[1.0, 0.0]]), &[1, 0]), 0.0);
        assert!((l(&d(&[&[0.2; 5], &[0.2; 5]]), &[3, 1]) - 5f64.ln()).abs() < 1e-12);
        let fixture = d(&[&[0.5, 0.5, 0.0], &[0.25, 0.5, 0.25], &[0.0, 0.0, 1.0]]);
        assert!((l(&fixture, &[0, 2, 2]) - (2f64.ln() + 4f64.ln()) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn distributions_are_normalized() {
        let cfg = cfg();
        let mut store = ParamStore::new();
        let dec = build(&mut store, &cfg, 12, 1);
        for (h, t) in [(0, 0), (2, 0), (0, 3), (2, 3)] {
            let d = dec.distributions(&[START, 7, 11], &inputs(&cfg, h, t)).unwrap();
            for row in d.to_vec2::<f64>().unwrap() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn empty_knowledge_equals_plain_decoder_layer() {
        let cfg = cfg();
        let mut store = ParamStore::new();
        let dec = build(&mut store, &cfg, 12, 1);
        let layer = &dec.layers[0];
        let c = rand_matrix(3, 8, 4);
        let x = rand_matrix(5, 8, 5);
        let empty = Tensor::zeros((0, 8), DTYPE, &Device::Cpu).unwrap();
        let got = layer.forward(&c, &empty, &empty, &x).unwrap();
        let mask = causal_mask(3, &Device::Cpu).unwrap();
        let a0 = layer.self_norm.forward(&(&c + layer.self_attn.forward(&c, &c, Some(&mask)).unwrap()).unwrap()).unwrap();
        let a3 = layer.ctx_norm.forward(&(&a0 + layer.ctx_attn.forward(&a0, &x, None).unwrap()).unwrap()).unwrap();
        let want = layer.ffn_norm.forward(&(&a3 + layer.ffn.forward(&a3).unwrap()).unwrap()).unwrap();
        assert_eq!(got.to_vec2::<f64>().unwrap(), want.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn causality_through_all_layers() {
        let cfg = cfg();
        let mut store = ParamStore::new();
        let dec = build(&mut store, &cfg, 12, 1);
        let inp = inputs(&cfg, 2, 2);
        let emb = dec.embed(&[START, 5, 6, 7]).unwrap();
        let base = dec.distributions_from(&emb, &inp).unwrap().to_vec2::<f64>().unwrap();
        for j in 1..4 {
            let bump = Tensor::zeros((4, 8), DTYPE, &Device::Cpu)
                .unwrap()
                .slice_assign(&[j..j + 1, 0..8], &Tensor::ones((1, 8), DTYPE, &Device::Cpu).unwrap())
                .unwrap();
            let moved = dec.distributions_from(&(&emb + bump).unwrap(), &inp).unwrap().to_vec2::<f64>().unwrap();
            for row in 0..j {
                assert_eq!(base[row], moved[row], "row {row} changed when token {j} moved");
            }
            assert_ne!(base[j], moved[j]);
        }
    }

    #[test]
    fn single_head_attention_oracle() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1, "mha", 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let mha = MultiHeadAttention::new(&mut b.pp("a"), 2, 1).unwrap();
        let set = |n: &str, v: Tensor| store.get(n).unwrap().set(&v).unwrap();
        let eye = Tensor::eye(2, DTYPE, &Device::Cpu).unwrap();
        let zero = Tensor::zeros(2, DTYPE, &Device::Cpu).unwrap();
        for p in ["query", "key", "value", "out"] {
            set(&format!("a.{p}.weight"), eye.clone());
            set(&format!("a.{p}.bias"), zero.clone());
        }
        set("a.query.weight", Tensor::new(&[[2.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap());
        let q = Tensor::new(&[[1.0f64, 0.5]], &Device::Cpu).unwrap();
        let k = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let got = mha.forward(&q, &k, None).unwrap().to_vec2::<f64>().unwrap();
        let qq = [2.0, 0.5];
        let keys = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let s: Vec<f64> = keys.iter().map(|k| (qq[0] * k[0] + qq[1] * k[1]) / 2f64.sqrt()).collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        let a: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
        for c in 0..2 {
            let want: f64 = (0..3).map(|i| a[i] * keys[i][c]).sum();
            assert!((got[0][c] - want).abs() < 1e-5);
        }
    }

    #[test]
    fn greedy_matches_width_one_beam_and_is_reproducible() {
        let mut cfg = cfg();
        cfg.max_len = 5;
        let mut store = ParamStore::new();
        let dec = build(&mut store, &cfg, 12, 3);
        let inp = inputs(&cfg, 2, 1);
        let g = dec.generate_greedy(&inp, 5).unwrap();
        assert_eq!(g, dec.generate_beam(&inp, 5, 1).unwrap());
        let mut store2 = ParamStore::new();
        let dec2 = build(&mut store2, &cfg, 12, 3);
        assert_eq!(g, dec2.generate_greedy(&inp, 5).unwrap());
        let one = dec.generate_greedy(&inp, 1).unwrap();
        let step0 = argmax(&dec.next_distribution(&[START], &inp).unwrap());
        if step0 == END {
            assert!(one.is_empty());
        } else {
            assert_eq!(one, vec![step0]);
        }
        let opts = GenerateOptions {
            mode: DecodeMode::Beam,
            beam_width: 3,
            max_len: 5,
        };
        assert!(dec.generate(&inp, &opts).unwrap().len() <= 5);
    }

    #[test]
    fn copy_through_with_closed_gate() {
        let cfg = cfg();
        let mut store = ParamStore::new();
        let dec = build(&mut store, &cfg, 12, 1);
        // force gate -> 0 via a large negative bias
        store.get("decoder.gate.weight").unwrap().set(&Tensor::zeros((8, 1), DTYPE, &Device::Cpu).unwrap()).unwrap();
        store.get("decoder.gate.bias").unwrap().set(&Tensor::new(&[-1e3f64], &Device::Cpu).unwrap()).unwrap();
        let mut inp = inputs(&cfg, 1, 1);
        inp.context_ids = vec![START, START, START, START];
        inp.tail_name_ids = vec![11];
        let d = dec.distributions(&[START], &inp).unwrap().to_vec2::<f64>().unwrap();
        assert!((d[0][11] - 1.0).abs() < 1e-9);
        assert_eq!(dec.generate_greedy(&inp, 1).unwrap(), vec![11]);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = Config {
            ent_dim: 2,
            ctx_dim: 4,
            dec_layers: 2,
            dec_heads: 2,
            max_len: 4,
            ..Config::default()
        };
        let mut store = ParamStore::new();
        let dec = build(&mut store, &cfg, 9, 2);
        let inp = DecodeInputs {
            knowledge: KnowledgeMatrices {
                heads: rand_matrix(2, 2, 1),
                tails: rand_matrix(1, 2, 2),
                head_ids: vec![EntityId(0), EntityId(1)],
                tail_ids: vec![EntityId(2)],
            },
            context: rand_matrix(3, 4, 3),
            context_ids: vec![START, 6, 7],
            tail_name_ids: vec![8],
        };
        let report = check_gradients(
            &store,
            &["decoder."],
            GradCheckOptions {
                per_tensor: 3,
                ..Default::default()
            },
            || dec.loss(&[6, 8, 5], &inp, 1e-10),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
