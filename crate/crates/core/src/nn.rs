//! Small neural building blocks over `candle-core` tensors, all in `f64`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names in a `BTreeMap`,
//! so initialization order, checkpoint layout and optimizer slot order are
//! deterministic for a given seed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

/// Additive attention mask value; `exp` of it underflows to exactly zero.
pub const MASKED: f64 = -1e9;

/// A reproducible RNG for a named stream (e.g. `"rec"`, epoch 3).
pub fn seeded_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the stream name keeps streams independent without a hasher dependency.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mixed = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)`.
    Uniform(f64),
}

#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Dimension(format!("{name}: have {:?}, requested {shape:?}", v.dims())));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// Copies every `from.*` value onto the matching `to.*` parameter.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<()> {
        for (name, var) in self.with_prefix(from) {
            let target = format!("{to}{}", &name[from.len()..]);
            let dst = self
                .vars
                .get(&target)
                .ok_or_else(|| Error::Dimension(format!("no parameter `{target}` to tie with `{name}`")))?;
            dst.set(var.as_tensor())?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw values of the parameters under `prefixes`.
    pub fn fingerprint(&self, prefixes: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            for x in var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites parameter values from a file; names and shapes must match exactly.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.assign(&loaded, "")
    }

    /// Assigns the tensors whose names start with `prefix`; every such store
    /// entry must be present in `loaded`.
    pub fn assign(&self, loaded: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.with_prefix(prefix) {
            let t = loaded
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DTYPE)?)?;
        }
        if prefix.is_empty() {
            if let Some(extra) = loaded.keys().find(|k| !self.vars.contains_key(*k)) {
                return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
            }
        }
        Ok(())
    }
}

/// Scoped view for declaring parameters under a dotted prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Builder<'_> {
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix: format!("{}{name}.", self.prefix),
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}{name}", self.prefix);
        self.store.var(&full, shape, init, self.rng)
    }
}

/// `y = x W (+ b)` with `W` stored as `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = b.var("weight", &[input, output], Init::Uniform(bound))?;
        let bias = if bias {
            Some(b.var("bias", &[output], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// Accepts a vector (`in`) or a row matrix (`n x in`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 1 {
            x.unsqueeze(0)?.matmul(&self.weight)?.squeeze(0)?
        } else {
            x.matmul(&self.weight)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.var("gain", &[dim], Init::Ones)?,
            shift: b.var("shift", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.shift)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(b: &mut Builder, rows: usize, dim: usize) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Embedding {
            table: b.var("table", &[rows, dim], Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(ids, self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(max(p, eps))`, elementwise.
pub fn clamped_log(p: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(p.maximum(eps)?.log()?)
}

/// Lower-triangular additive mask: 0 where `j <= i`, [`MASKED`] above.
pub fn causal_mask(len: usize, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { MASKED }))
        .collect();
    Ok(Tensor::from_vec(data, (len, len), device)?)
}

/// Additive key mask for padded key rows.
pub fn key_mask(valid: &[bool], queries: usize, device: &Device) -> Result<Tensor> {
    let row: Vec<f64> = valid.iter().map(|&v| if v { 0.0 } else { MASKED }).collect();
    Ok(Tensor::from_vec(row, (1, valid.len()), device)?.broadcast_as((queries, valid.len()))?.contiguous()?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Dimension(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(&mut b.pp("query"), dim, dim, true)?,
            key: Linear::new(&mut b.pp("key"), dim, dim, true)?,
            value: Linear::new(&mut b.pp("value"), dim, dim, true)?,
            out: Linear::new(&mut b.pp("out"), dim, dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (len, dim) = x.dims2()?;
        Ok(x.reshape((len, self.heads, dim / self.heads))?.transpose(0, 1)?.contiguous()?)
    }

    /// Attention weights, `heads x Lq x Lk`.
    pub fn weights(&self, queries: &Tensor, keys: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_, dim) = queries.dims2()?;
        let scale = 1.0 / ((dim / self.heads) as f64).sqrt();
        let q = self.split(&self.query.forward(queries)?)?;
        let k = self.split(&self.key.forward(keys)?)?;
        let mut scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        softmax_last(&scores)
    }

    /// `queries: Lq x d`, `keys: Lk x d`, optional additive `Lq x Lk` mask.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (lq, dim) = queries.dims2()?;
        let att = self.weights(queries, keys, mask)?;
        let v = self.split(&self.value.forward(keys)?)?;
        let ctx = att.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((lq, dim))?;
        self.out.forward(&ctx)
    }
}

/// Position-wise `Linear -> ReLU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(&mut b.pp("up"), dim, hidden, true)?,
            down: Linear::new(&mut b.pp("down"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Learning rate of the inverse-square-root warm-up schedule; peaks at
/// `step == warmup`.
pub fn warmup_lr(factor: f64, d_model: usize, warmup: usize, step: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    factor * (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

struct Slot {
    name: String,
    var: Var,
    group: usize,
    m: Tensor,
    v: Tensor,
}

/// Adam with one learning rate per parameter group.
pub struct Adam {
    slots: Vec<Slot>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var, usize)>) -> Result<Self> {
        let slots = params
            .into_iter()
            .map(|(name, var, group)| {
                let m = var.as_tensor().zeros_like()?;
                let v = m.clone();
                Ok(Slot { name, var, group, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Adam {
            slots,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore, group_lrs: &[f64]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else { continue };
            let lr = group_lrs[slot.group];
            // Gradients of leaves can still carry graph edges to other variables.
            let g = g.detach();
            slot.m = ((&slot.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            slot.v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&slot.m / c1)?;
            let v_hat = (&slot.v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (slot.var.as_tensor() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for s in &self.slots {
            map.insert(format!("m.{}", s.name), s.m.clone());
            map.insert(format!("v.{}", s.name), s.v.clone());
        }
        map.insert("step".to_string(), Tensor::new(&[self.step as f64], &Device::Cpu)?);
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{k}`")));
        for s in &mut self.slots {
            s.m = get(&format!("m.{}", s.name))?;
            s.v = get(&format!("v.{}", s.name))?;
        }
        self.step = get("step")?.to_vec1::<f64>()?[0] as u64;
        Ok(())
    }
}

/// Reads a rank-1 tensor.
pub fn vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_softmax() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-5.0, 0.0, 700.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        let lp = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for (row, lrow) in p.iter().zip(&lp) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in row.iter().zip(lrow) {
                assert!((a.ln().max(-700.0) - b.max(-700.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warmup_peaks_at_warmup_step() {
        let peak = warmup_lr(0.5, 768, 2000, 2000);
        for s in [1, 10, 1999, 2001, 5000] {
            assert!(warmup_lr(0.5, 768, 2000, s) < peak);
        }
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_mask(3, &Device::Cpu).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(m[0], vec![0.0, MASKED, MASKED]);
        assert_eq!(m[2], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn adam_moves_against_gradient_and_round_trips() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1, "t", 0);
        let w = store.var("w", &[2], Init::Uniform(1.0), &mut rng).unwrap();
        let before = vec1(&w).unwrap();
        let vars: Vec<_> = store.iter().map(|(n, v)| (n.clone(), v.clone(), 0)).collect();
        let mut adam = Adam::new(vars).unwrap();
        let loss = w.sum_all().unwrap();
        adam.step(&loss.backward().unwrap(), &[0.1]).unwrap();
        let after = vec1(&w).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b - 0.1).abs() < 1e-6);
        }
        let dir = tempfile::tempdir().unwrap();
        adam.save(&dir.path().join("o.safetensors")).unwrap();
        let vars: Vec<_> = store.iter().map(|(n, v)| (n.clone(), v.clone(), 0)).collect();
        let mut other = Adam::new(vars).unwrap();
        other.load(&dir.path().join("o.safetensors")).unwrap();
        assert_eq!(other.steps_taken(), 1);
    }

    #[test]
    fn seeded_streams_differ_and_repeat() {
        let a: u64 = seeded_rng(1, "a", 0).random();
        let a2: u64 = seeded_rng(1, "a", 0).random();
        let b: u64 = seeded_rng(1, "b", 0).random();
        let a1: u64 = seeded_rng(1, "a", 1).random();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(a, a1);
    }
}
