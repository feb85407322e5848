//! The reader model: a miniature encoder-decoder transformer arranged as a
//! fusion-in-decoder reader. Each passage is encoded independently; the
//! decoder cross-attends over the concatenation of all encoded passages
//! (or over a selected subset of positions).

mod checkpoint;
mod decode;
mod encode;
pub(crate) mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use decode::{
    decode_logits, decode_logits_with_attention, decoder_graph, teacher_forced_logits, Kept,
    MemoryView,
};
pub use encode::{
    bank_from_graph, encode_all, encode_all_graph, encode_passage, BankNodes, EncoderBank,
};

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};

/// Model hyperparameters. `max_passage_len` is the per-passage input
/// budget N; formatted inputs longer than N are truncated upstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub max_passage_len: usize,
    pub max_decode_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 256,
            max_passage_len: 64,
            max_decode_len: 32,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_passage_len == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named parameter array. `decay` marks tensors subject to weight
/// decay (norm gains and scalar biases are exempt).
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub decay: bool,
}

/// Flat registry of all trainable parameters with stable ordering.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>, decay: bool) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!self.by_name.contains_key(name), "duplicate param {name}");
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            decay,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        &self.entries[self.by_name[name]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// The reader: config plus every parameter (transformer, span scorer and
/// rerank head share one registry so a single optimizer covers them all).
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Random initialization: normal(0, 0.02) weights, unit norm gains,
    /// zero scalar biases. Residual output projections (attention `wo`,
    /// ffn `w2`) start at zero so every block begins as the identity; the
    /// output head is tied to the token embedding.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::default();
        let d = config.d_model;
        let f = config.ffn_dim;
        let v = config.vocab_size;
        let mat = |p: &mut ParamSet, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..r * c).map(|_| gauss(rng) * 0.02).collect();
            p.push(name, &[r, c], data, true);
        };
        let zeros = |p: &mut ParamSet, name: &str, r: usize, c: usize| {
            p.push(name, &[r, c], vec![0.0; r * c], true);
        };
        mat(&mut p, "tok_emb", v, d, rng);
        mat(&mut p, "enc_pos", config.max_passage_len, d, rng);
        mat(&mut p, "dec_pos", config.max_decode_len + 1, d, rng);
        for l in 0..config.n_enc_layers {
            for w in ["wq", "wk", "wv"] {
                mat(&mut p, &format!("enc{l}.att.{w}"), d, d, rng);
            }
            zeros(&mut p, &format!("enc{l}.att.wo"), d, d);
            p.push(&format!("enc{l}.ln1.gain"), &[d], vec![1.0; d], false);
            mat(&mut p, &format!("enc{l}.ffn.w1"), d, f, rng);
            zeros(&mut p, &format!("enc{l}.ffn.w2"), f, d);
            p.push(&format!("enc{l}.ln2.gain"), &[d], vec![1.0; d], false);
        }
        p.push("enc.ln_final.gain", &[d], vec![1.0; d], false);
        for l in 0..config.n_dec_layers {
            for w in ["wq", "wk", "wv"] {
                mat(&mut p, &format!("dec{l}.self.{w}"), d, d, rng);
            }
            zeros(&mut p, &format!("dec{l}.self.wo"), d, d);
            p.push(&format!("dec{l}.ln1.gain"), &[d], vec![1.0; d], false);
            for w in ["wq", "wk", "wv"] {
                mat(&mut p, &format!("dec{l}.cross.{w}"), d, d, rng);
            }
            zeros(&mut p, &format!("dec{l}.cross.wo"), d, d);
            p.push(&format!("dec{l}.ln2.gain"), &[d], vec![1.0; d], false);
            mat(&mut p, &format!("dec{l}.ffn.w1"), d, f, rng);
            zeros(&mut p, &format!("dec{l}.ffn.w2"), f, d);
            p.push(&format!("dec{l}.ln3.gain"), &[d], vec![1.0; d], false);
        }
        p.push("dec.ln_final.gain", &[d], vec![1.0; d], false);
        // span selection head
        mat(&mut p, "scorer.w_b", d, 1, rng);
        p.push("scorer.b_b", &[1], vec![0.0], false);
        mat(&mut p, "scorer.w_e", d, 1, rng);
        p.push("scorer.b_e", &[1], vec![0.0], false);
        // passage rerank head
        mat(&mut p, "rerank.w", d, 1, rng);
        p.push("rerank.b", &[1], vec![0.0], false);
        Ok(Self { config, params: p })
    }

    /// Refill every weight matrix with fresh noise (norm gains stay at
    /// their stored values). Tests use this where the zero-initialized
    /// residual projections would make a check vacuous.
    pub fn randomize(&mut self, std: f64, rng: &mut ChaCha8Rng) {
        for idx in 0..self.params.len() {
            let e = self.params.entry_mut(idx);
            if e.shape.len() == 2 {
                for v in e.data.iter_mut() {
                    *v = gauss(rng) * std;
                }
            }
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Binds parameters into one graph, memoizing so each parameter appears as
/// a single leaf no matter how often it is used. `tracked` decides whether
/// leaves receive gradients.
pub struct Bound<'a> {
    pub graph: Graph,
    pub model: &'a Model,
    slots: Vec<Option<TensorId>>,
    tracked: bool,
}

impl<'a> Bound<'a> {
    pub fn new(model: &'a Model, tracked: bool) -> Self {
        Self {
            graph: Graph::new(),
            slots: vec![None; model.params.len()],
            model,
            tracked,
        }
    }

    /// Tensor id of a named parameter inside this graph.
    pub fn p(&mut self, name: &str) -> Result<TensorId> {
        let idx = self
            .model
            .params
            .index(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))?;
        if let Some(id) = self.slots[idx] {
            return Ok(id);
        }
        let e = self.model.params.entry(idx);
        let id = if self.tracked {
            self.graph.param(&e.data, &e.shape)?
        } else {
            self.graph.input(&e.data, &e.shape)?
        };
        self.slots[idx] = Some(id);
        Ok(id)
    }

    /// Harvest parameter gradients after backward into `sink`, a per-param
    /// accumulator aligned with the model's registry.
    pub fn collect_grads(&self, sink: &mut [Vec<f64>]) {
        for (idx, slot) in self.slots.iter().enumerate() {
            if let Some(id) = slot {
                if let Some(g) = self.graph.grad(*id) {
                    let acc = &mut sink[idx];
                    if acc.is_empty() {
                        acc.resize(g.len(), 0.0);
                    }
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Fresh zeroed gradient accumulator matching `params`.
pub fn grad_sink(params: &ParamSet) -> Vec<Vec<f64>> {
    params.iter().map(|_| Vec::new()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bound_params_are_memoized() {
        let model = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut b = Bound::new(&model, true);
        let x = b.p("tok_emb").unwrap();
        let y = b.p("tok_emb").unwrap();
        assert_eq!(x, y);
        assert_eq!(b.graph.len(), 1);
    }
}
