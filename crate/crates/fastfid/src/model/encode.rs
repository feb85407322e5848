//! Per-passage encoding and the concatenated encoder memory.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::TensorId;
use crate::data::FormattedInput;
use crate::error::{Error, Result};
use crate::model::layers::{attention, ffn, full_mask, layer_norm, residual, AttnParams};
use crate::model::{Bound, Model};

/// Encoder output states for one question: K passages × N positions ×
/// d_model, row-major, with validity and selection-eligibility masks.
/// Padding positions hold zero states, are never attended and are never
/// eligible for span selection.
#[derive(Debug, Clone)]
pub struct EncoderBank {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    /// k*n*d state values; row (p*n + i) is position i of passage p.
    pub states: Vec<f64>,
    /// k*n flags, false on padding.
    pub valid: Vec<bool>,
    /// k*n flags, true only on passage-text tokens.
    pub eligible: Vec<bool>,
    /// Start index of each passage within the flattened memory.
    pub passage_offsets: Vec<usize>,
}

impl EncoderBank {
    /// Flattened memory length K×N (the full-memory context length).
    pub fn flat_len(&self) -> usize {
        self.k * self.n
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn n_eligible(&self) -> usize {
        self.eligible.iter().filter(|&&b| b).count()
    }

    /// Zero-state bank with explicit masks; accounting and view tests use
    /// this to avoid running the encoder.
    pub fn synthetic(k: usize, n: usize, d: usize, valid: Vec<bool>, eligible: Vec<bool>) -> Self {
        assert_eq!(valid.len(), k * n);
        assert_eq!(eligible.len(), k * n);
        Self {
            k,
            n,
            d,
            states: vec![0.0; k * n * d],
            valid,
            eligible,
            passage_offsets: (0..k).map(|p| p * n).collect(),
        }
    }
}

/// Encoder forward over the real tokens of one input; returns the [L, d]
/// state tensor inside the bound graph. Positions beyond L exist only as
/// padding in the bank and are never computed.
pub fn encode_tokens_graph(
    b: &mut Bound,
    ids: &[usize],
    train: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    if ids.is_empty() {
        return Err(Error::Input("cannot encode an empty token sequence".into()));
    }
    let cfg = b.model.config.clone();
    if ids.len() > cfg.max_passage_len {
        return Err(Error::Input(format!(
            "input of {} tokens exceeds max passage length {}",
            ids.len(),
            cfg.max_passage_len
        )));
    }
    let l = ids.len();
    let mut rng = rng;
    let tok = b.p("tok_emb")?;
    let pos = b.p("enc_pos")?;
    let te = b.graph.embed(ids, tok)?;
    let positions: Vec<usize> = (0..l).collect();
    let pe = b.graph.gather_rows(pos, Arc::new(positions))?;
    let mut x = b.graph.add(te, pe)?;
    if train && cfg.dropout > 0.0 {
        if let Some(r) = rng.as_deref_mut() {
            x = b.graph.dropout(x, cfg.dropout, r)?;
        }
    }
    let mask = full_mask(l, l);
    for layer in 0..cfg.n_enc_layers {
        let normed = layer_norm(b, x, &format!("enc{layer}.ln1.gain"))?;
        let att_p = AttnParams::bind(b, &format!("enc{layer}.att"))?;
        let att = attention(b, normed, normed, mask.clone(), &att_p, cfg.n_heads, None)?;
        x = residual(b, x, att, if train { cfg.dropout } else { 0.0 }, rng.as_deref_mut())?;
        let normed = layer_norm(b, x, &format!("enc{layer}.ln2.gain"))?;
        let f = ffn(b, normed, &format!("enc{layer}.ffn"))?;
        x = residual(b, x, f, if train { cfg.dropout } else { 0.0 }, rng.as_deref_mut())?;
    }
    layer_norm(b, x, "enc.ln_final.gain")
}

/// Encode one passage for inference: padded [N, d] states plus the
/// validity mask.
pub fn encode_passage(model: &Model, ids: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    let n = model.config.max_passage_len;
    let d = model.config.d_model;
    let mut b = Bound::new(model, false);
    let states = encode_tokens_graph(&mut b, ids, false, None)?;
    let l = ids.len();
    let mut out = vec![0.0; n * d];
    out[..l * d].copy_from_slice(b.graph.data(states));
    let mut valid = vec![false; n];
    valid[..l].fill(true);
    Ok((out, valid))
}

/// Per-passage encoder states inside one training graph, with the
/// concatenated memory over all real (non-padding) positions.
pub struct BankNodes {
    pub passages: Vec<TensorId>,
    pub lengths: Vec<usize>,
    /// Concatenation of all passage states: [sum(lengths), d].
    pub memory: TensorId,
    /// Eligibility per concatenated row.
    pub eligible: Vec<bool>,
    /// Eligibility per passage row (aligned with `passages`).
    pub eligible_per_passage: Vec<Vec<bool>>,
}

impl BankNodes {
    /// Concatenated-row index of (passage, position).
    pub fn concat_index(&self, passage: usize, pos: usize) -> usize {
        self.lengths[..passage].iter().sum::<usize>() + pos
    }
}

/// Encode all of a question's formatted inputs inside `b`'s graph.
pub fn encode_all_graph(
    b: &mut Bound,
    inputs: &[FormattedInput],
    train: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BankNodes> {
    if inputs.is_empty() {
        return Err(Error::Input("need at least one passage".into()));
    }
    let mut passages = Vec::with_capacity(inputs.len());
    let mut lengths = Vec::with_capacity(inputs.len());
    let mut eligible = Vec::new();
    let mut eligible_per_passage = Vec::with_capacity(inputs.len());
    for f in inputs {
        let states = encode_tokens_graph(b, &f.token_ids, train, rng.as_deref_mut())?;
        passages.push(states);
        lengths.push(f.len());
        let el = f.eligible_mask(f.len());
        eligible.extend_from_slice(&el);
        eligible_per_passage.push(el);
    }
    let memory = b.graph.concat_rows(&passages)?;
    Ok(BankNodes {
        passages,
        lengths,
        memory,
        eligible,
        eligible_per_passage,
    })
}

/// Encode all formatted inputs into a plain-data bank (inference path).
pub fn encode_all(model: &Model, inputs: &[FormattedInput]) -> Result<EncoderBank> {
    if inputs.is_empty() {
        return Err(Error::Input("need at least one passage".into()));
    }
    let n = model.config.max_passage_len;
    let d = model.config.d_model;
    let k = inputs.len();
    let mut states = vec![0.0; k * n * d];
    let mut valid = vec![false; k * n];
    let mut eligible = vec![false; k * n];
    for (p, f) in inputs.iter().enumerate() {
        let (s, v) = encode_passage(model, &f.token_ids)?;
        states[p * n * d..(p + 1) * n * d].copy_from_slice(&s);
        valid[p * n..(p + 1) * n].copy_from_slice(&v);
        eligible[p * n..(p + 1) * n].copy_from_slice(&f.eligible_mask(n));
    }
    Ok(EncoderBank {
        k,
        n,
        d,
        states,
        valid,
        eligible,
        passage_offsets: (0..k).map(|p| p * n).collect(),
    })
}

/// Read the current encoder state values out of a training graph into a
/// plain bank (used for no-gradient span selection during training).
pub fn bank_from_graph(b: &Bound, nodes: &BankNodes) -> EncoderBank {
    let model = b.model;
    let n = model.config.max_passage_len;
    let d = model.config.d_model;
    let k = nodes.passages.len();
    let mut states = vec![0.0; k * n * d];
    let mut valid = vec![false; k * n];
    let mut eligible = vec![false; k * n];
    for (p, (&id, &len)) in nodes.passages.iter().zip(&nodes.lengths).enumerate() {
        states[p * n * d..p * n * d + len * d].copy_from_slice(b.graph.data(id));
        valid[p * n..p * n + len].fill(true);
        let el = &nodes.eligible_per_passage[p];
        eligible[p * n..p * n + len].copy_from_slice(el);
    }
    EncoderBank {
        k,
        n,
        d,
        states,
        valid,
        eligible,
        passage_offsets: (0..k).map(|p| p * n).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 32,
            max_passage_len: 8,
            max_decode_len: 8,
            dropout: 0.0,
        };
        Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap()
    }

    fn fi(ids: Vec<usize>) -> FormattedInput {
        let n = ids.len();
        FormattedInput::from_parts(ids, 0, vec![(0, n - 1)])
    }

    #[test]
    fn full_length_input_has_all_true_mask() {
        let m = tiny_model();
        let (_, valid) = encode_passage(&m, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert!(valid.iter().all(|&b| b));
    }

    #[test]
    fn short_input_masks_padding() {
        let m = tiny_model();
        let (states, valid) = encode_passage(&m, &[1, 2, 3]).unwrap();
        assert_eq!(valid, vec![true, true, true, false, false, false, false, false]);
        // padding states are zero
        assert!(states[3 * 16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_errors() {
        let m = tiny_model();
        assert!(encode_passage(&m, &[]).is_err());
    }

    #[test]
    fn passages_encode_independently() {
        let m = tiny_model();
        let a = [1usize, 2, 3];
        let b = [4usize, 5, 6, 7];
        let (sa1, _) = encode_passage(&m, &a).unwrap();
        let (sb1, _) = encode_passage(&m, &b).unwrap();
        // reversed call order leaves each output unchanged
        let (sb2, _) = encode_passage(&m, &b).unwrap();
        let (sa2, _) = encode_passage(&m, &a).unwrap();
        assert_eq!(sa1, sa2);
        assert_eq!(sb1, sb2);
    }

    #[test]
    fn bank_flat_length_is_k_times_n() {
        let m = tiny_model();
        let inputs: Vec<FormattedInput> = (0..3).map(|i| fi(vec![i + 1, i + 2, i + 3])).collect();
        let bank = encode_all(&m, &inputs).unwrap();
        assert_eq!(bank.flat_len(), 3 * 8);
        assert_eq!(bank.passage_offsets, vec![0, 8, 16]);
    }

    #[test]
    fn k1_bank_equals_single_encode() {
        let m = tiny_model();
        let input = fi(vec![1, 2, 3, 4]);
        let bank = encode_all(&m, std::slice::from_ref(&input)).unwrap();
        let (states, valid) = encode_passage(&m, &input.token_ids).unwrap();
        assert_eq!(bank.states, states);
        assert_eq!(bank.valid, valid);
    }

    #[test]
    fn graph_bank_matches_inference_bank() {
        let m = tiny_model();
        let inputs: Vec<FormattedInput> = vec![fi(vec![1, 2, 3]), fi(vec![4, 5, 6, 7, 8])];
        let bank = encode_all(&m, &inputs).unwrap();
        let mut b = Bound::new(&m, true);
        let nodes = encode_all_graph(&mut b, &inputs, false, None).unwrap();
        let from_graph = bank_from_graph(&b, &nodes);
        assert_eq!(bank.valid, from_graph.valid);
        assert_eq!(bank.eligible, from_graph.eligible);
        for (a, b) in bank.states.iter().zip(&from_graph.states) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
