//! Decoding over a (possibly selected) encoder memory.
//!
//! A `MemoryView` is either the full bank, the full bank masked down to a
//! kept-position set, or a physically gathered copy of the kept rows.
//! Cross-attention scores carry no encoder-position term, so the masked
//! and gathered forms of the same kept set decode identically; gathering
//! is purely a speedup.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::TensorId;
use crate::error::{Error, Result};
use crate::model::layers::{attention, broadcast_mask, causal_mask, ffn, full_mask, layer_norm, residual, AttnParams};
use crate::model::{Bound, EncoderBank, Model};

/// Which flattened memory positions the decoder may attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Kept {
    /// All valid (non-padding) positions; context length counts K×N.
    All,
    /// Masked view: full memory stays resident, attention restricted to
    /// these positions (strictly increasing flat indices).
    Masked(Vec<usize>),
    /// Gathered view: only these rows are materialized.
    Gathered(Vec<usize>),
}

/// A reference to an encoder bank plus the kept-position set.
#[derive(Debug, Clone)]
pub struct MemoryView<'a> {
    pub bank: &'a EncoderBank,
    pub kept: Kept,
}

impl<'a> MemoryView<'a> {
    pub fn full(bank: &'a EncoderBank) -> Self {
        Self { bank, kept: Kept::All }
    }

    pub fn masked(bank: &'a EncoderBank, positions: Vec<usize>) -> Self {
        Self { bank, kept: Kept::Masked(positions) }
    }

    pub fn gathered(bank: &'a EncoderBank, positions: Vec<usize>) -> Self {
        Self { bank, kept: Kept::Gathered(positions) }
    }

    /// Effective context length as reported in benchmarks: K×N for the
    /// full view, the kept count otherwise.
    pub fn context_length(&self) -> usize {
        match &self.kept {
            Kept::All => self.bank.flat_len(),
            Kept::Masked(v) | Kept::Gathered(v) => v.len(),
        }
    }

    fn positions(&self) -> Result<Vec<usize>> {
        let ps = match &self.kept {
            Kept::All => (0..self.bank.flat_len())
                .filter(|&i| self.bank.valid[i])
                .collect::<Vec<_>>(),
            Kept::Masked(v) | Kept::Gathered(v) => v.clone(),
        };
        if ps.is_empty() {
            return Err(Error::EmptySelection("memory view keeps no positions".into()));
        }
        if let Some(&bad) = ps.iter().find(|&&i| i >= self.bank.flat_len()) {
            return Err(Error::Index {
                op: "memory_view".into(),
                index: bad,
                len: self.bank.flat_len(),
            });
        }
        Ok(ps)
    }
}

/// Decoder forward over an in-graph memory tensor; returns [T, vocab]
/// logits for a teacher-forced input sequence.
pub fn decoder_graph(
    b: &mut Bound,
    memory: TensorId,
    mem_key_mask: Option<&[bool]>,
    input_ids: &[usize],
    train: bool,
    mut rng: Option<&mut ChaCha8Rng>,
    mut capture: Option<&mut Vec<Vec<TensorId>>>,
) -> Result<TensorId> {
    if input_ids.is_empty() {
        return Err(Error::Input("decoder needs at least one input token".into()));
    }
    let cfg = b.model.config.clone();
    let t = input_ids.len();
    if t > cfg.max_decode_len + 1 {
        return Err(Error::Input(format!(
            "decoder input of {} tokens exceeds budget {}",
            t,
            cfg.max_decode_len + 1
        )));
    }
    let m_rows = b.graph.shape(memory)[0];
    let tok = b.p("tok_emb")?;
    let pos = b.p("dec_pos")?;
    let te = b.graph.embed(input_ids, tok)?;
    let positions: Vec<usize> = (0..t).collect();
    let pe = b.graph.gather_rows(pos, Arc::new(positions))?;
    let mut y = b.graph.add(te, pe)?;
    if train && cfg.dropout > 0.0 {
        if let Some(r) = rng.as_deref_mut() {
            y = b.graph.dropout(y, cfg.dropout, r)?;
        }
    }
    let self_mask = causal_mask(t);
    let cross_mask = match mem_key_mask {
        Some(km) => {
            if !km.iter().any(|&x| x) {
                return Err(Error::EmptySelection("no selected context".into()));
            }
            broadcast_mask(t, km)
        }
        None => full_mask(t, m_rows),
    };
    for layer in 0..cfg.n_dec_layers {
        let normed = layer_norm(b, y, &format!("dec{layer}.ln1.gain"))?;
        let sp = AttnParams::bind(b, &format!("dec{layer}.self"))?;
        let sa = attention(b, normed, normed, self_mask.clone(), &sp, cfg.n_heads, None)?;
        y = residual(b, y, sa, if train { cfg.dropout } else { 0.0 }, rng.as_deref_mut())?;

        let normed = layer_norm(b, y, &format!("dec{layer}.ln2.gain"))?;
        let cp = AttnParams::bind(b, &format!("dec{layer}.cross"))?;
        let mut slot = Vec::new();
        let want = capture.is_some();
        let ca = attention(
            b,
            normed,
            memory,
            cross_mask.clone(),
            &cp,
            cfg.n_heads,
            if want { Some(&mut slot) } else { None },
        )?;
        if let Some(sink) = capture.as_deref_mut() {
            sink.push(slot);
        }
        y = residual(b, y, ca, if train { cfg.dropout } else { 0.0 }, rng.as_deref_mut())?;

        let normed = layer_norm(b, y, &format!("dec{layer}.ln3.gain"))?;
        let f = ffn(b, normed, &format!("dec{layer}.ffn"))?;
        y = residual(b, y, f, if train { cfg.dropout } else { 0.0 }, rng.as_deref_mut())?;
    }
    let y = layer_norm(b, y, "dec.ln_final.gain")?;
    // output head tied to the token embedding, scaled by 1/sqrt(d)
    let tok_t = b.graph.transpose(tok)?;
    let logits = b.graph.matmul(y, tok_t)?;
    b.graph.scale(logits, 1.0 / (cfg.d_model as f64).sqrt())
}

/// Materialize a view's memory inside a fresh graph: the gathered form
/// injects only kept rows; the other forms inject the full bank and mask.
fn view_memory(b: &mut Bound, view: &MemoryView) -> Result<(TensorId, Option<Vec<bool>>)> {
    let bank = view.bank;
    match &view.kept {
        Kept::Gathered(ps) => {
            if ps.is_empty() {
                return Err(Error::EmptySelection("no selected context".into()));
            }
            let d = bank.d;
            let mut rows = Vec::with_capacity(ps.len() * d);
            for &p in ps {
                if p >= bank.flat_len() {
                    return Err(Error::Index {
                        op: "gather".into(),
                        index: p,
                        len: bank.flat_len(),
                    });
                }
                rows.extend_from_slice(&bank.states[p * d..(p + 1) * d]);
            }
            let mem = b.graph.input(&rows, &[ps.len(), d])?;
            Ok((mem, None))
        }
        _ => {
            let ps = view.positions()?;
            let mem = b.graph.input(&bank.states, &[bank.flat_len(), bank.d])?;
            let mut mask = vec![false; bank.flat_len()];
            for &p in &ps {
                mask[p] = true;
            }
            Ok((mem, Some(mask)))
        }
    }
}

/// Next-token logits for `prefix_ids` over the view. Stateless: each call
/// rebuilds the decode graph, so per-step cost scales with the view's
/// memory size — the quantity selection shrinks.
pub fn decode_logits(model: &Model, view: &MemoryView, prefix_ids: &[usize]) -> Result<Vec<f64>> {
    let mut b = Bound::new(model, false);
    let (mem, mask) = view_memory(&mut b, view)?;
    let logits = decoder_graph(&mut b, mem, mask.as_deref(), prefix_ids, false, None, None)?;
    let v = model.config.vocab_size;
    let t = prefix_ids.len();
    Ok(b.graph.data(logits)[(t - 1) * v..t * v].to_vec())
}

/// Cross-attention rows for the last prefix position, per decoder layer
/// and head, over the view's memory rows. Used by the attention study.
pub fn decode_logits_with_attention(
    model: &Model,
    view: &MemoryView,
    prefix_ids: &[usize],
) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    let mut b = Bound::new(model, false);
    let (mem, mask) = view_memory(&mut b, view)?;
    let mut cap: Vec<Vec<TensorId>> = Vec::new();
    let logits = decoder_graph(&mut b, mem, mask.as_deref(), prefix_ids, false, None, Some(&mut cap))?;
    let v = model.config.vocab_size;
    let t = prefix_ids.len();
    let m = b.graph.shape(mem)[0];
    let rows = cap
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|&attn| b.graph.data(attn)[(t - 1) * m..t * m].to_vec())
                .collect()
        })
        .collect();
    Ok((b.graph.data(logits)[(t - 1) * v..t * v].to_vec(), rows))
}

/// Teacher-forced logits [T, vocab] over a view (no gradients); the loop
/// oracle for the generation loss uses this.
pub fn teacher_forced_logits(model: &Model, view: &MemoryView, input_ids: &[usize]) -> Result<Vec<f64>> {
    let mut b = Bound::new(model, false);
    let (mem, mask) = view_memory(&mut b, view)?;
    let logits = decoder_graph(&mut b, mem, mask.as_deref(), input_ids, false, None, None)?;
    Ok(b.graph.data(logits).to_vec())
}
