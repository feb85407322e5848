//! Context-reduction baselines: first-k-tokens-per-passage and whole-
//! passage reranking.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::TensorId;
use crate::data::{annotate_crucial_sentences, format_input, QAExample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{BankNodes, Bound, EncoderBank, MemoryView, Model, ParamSet};
use crate::train::AdamW;

/// Keep the first `first_k` tokens of every passage (valid ones only).
pub fn fid_light_view(bank: &EncoderBank, first_k: usize) -> Result<MemoryView<'_>> {
    if first_k == 0 || first_k > bank.n {
        return Err(Error::Config(format!(
            "first_k {} outside 1..={}",
            first_k, bank.n
        )));
    }
    let mut kept = Vec::new();
    for p in 0..bank.k {
        for i in 0..first_k {
            let flat = p * bank.n + i;
            if bank.valid[flat] {
                kept.push(flat);
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptySelection("first-k view kept no positions".into()));
    }
    Ok(MemoryView::gathered(bank, kept))
}

/// Passage-relevance head: a linear score over the mean of each passage's
/// valid encoder states.
#[derive(Debug, Clone)]
pub struct RerankHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl RerankHead {
    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            w: params.get("rerank.w").data.clone(),
            b: params.get("rerank.b").data[0],
        }
    }
}

/// Relevance score per passage; passages with no valid position sink to
/// the bottom of the ranking.
pub fn rerank_scores(head: &RerankHead, bank: &EncoderBank) -> Vec<f64> {
    let d = bank.d;
    (0..bank.k)
        .map(|p| {
            let mut mean = vec![0.0; d];
            let mut count = 0usize;
            for i in 0..bank.n {
                let flat = p * bank.n + i;
                if !bank.valid[flat] {
                    continue;
                }
                for (m, &s) in mean.iter_mut().zip(&bank.states[flat * d..(flat + 1) * d]) {
                    *m += s;
                }
                count += 1;
            }
            if count == 0 {
                return f64::NEG_INFINITY;
            }
            let inv = 1.0 / count as f64;
            head.w.iter().zip(&mean).map(|(w, m)| w * m * inv).sum::<f64>() + head.b
        })
        .collect()
}

/// Keep every valid position of the `top_p` best-scored passages.
pub fn rerank_view<'a>(head: &RerankHead, bank: &'a EncoderBank, top_p: usize) -> Result<MemoryView<'a>> {
    if top_p == 0 || top_p > bank.k {
        return Err(Error::Config(format!("top_p {} outside 1..={}", top_p, bank.k)));
    }
    let scores = rerank_scores(head, bank);
    let mut order: Vec<usize> = (0..bank.k).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut chosen = order[..top_p].to_vec();
    chosen.sort_unstable();
    let mut kept = Vec::new();
    for &p in &chosen {
        for i in 0..bank.n {
            let flat = p * bank.n + i;
            if bank.valid[flat] {
                kept.push(flat);
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptySelection("rerank view kept no positions".into()));
    }
    Ok(MemoryView::gathered(bank, kept))
}

/// Cross-entropy of the softmax over per-passage scores against the
/// positive set, uniformly distributed over positives. Returns `None`
/// when no passage is positive (the caller skips the example).
pub fn rerank_loss_graph(
    b: &mut Bound,
    nodes: &BankNodes,
    positives: &[bool],
) -> Result<Option<TensorId>> {
    let k = nodes.passages.len();
    debug_assert_eq!(positives.len(), k);
    if !positives.iter().any(|&p| p) {
        return Ok(None);
    }
    let w = b.p("rerank.w")?;
    let bias = b.p("rerank.b")?;
    let mut scores = Vec::with_capacity(k);
    for (p, &states) in nodes.passages.iter().enumerate() {
        let len = nodes.lengths[p];
        let pool = b.graph.input(&vec![1.0 / len as f64; len], &[1, len])?;
        let mean = b.graph.matmul(pool, states)?;
        let s = b.graph.matmul(mean, w)?;
        scores.push(b.graph.add_bias_row(s, bias)?);
    }
    let cat = b.graph.concat_rows(&scores)?;
    let row = b.graph.reshape(cat, &[1, k])?;
    let lp = b.graph.log_softmax(row, 1)?;
    let pos_idx: Vec<usize> = (0..k).filter(|&p| positives[p]).collect();
    let picked = b.graph.gather_elems(lp, Arc::new(pos_idx))?;
    let mean = b.graph.mean(picked)?;
    Ok(Some(b.graph.scale(mean, -1.0)?))
}

/// Fit the rerank head on a frozen encoder: passages containing a gold
/// answer are positives. The transformer itself never moves; only the two
/// head tensors do. Returns the number of examples that had positives.
pub fn fit_rerank_head(
    model: &mut Model,
    vocab: &Vocabulary,
    examples: &[QAExample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<usize> {
    let n = model.config.max_passage_len;
    // pre-pool passages once; the head sees only mean vectors
    let mut pooled: Vec<(Vec<Vec<f64>>, Vec<bool>)> = Vec::new();
    for ex in examples {
        let inputs: Vec<_> = ex
            .passages
            .iter()
            .map(|p| format_input(vocab, &ex.question, &p.title, &p.text, n))
            .collect::<Result<Vec<_>>>()?;
        let gold = annotate_crucial_sentences(ex, &inputs, vocab);
        let positives: Vec<bool> = (0..inputs.len()).map(|p| gold.count(p) > 0).collect();
        if !positives.iter().any(|&x| x) {
            continue;
        }
        let bank = crate::model::encode_all(model, &inputs)?;
        let d = bank.d;
        let mut means = Vec::with_capacity(bank.k);
        for p in 0..bank.k {
            let mut mean = vec![0.0; d];
            let mut count = 0usize;
            for i in 0..bank.n {
                let flat = p * bank.n + i;
                if bank.valid[flat] {
                    for (m, &s) in mean.iter_mut().zip(&bank.states[flat * d..(flat + 1) * d]) {
                        *m += s;
                    }
                    count += 1;
                }
            }
            for m in mean.iter_mut() {
                *m /= count.max(1) as f64;
            }
            means.push(mean);
        }
        pooled.push((means, positives));
    }
    if pooled.is_empty() {
        return Ok(0);
    }
    // tiny AdamW over just the head tensors
    let w_idx = model.params.index("rerank.w").expect("rerank head registered");
    let b_idx = model.params.index("rerank.b").expect("rerank head registered");
    let mut opt = AdamW::new(&model.params, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.d_model;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order {
            let (means, positives) = &pooled[i];
            let mut b = Bound::new(model, true);
            let w = b.p("rerank.w")?;
            let bias = b.p("rerank.b")?;
            let k = means.len();
            let flat: Vec<f64> = means.iter().flatten().copied().collect();
            let m = b.graph.input(&flat, &[k, d])?;
            let s = b.graph.matmul(m, w)?;
            let s = b.graph.add_bias_row(s, bias)?;
            let row = b.graph.reshape(s, &[1, k])?;
            let lp = b.graph.log_softmax(row, 1)?;
            let pos_idx: Vec<usize> = (0..k).filter(|&p| positives[p]).collect();
            let picked = b.graph.gather_elems(lp, Arc::new(pos_idx))?;
            let mean = b.graph.mean(picked)?;
            let loss = b.graph.scale(mean, -1.0)?;
            b.graph.backward(loss)?;
            let mut grads = crate::model::grad_sink(&model.params);
            b.collect_grads(&mut grads);
            opt.step(&mut model.params, &grads, lr);
            let _ = (w_idx, b_idx);
        }
    }
    Ok(pooled.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FormattedInput;
    use crate::model::{encode_all_graph, ModelConfig};

    #[test]
    fn fid_light_full_k_is_full_memory() {
        let bank = EncoderBank::synthetic(3, 8, 4, vec![true; 24], vec![true; 24]);
        let view = fid_light_view(&bank, 8).unwrap();
        assert_eq!(view.context_length(), 24);
    }

    #[test]
    fn fid_light_accounting_at_paper_setting() {
        // K=100, N=384, first_k=64 -> context length 6400
        let bank = EncoderBank::synthetic(100, 384, 2, vec![true; 38400], vec![true; 38400]);
        assert_eq!(bank.flat_len(), 38_400);
        let view = fid_light_view(&bank, 64).unwrap();
        assert_eq!(view.context_length(), 6_400);
    }

    #[test]
    fn rerank_accounting_top3_of_384() {
        let bank = EncoderBank::synthetic(25, 384, 2, vec![true; 25 * 384], vec![true; 25 * 384]);
        let head = RerankHead { w: vec![0.0, 0.0], b: 0.0 };
        let view = rerank_view(&head, &bank, 3).unwrap();
        assert_eq!(view.context_length(), 1_152);
    }

    #[test]
    fn rerank_top_k_is_full_memory() {
        let bank = EncoderBank::synthetic(4, 6, 2, vec![true; 24], vec![true; 24]);
        let head = RerankHead { w: vec![0.1, 0.2], b: 0.0 };
        let view = rerank_view(&head, &bank, 4).unwrap();
        assert_eq!(view.context_length(), 24);
    }

    #[test]
    fn rerank_loss_equal_scores_is_ln2() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 16,
            max_passage_len: 8,
            max_decode_len: 4,
            dropout: 0.0,
        };
        let mut model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let idx = model.params.index("rerank.w").unwrap();
        model.params.entry_mut(idx).data.fill(0.0);
        // identical inputs, zero head: both passages score b, softmax is
        // uniform, one positive -> loss = ln 2
        let inputs = vec![
            FormattedInput::from_parts(vec![1, 2, 3], 0, vec![]),
            FormattedInput::from_parts(vec![1, 2, 3], 0, vec![]),
        ];
        let mut b = Bound::new(&model, true);
        let nodes = encode_all_graph(&mut b, &inputs, false, None).unwrap();
        let loss = rerank_loss_graph(&mut b, &nodes, &[true, false]).unwrap().unwrap();
        assert!((b.graph.value(loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rerank_loss_skips_without_positives() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 16,
            max_passage_len: 8,
            max_decode_len: 4,
            dropout: 0.0,
        };
        let model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let inputs = vec![FormattedInput::from_parts(vec![1, 2], 0, vec![])];
        let mut b = Bound::new(&model, true);
        let nodes = encode_all_graph(&mut b, &inputs, false, None).unwrap();
        assert!(rerank_loss_graph(&mut b, &nodes, &[false]).unwrap().is_none());
    }
}
