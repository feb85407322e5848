//! Evaluation metrics and the cross-attention contribution study.
//!
//! One normalization function backs both answer matching during gold
//! annotation and the EM/STR-EM metrics, so supervision and evaluation
//! agree about what counts as "the same answer".

use crate::data::{format_input, QAExample, Vocabulary, EOS_ID, PAD_ID};
use crate::error::Result;
use crate::model::{decode_logits_with_attention, encode_all, MemoryView, Model};
use crate::select::{topk_spans, SpanScorer};

/// Lowercase, strip punctuation, collapse whitespace, drop English
/// articles (a/an/the).
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let cleaned: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the normalized prediction equals any normalized gold answer.
pub fn exact_match(prediction: &str, gold_answers: &[String]) -> bool {
    let p = normalize(prediction);
    gold_answers.iter().any(|a| normalize(a) == p)
}

/// Fraction of short answers whose normalized form appears as a substring
/// of the normalized long-form prediction.
pub fn str_em(long_prediction: &str, short_answers: &[String]) -> f64 {
    if short_answers.is_empty() {
        return 0.0;
    }
    let p = normalize(long_prediction);
    let hits = short_answers
        .iter()
        .filter(|a| {
            let na = normalize(a);
            !na.is_empty() && p.contains(na.as_str())
        })
        .count();
    hits as f64 / short_answers.len() as f64
}

/// Mean EM of a prediction list against its examples.
pub fn em_score(predictions: &[String], examples: &[QAExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(examples)
        .filter(|(p, ex)| exact_match(p, &ex.answers))
        .count();
    hits as f64 / examples.len() as f64
}

/// For each k in `ks` (ascending), the fraction of questions whose top-k
/// selected spans, detokenized, contain a gold answer as a substring.
pub fn accuracy_at_k(
    model: &Model,
    vocab: &Vocabulary,
    dataset: &[QAExample],
    ks: &[usize],
    l_max: usize,
) -> Result<Vec<(usize, f64)>> {
    let scorer = SpanScorer::from_params(&model.params);
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0usize; ks.len()];
    for ex in dataset {
        let n = model.config.max_passage_len;
        let inputs: Vec<_> = ex
            .passages
            .iter()
            .map(|p| format_input(vocab, &ex.question, &p.title, &p.text, n))
            .collect::<Result<_>>()?;
        let bank = encode_all(model, &inputs)?;
        if max_k == 0 {
            continue;
        }
        let result = match topk_spans(&scorer, &bank, max_k, l_max) {
            Ok(r) => r,
            // a question whose passages have no eligible tokens scores 0
            Err(_) => continue,
        };
        let answers: Vec<String> = ex.answers.iter().map(|a| normalize(a)).collect();
        // top-k lists are prefixes of one another, so one ranked pass
        // suffices: find the first rank whose span contains an answer.
        let mut first_hit = usize::MAX;
        for (rank, span) in result.spans.iter().enumerate() {
            let f = &inputs[span.passage];
            let text = vocab.detokenize(&f.token_ids[span.start..=span.end]);
            let norm = normalize(&text);
            if answers.iter().any(|a| !a.is_empty() && norm.contains(a.as_str())) {
                first_hit = rank + 1;
                break;
            }
        }
        for (i, &k) in ks.iter().enumerate() {
            if first_hit <= k {
                hits[i] += 1;
            }
        }
    }
    let total = dataset.len().max(1) as f64;
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / total)).collect())
}

/// Fraction of questions with at least one eligible sentence containing an
/// answer — the ceiling no selector can beat.
pub fn selection_ceiling(
    model: &Model,
    vocab: &Vocabulary,
    dataset: &[QAExample],
) -> Result<f64> {
    let n = model.config.max_passage_len;
    let mut reachable = 0usize;
    for ex in dataset {
        let inputs: Vec<_> = ex
            .passages
            .iter()
            .map(|p| format_input(vocab, &ex.question, &p.title, &p.text, n))
            .collect::<Result<_>>()?;
        let gold = crate::data::annotate_crucial_sentences(ex, &inputs, vocab);
        if gold.total() > 0 {
            reachable += 1;
        }
    }
    Ok(reachable as f64 / dataset.len().max(1) as f64)
}

/// Per-position cross-attention mass averaged over decoder layers, heads
/// and generated tokens, plus the selected/non-selected partition.
#[derive(Debug, Clone)]
pub struct AttentionProfile {
    /// Mean attention per flattened memory position (K×N).
    pub per_position: Vec<f64>,
    /// Positions covered by the top-k selected spans.
    pub selected: Vec<bool>,
    /// Valid (non-padding) positions.
    pub valid: Vec<bool>,
    pub mean_selected: f64,
    pub mean_unselected: f64,
    pub steps: usize,
}

impl AttentionProfile {
    pub fn ratio(&self) -> f64 {
        self.mean_selected / self.mean_unselected
    }
}

/// Decode greedily over the FULL memory with attention capture enabled;
/// selection is used only to partition positions into selected /
/// non-selected. Requires at least one generated token.
pub fn attention_profile(
    model: &Model,
    vocab: &Vocabulary,
    example: &QAExample,
    k_sentences: usize,
    l_max: usize,
) -> Result<AttentionProfile> {
    let n = model.config.max_passage_len;
    let inputs: Vec<_> = example
        .passages
        .iter()
        .map(|p| format_input(vocab, &example.question, &p.title, &p.text, n))
        .collect::<Result<_>>()?;
    let bank = encode_all(model, &inputs)?;
    let scorer = SpanScorer::from_params(&model.params);
    let selection = topk_spans(&scorer, &bank, k_sentences, l_max)?;
    let mut selected = vec![false; bank.flat_len()];
    for &p in &selection.kept {
        selected[p] = true;
    }

    let view = MemoryView::full(&bank);
    let mut per_position = vec![0.0; bank.flat_len()];
    let mut rows_seen = 0usize;
    let mut prefix = vec![PAD_ID];
    let mut steps = 0usize;
    let _ = vocab;
    for _ in 0..model.config.max_decode_len {
        let (logits, captured) = decode_logits_with_attention(model, &view, &prefix)?;
        for layer in &captured {
            for head in layer {
                debug_assert_eq!(head.len(), bank.flat_len());
                for (i, &w) in head.iter().enumerate() {
                    per_position[i] += w;
                }
                rows_seen += 1;
            }
        }
        steps += 1;
        let next = argmax(&logits);
        if next == EOS_ID {
            break;
        }
        prefix.push(next);
    }
    for v in per_position.iter_mut() {
        *v /= rows_seen.max(1) as f64;
    }

    let (mut sel_sum, mut sel_n, mut un_sum, mut un_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..bank.flat_len() {
        if !bank.valid[i] {
            continue;
        }
        if selected[i] {
            sel_sum += per_position[i];
            sel_n += 1;
        } else {
            un_sum += per_position[i];
            un_n += 1;
        }
    }
    Ok(AttentionProfile {
        per_position,
        selected,
        valid: bank.valid.clone(),
        mean_selected: sel_sum / sel_n.max(1) as f64,
        mean_unselected: un_sum / un_n.max(1) as f64,
        steps,
    })
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_normalizes() {
        assert!(exact_match("Barack Obama.", &["barack obama".into()]));
        assert!(exact_match("the Eiffel Tower", &["Eiffel Tower".into()]));
        assert!(!exact_match("Paris, France", &["Paris".into()]));
    }

    #[test]
    fn exact_match_is_symmetric_under_normalization() {
        let pairs = [("The Blue-Whale", "blue whale"), ("A  cat", "cat"), ("x!", "y")];
        for (a, b) in pairs {
            assert_eq!(
                exact_match(a, &[b.to_string()]),
                exact_match(b, &[a.to_string()])
            );
        }
    }

    #[test]
    fn str_em_fractions() {
        assert_eq!(str_em("both cats and dogs appear", &["cats".into(), "dogs".into()]), 1.0);
        assert_eq!(str_em("only cats appear", &["cats".into(), "dogs".into()]), 0.5);
        assert_eq!(str_em("", &["cats".into()]), 0.0);
    }

    #[test]
    fn normalize_drops_articles_and_punct() {
        assert_eq!(normalize("The quick,  brown fox!"), "quick brown fox");
        assert_eq!(normalize("an apple a day"), "apple day");
    }
}
