//! Input formatting and crucial-sentence annotation.
//!
//! Each (question, passage) pair becomes one marker-delimited token
//! sequence: `<q> question <t> title <c> passage`. Only passage-text
//! tokens are eligible for span selection; the prefix (markers, question,
//! title) is not, and neither is padding.

use crate::analysis::normalize;
use crate::data::tokenizer::{Vocabulary, MARK_CONTEXT_ID, MARK_QUESTION_ID, MARK_TITLE_ID};
use crate::data::QAExample;
use crate::error::{Error, Result};

/// One formatted encoder input. `eligible_start` is the index of the first
/// passage-text token; everything before it is prefix. `sentences` lists
/// the token span (inclusive) of every passage sentence that survived
/// truncation in full.
#[derive(Debug, Clone)]
pub struct FormattedInput {
    pub token_ids: Vec<usize>,
    pub eligible_start: usize,
    pub sentences: Vec<(usize, usize)>,
}

impl FormattedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Eligibility flags for the first `n` positions (padded with false).
    pub fn eligible_mask(&self, n: usize) -> Vec<bool> {
        (0..n)
            .map(|i| i >= self.eligible_start && i < self.token_ids.len())
            .collect()
    }

    /// Construct directly from parts. Used by tests that need synthetic
    /// inputs where every position is eligible.
    pub fn from_parts(token_ids: Vec<usize>, eligible_start: usize, sentences: Vec<(usize, usize)>) -> Self {
        Self { token_ids, eligible_start, sentences }
    }
}

/// Split text into sentences on `.`, `!` or `?` followed by whitespace or
/// end of text. Returns byte ranges; never returns empty sentences. The
/// rule is deliberately naive ("Dr. Smith" splits), which is fine for the
/// synthetic corpora this crate targets.
pub fn sentence_split(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        let (pos, ch) = bytes[i];
        if ch == '.' || ch == '!' || ch == '?' {
            // consume the full punctuation run
            let mut j = i;
            while j + 1 < bytes.len() && matches!(bytes[j + 1].1, '.' | '!' | '?') {
                j += 1;
            }
            let after = bytes.get(j + 1).map(|&(_, c)| c);
            if after.map_or(true, |c| c.is_whitespace()) {
                let end = bytes
                    .get(j + 1)
                    .map(|&(p, _)| p)
                    .unwrap_or(text.len());
                push_trimmed(text, start, end, &mut out);
                start = end;
                i = j + 1;
                let _ = pos;
                continue;
            }
            i = j + 1;
            continue;
        }
        i += 1;
    }
    push_trimmed(text, start, text.len(), &mut out);
    out
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    let (s, e) = (start + lead, end - trail);
    if s < e {
        out.push((s, e));
    }
}

/// Format one (question, title, passage) triple into a token sequence of at
/// most `n` tokens. Passage tokens are truncated tail-first; the prefix
/// always survives. Errors when the prefix alone fills the budget.
pub fn format_input(
    vocab: &Vocabulary,
    question: &str,
    title: &str,
    passage_text: &str,
    n: usize,
) -> Result<FormattedInput> {
    if question.trim().is_empty() {
        return Err(Error::Input("question must be non-empty".into()));
    }
    let mut ids = vec![MARK_QUESTION_ID];
    ids.extend(vocab.tokenize(question));
    ids.push(MARK_TITLE_ID);
    ids.extend(vocab.tokenize(title));
    ids.push(MARK_CONTEXT_ID);
    if ids.len() >= n {
        return Err(Error::Input(format!(
            "formatted question+title occupy {} of {} tokens, leaving no room for the passage",
            ids.len(),
            n
        )));
    }
    let eligible_start = ids.len();
    let budget = n - eligible_start;
    let mut sentences = Vec::new();
    let mut used = 0usize;
    for (cs, ce) in sentence_split(passage_text) {
        let sent_ids = vocab.tokenize(&passage_text[cs..ce]);
        if sent_ids.is_empty() {
            continue;
        }
        if used + sent_ids.len() > budget {
            // partial sentence: keep the tokens that fit (they are still
            // context) but do not record a sentence span for it
            let fit = budget - used;
            ids.extend_from_slice(&sent_ids[..fit]);
            break;
        }
        let start = eligible_start + used;
        ids.extend_from_slice(&sent_ids);
        used += sent_ids.len();
        sentences.push((start, start + sent_ids.len() - 1));
    }
    debug_assert!(ids.len() <= n);
    Ok(FormattedInput {
        token_ids: ids,
        eligible_start,
        sentences,
    })
}

/// Gold supervision for span selection: for each passage, the token spans
/// of every sentence whose normalized text contains a normalized gold
/// answer as a substring.
#[derive(Debug, Clone, Default)]
pub struct GoldAnnotation {
    pub spans: Vec<Vec<(usize, usize)>>,
}

impl GoldAnnotation {
    /// Number of gold sentences in passage `k`.
    pub fn count(&self, k: usize) -> usize {
        self.spans[k].len()
    }

    pub fn total(&self) -> usize {
        self.spans.iter().map(Vec::len).sum()
    }

    /// All gold spans as (passage, start, end) triples.
    pub fn all(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.spans
            .iter()
            .enumerate()
            .flat_map(|(k, v)| v.iter().map(move |&(i, j)| (k, i, j)))
    }
}

/// Mark every sentence containing a gold answer. `formatted` must align
/// with `example.passages` (one formatted input per passage).
pub fn annotate_crucial_sentences(
    example: &QAExample,
    formatted: &[FormattedInput],
    vocab: &Vocabulary,
) -> GoldAnnotation {
    let norm_answers: Vec<String> = example.answers.iter().map(|a| normalize(a)).collect();
    let mut spans = Vec::with_capacity(formatted.len());
    for f in formatted {
        let mut gold = Vec::new();
        for &(s, e) in &f.sentences {
            let text = vocab.detokenize(&f.token_ids[s..=e]);
            let norm = normalize(&text);
            if norm_answers.iter().any(|a| !a.is_empty() && norm.contains(a.as_str())) {
                gold.push((s, e));
            }
        }
        spans.push(gold);
    }
    GoldAnnotation { spans }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Passage;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            &[
                "who wrote hamlet paris is big . the capital of france is paris",
                "hamlet is a play by william shakespeare . plain words here none",
            ],
            512,
        )
        .unwrap()
    }

    #[test]
    fn sentence_split_cases() {
        assert_eq!(sentence_split("A. B!").len(), 2);
        assert_eq!(sentence_split("Dr. Smith arrived.").len(), 2);
        assert_eq!(sentence_split("no terminal punctuation"), vec![(0, 23)]);
        assert!(sentence_split("").is_empty());
        let spans = sentence_split("One... two? three");
        assert_eq!(spans.len(), 3);
    }

    #[test]
    fn format_places_markers_and_eligibility() {
        let v = vocab();
        let f = format_input(&v, "who wrote hamlet", "Hamlet", "Hamlet is a play by William Shakespeare.", 64).unwrap();
        assert_eq!(f.token_ids[0], MARK_QUESTION_ID);
        let t_pos = f.token_ids.iter().position(|&t| t == MARK_TITLE_ID).unwrap();
        let c_pos = f.token_ids.iter().position(|&t| t == MARK_CONTEXT_ID).unwrap();
        assert!(0 < t_pos && t_pos < c_pos);
        assert_eq!(f.eligible_start, c_pos + 1);
        let mask = f.eligible_mask(64);
        assert!(!mask[..f.eligible_start].iter().any(|&b| b));
        assert!(mask[f.eligible_start..f.len()].iter().all(|&b| b));
        assert!(!mask[f.len()..].iter().any(|&b| b));
    }

    #[test]
    fn empty_passage_ends_at_context_marker() {
        let v = vocab();
        let f = format_input(&v, "who wrote hamlet", "Hamlet", "", 64).unwrap();
        assert_eq!(*f.token_ids.last().unwrap(), MARK_CONTEXT_ID);
        assert_eq!(f.eligible_start, f.len());
        assert!(f.sentences.is_empty());
        assert!(!f.eligible_mask(64).iter().any(|&b| b));
    }

    #[test]
    fn over_length_passage_truncates_to_n() {
        let v = vocab();
        let long = "plain words here none . ".repeat(40);
        let f = format_input(&v, "who wrote hamlet", "Hamlet", &long, 32).unwrap();
        assert_eq!(f.len(), 32);
        // only fully-kept sentences are recorded
        for &(_, e) in &f.sentences {
            assert!(e < 32);
        }
    }

    #[test]
    fn oversized_prefix_is_an_error() {
        let v = vocab();
        let err = format_input(&v, "who wrote hamlet", "Hamlet", "text", 6);
        assert!(err.is_err());
    }

    #[test]
    fn annotation_marks_every_sentence_with_answer() {
        let v = vocab();
        let ex = QAExample {
            question: "what is the capital of france".into(),
            answers: vec!["Paris".into()],
            passages: vec![Passage {
                title: "France".into(),
                text: "Paris is big. The capital of France is Paris.".into(),
            }],
            long_answer: None,
        };
        let f = vec![format_input(&v, &ex.question, "France", &ex.passages[0].text, 64).unwrap()];
        let gold = annotate_crucial_sentences(&ex, &f, &v);
        assert_eq!(gold.count(0), 2);
    }

    #[test]
    fn absent_answer_gives_empty_annotation() {
        let v = vocab();
        let ex = QAExample {
            question: "who wrote hamlet".into(),
            answers: vec!["zanzibar".into()],
            passages: vec![Passage {
                title: "Hamlet".into(),
                text: "Hamlet is a play by William Shakespeare.".into(),
            }],
            long_answer: None,
        };
        let f = vec![format_input(&v, &ex.question, "Hamlet", &ex.passages[0].text, 64).unwrap()];
        let gold = annotate_crucial_sentences(&ex, &f, &v);
        assert_eq!(gold.total(), 0);
    }

    #[test]
    fn answer_split_across_sentences_does_not_match() {
        let v = Vocabulary::build(&["alpha beta . gamma delta question word"], 512).unwrap();
        let ex = QAExample {
            question: "question word".into(),
            answers: vec!["beta gamma".into()],
            passages: vec![Passage {
                title: "t".into(),
                text: "alpha beta. gamma delta".into(),
            }],
            long_answer: None,
        };
        let f = vec![format_input(&v, &ex.question, "t", &ex.passages[0].text, 64).unwrap()];
        let gold = annotate_crucial_sentences(&ex, &f, &v);
        assert_eq!(gold.total(), 0);
    }
}
