//! Training losses: answer-generation NLL, the stage-1 multi-task loss
//! (full memory) and the stage-2 select-generation loss (gathered memory).

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::TensorId;
use crate::data::{annotate_crucial_sentences, format_input, FormattedInput, GoldAnnotation, QAExample, Vocabulary, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{decoder_graph, encode_all_graph, bank_from_graph, BankNodes, Bound};
use crate::select::{selection_loss_graph, topk_spans, SpanScorer};

/// An example with everything precomputed that does not depend on model
/// parameters: formatted inputs, gold spans, target token ids.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub inputs: Vec<FormattedInput>,
    pub gold: GoldAnnotation,
    /// Target sequence for teacher forcing; always ends with EOS.
    pub answer_ids: Vec<usize>,
    pub answers: Vec<String>,
}

pub fn prepare_example(vocab: &Vocabulary, ex: &QAExample, n: usize, max_decode: usize) -> Result<PreparedExample> {
    let inputs: Vec<FormattedInput> = ex
        .passages
        .iter()
        .map(|p| format_input(vocab, &ex.question, &p.title, &p.text, n))
        .collect::<Result<_>>()?;
    let gold = annotate_crucial_sentences(ex, &inputs, vocab);
    let mut answer_ids = vocab.tokenize(&ex.answers[0]);
    if answer_ids.is_empty() {
        return Err(Error::Input(format!("answer {:?} tokenizes to nothing", ex.answers[0])));
    }
    answer_ids.truncate(max_decode.saturating_sub(1).max(1));
    answer_ids.push(EOS_ID);
    Ok(PreparedExample {
        inputs,
        gold,
        answer_ids,
        answers: ex.answers.clone(),
    })
}

pub fn prepare_dataset(vocab: &Vocabulary, examples: &[QAExample], n: usize, max_decode: usize) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|ex| prepare_example(vocab, ex, n, max_decode))
        .collect()
}

/// Teacher-forced mean negative log-likelihood of the answer given a
/// memory tensor: the decoder input is the answer shifted right behind the
/// start token (= PAD, as in T5-style decoders).
pub fn generation_loss_graph(
    b: &mut Bound,
    memory: TensorId,
    mem_key_mask: Option<&[bool]>,
    answer_ids: &[usize],
    train: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId> {
    if answer_ids.is_empty() {
        return Err(Error::Input("answer must be non-empty".into()));
    }
    let mut input_ids = Vec::with_capacity(answer_ids.len());
    input_ids.push(PAD_ID);
    input_ids.extend_from_slice(&answer_ids[..answer_ids.len() - 1]);
    let logits = decoder_graph(b, memory, mem_key_mask, &input_ids, train, rng, None)?;
    b.graph.cross_entropy(logits, answer_ids)
}

/// Loss components of one example.
pub struct LossParts {
    pub total: TensorId,
    pub l_g: f64,
    pub l_s: Option<f64>,
    /// Stage 2 fell back to the full memory because selection kept nothing.
    pub used_fallback: bool,
}

/// Stage-1 multi-task loss: generation over the full memory plus
/// λ × selection loss, both over one shared encoder forward pass.
/// Examples without gold spans contribute the generation term alone.
pub fn stage1_loss_graph(
    b: &mut Bound,
    ex: &PreparedExample,
    lambda: f64,
    train: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossParts> {
    let nodes = encode_all_graph(b, &ex.inputs, train, rng.as_deref_mut())?;
    let l_g = generation_loss_graph(b, nodes.memory, None, &ex.answer_ids, train, rng)?;
    combine(b, nodes, ex, l_g, lambda, false)
}

/// Stage-2 select-generation loss: top-k spans are chosen from the current
/// encoder states without gradients, their positions gathered from the
/// in-graph memory (gradients flow through the kept states into the
/// encoder, not through the discrete choice), and the generation loss runs
/// over that gathered memory. Selection keeping nothing falls back to the
/// full memory for the example.
pub fn stage2_loss_graph(
    b: &mut Bound,
    ex: &PreparedExample,
    lambda: f64,
    k_sentences: usize,
    l_max: usize,
    train: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<LossParts> {
    let nodes = encode_all_graph(b, &ex.inputs, train, rng.as_deref_mut())?;
    let bank = bank_from_graph(b, &nodes);
    let scorer = SpanScorer::from_params(&b.model.params);
    let selection = match topk_spans(&scorer, &bank, k_sentences, l_max) {
        Ok(sel) if !sel.kept.is_empty() => Some(sel),
        _ => None,
    };
    let (l_g, fallback) = match &selection {
        Some(sel) => {
            let concat: Vec<usize> = sel
                .kept
                .iter()
                .map(|&flat| nodes.concat_index(flat / bank.n, flat % bank.n))
                .collect();
            let mem = b.graph.gather_rows(nodes.memory, Arc::new(concat))?;
            (generation_loss_graph(b, mem, None, &ex.answer_ids, train, rng)?, false)
        }
        None => (
            generation_loss_graph(b, nodes.memory, None, &ex.answer_ids, train, rng)?,
            true,
        ),
    };
    combine(b, nodes, ex, l_g, lambda, fallback)
}

fn combine(
    b: &mut Bound,
    nodes: BankNodes,
    ex: &PreparedExample,
    l_g: TensorId,
    lambda: f64,
    used_fallback: bool,
) -> Result<LossParts> {
    let l_g_val = b.graph.value(l_g);
    let l_s = selection_loss_graph(b, &nodes, &ex.gold)?;
    let (total, l_s_val) = match l_s {
        Some(ls) => {
            let scaled = b.graph.scale(ls, lambda)?;
            (b.graph.add(l_g, scaled)?, Some(b.graph.value(ls)))
        }
        None => (l_g, None),
    };
    Ok(LossParts {
        total,
        l_g: l_g_val,
        l_s: l_s_val,
        used_fallback,
    })
}
