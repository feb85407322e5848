//! Latency benchmark: times the full per-question path (encode + select +
//! decode) with a monotonic clock, reports mean time per question and the
//! speedup against the full-memory mode in the same run.

use serde::{Deserialize, Serialize};

use crate::analysis::{em_score, str_em};
use crate::data::{QAExample, Vocabulary};
use crate::error::Result;
use crate::infer::{answer, InferenceConfig, Mode};
use crate::model::Model;

/// Which checkpoint serves which mode: selection-trained parameters serve
/// fastfid; everything else uses the base (full-memory) parameters.
pub struct BenchModels<'a> {
    pub base: &'a Model,
    pub selected: Option<&'a Model>,
}

impl<'a> BenchModels<'a> {
    pub fn single(model: &'a Model) -> Self {
        Self {
            base: model,
            selected: None,
        }
    }

    fn for_mode(&self, mode: Mode) -> &'a Model {
        match mode {
            Mode::FastFid => self.selected.unwrap_or(self.base),
            _ => self.base,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            warmup: 2,
        }
    }
}

/// Per-mode benchmark result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    pub k_passages: usize,
    pub n: usize,
    /// Mean effective memory positions per question (exact K×N for fid).
    pub context_length: f64,
    /// Mean wall time per question over timed repetitions, milliseconds.
    pub tpq_ms: f64,
    pub tpq_std_ms: f64,
    pub encode_ms: f64,
    pub select_ms: f64,
    pub decode_ms: f64,
    /// Baseline (fid) TPQ over this mode's TPQ, when fid ran in this run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    pub em: f64,
    pub str_em: f64,
    pub questions: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

/// Benchmark every config over the dataset. Warmup repetitions run the
/// full path but are excluded from timing. Single-threaded by design:
/// stable numbers matter more than throughput here.
pub fn bench(
    models: &BenchModels,
    vocab: &Vocabulary,
    dataset: &[QAExample],
    configs: &[InferenceConfig],
    opts: &BenchOptions,
) -> Result<Vec<BenchReport>> {
    let mut reports = Vec::with_capacity(configs.len());
    for cfg in configs {
        let model = models.for_mode(cfg.mode);
        let mut samples: Vec<f64> = Vec::new();
        let mut enc = 0.0;
        let mut sel = 0.0;
        let mut dec = 0.0;
        let mut ctx = 0.0;
        let mut predictions: Vec<String> = Vec::new();
        for rep in 0..opts.warmup + opts.repetitions {
            let timed = rep >= opts.warmup;
            let mut rep_predictions = Vec::with_capacity(dataset.len());
            for (i, ex) in dataset.iter().enumerate() {
                let out = answer(model, vocab, ex, cfg).map_err(|e| {
                    crate::error::Error::State(format!("example {i}: {e}"))
                })?;
                if timed {
                    samples.push(out.encode_ms + out.select_ms + out.decode_ms);
                    enc += out.encode_ms;
                    sel += out.select_ms;
                    dec += out.decode_ms;
                    ctx += out.context_length as f64;
                }
                rep_predictions.push(out.text);
            }
            predictions = rep_predictions;
        }
        let n_samples = samples.len().max(1) as f64;
        let tpq = samples.iter().sum::<f64>() / n_samples;
        let var = samples.iter().map(|s| (s - tpq) * (s - tpq)).sum::<f64>() / n_samples;
        let em = em_score(&predictions, dataset);
        let strem = if dataset.is_empty() {
            0.0
        } else {
            dataset
                .iter()
                .zip(&predictions)
                .map(|(ex, p)| str_em(p, &ex.answers))
                .sum::<f64>()
                / dataset.len() as f64
        };
        reports.push(BenchReport {
            mode: cfg.mode.as_str().into(),
            k_passages: dataset.first().map(|e| e.passages.len()).unwrap_or(0),
            n: model.config.max_passage_len,
            context_length: ctx / n_samples,
            tpq_ms: tpq,
            tpq_std_ms: var.sqrt(),
            encode_ms: enc / n_samples,
            select_ms: sel / n_samples,
            decode_ms: dec / n_samples,
            speedup: None,
            em,
            str_em: strem,
            questions: dataset.len(),
            repetitions: opts.repetitions,
            warmup: opts.warmup,
        });
    }
    // speedup against the fid config in the same run
    if let Some(fid_tpq) = reports
        .iter()
        .find(|r| r.mode == Mode::Fid.as_str())
        .map(|r| r.tpq_ms)
    {
        for r in reports.iter_mut() {
            r.speedup = Some(fid_tpq / r.tpq_ms);
        }
    }
    Ok(reports)
}
