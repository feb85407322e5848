//! `eval`: quality metrics (EM, STR-EM) for one checkpoint and mode.

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use fastfid::analysis::{exact_match, str_em};
use fastfid::infer::{answer, fit_rerank_head, InferenceConfig, Mode};

use crate::commands::{load_examples, load_model, load_vocab};
use crate::config::{load_file_config, pick, write_resolved};

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset file (JSONL).
    #[arg(long)]
    pub data_file: PathBuf,
    /// Vocabulary file or the directory containing vocab.txt.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// fid | fastfid | fid_light | rerank_fid
    #[arg(long, default_value = "fid")]
    pub mode: String,
    #[arg(long)]
    pub k_sentences: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
    #[arg(long)]
    pub first_k: Option<usize>,
    #[arg(long)]
    pub top_passages: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_decode: Option<usize>,
    /// Cap the number of evaluated questions.
    #[arg(long)]
    pub questions: Option<usize>,
    /// Examples used to fit the rerank head (rerank_fid mode only).
    #[arg(long)]
    pub rerank_fit_file: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub rerank_fit_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the metrics report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResolvedEval {
    pub command: String,
    pub seed: u64,
    pub mode: String,
    pub infer: InferenceConfig,
    pub ckpt: String,
    pub data_file: String,
    pub questions: Option<usize>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    mode: String,
    questions: usize,
    em: f64,
    str_em: f64,
    mean_context_length: f64,
    predictions: Vec<String>,
}

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    let file = load_file_config(args.config.as_ref())?;
    let mode = Mode::parse(&args.mode)?;
    let d = InferenceConfig::default();
    let infer_cfg = InferenceConfig {
        mode,
        k_sentences: pick(args.k_sentences, file.infer.k_sentences, d.k_sentences),
        l_max: pick(args.l_max, file.infer.l_max, d.l_max),
        first_k_tokens: pick(args.first_k, file.infer.first_k_tokens, d.first_k_tokens),
        top_passages: pick(args.top_passages, file.infer.top_passages, d.top_passages),
        beam_size: pick(args.beam, file.infer.beam_size, d.beam_size),
        max_decode_len: pick(args.max_decode, file.infer.max_decode_len, d.max_decode_len),
    };
    let mut model = load_model(&args.ckpt)?;
    let vocab = load_vocab(&args.vocab)?;
    let examples = load_examples(&args.data_file, args.questions)?;

    if mode == Mode::RerankFid {
        if let Some(fit) = &args.rerank_fit_file {
            let fit_examples = load_examples(fit, Some(args.rerank_fit_n))?;
            let used = fit_rerank_head(&mut model, &vocab, &fit_examples, 3, 1e-2, args.seed)?;
            println!("fitted rerank head on {used} examples");
        }
    }

    let resolved = ResolvedEval {
        command: "eval".into(),
        seed: args.seed,
        mode: mode.as_str().into(),
        infer: infer_cfg.clone(),
        ckpt: args.ckpt.display().to_string(),
        data_file: args.data_file.display().to_string(),
        questions: args.questions,
    };
    if let Some(out) = &args.out {
        write_resolved(out, &resolved)?;
    }

    let mut predictions = Vec::with_capacity(examples.len());
    let mut ctx = 0.0;
    let mut em_hits = 0usize;
    let mut strem_sum = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let out = answer(&model, &vocab, ex, &infer_cfg)
            .with_context(|| format!("example {i}"))?;
        ctx += out.context_length as f64;
        if exact_match(&out.text, &ex.answers) {
            em_hits += 1;
        }
        strem_sum += str_em(&out.text, &ex.answers);
        predictions.push(out.text);
    }
    let n = examples.len().max(1) as f64;
    let report = EvalReport {
        mode: mode.as_str().into(),
        questions: examples.len(),
        em: em_hits as f64 / n,
        str_em: strem_sum / n,
        mean_context_length: ctx / n,
        predictions,
    };
    println!(
        "{}: EM {:.4} STR-EM {:.4} context {:.1} over {} questions",
        report.mode, report.em, report.str_em, report.mean_context_length, report.questions
    );
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let body = serde_json::to_string_pretty(&report)?;
        std::fs::write(out.join("eval.json"), body + "\n")?;
    }
    Ok(())
}
