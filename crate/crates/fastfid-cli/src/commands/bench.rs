//! `bench`: time-per-question and context-length accounting across
//! inference modes, with speedup relative to the full-memory mode, JSON
//! reports and SVG plots.

use std::path::PathBuf;

use anyhow::bail;
use clap::Args;
use serde::{Deserialize, Serialize};

use fastfid::infer::{bench, fit_rerank_head, BenchModels, BenchOptions, InferenceConfig, Mode};
use fastfid::report::{svg_bar_chart, svg_line_chart, write_reports};

use crate::commands::{load_examples, load_model, load_vocab};
use crate::config::{load_file_config, pick, write_resolved};

#[derive(Args)]
pub struct BenchArgs {
    /// Dataset file(s); pass several to sweep over passage counts.
    #[arg(long, required = true)]
    pub data_file: Vec<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint for fid / fid_light / rerank_fid modes.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Checkpoint for fastfid mode (defaults to --ckpt).
    #[arg(long)]
    pub ckpt_stage2: Option<PathBuf>,
    /// Comma-separated mode list.
    #[arg(long, default_value = "fid,fastfid")]
    pub modes: String,
    #[arg(long)]
    pub questions: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
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
    #[arg(long)]
    pub rerank_fit_file: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub rerank_fit_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResolvedBench {
    pub command: String,
    pub seed: u64,
    pub modes: Vec<String>,
    pub infer: InferenceConfig,
    pub repetitions: usize,
    pub warmup: usize,
    pub questions: Option<usize>,
    pub data_files: Vec<String>,
    pub ckpt: String,
    pub ckpt_stage2: Option<String>,
}

pub fn run(args: BenchArgs) -> anyhow::Result<()> {
    let file = load_file_config(args.config.as_ref())?;
    let modes: Vec<Mode> = args
        .modes
        .split(',')
        .map(|m| Mode::parse(m.trim()))
        .collect::<fastfid::Result<_>>()?;
    if modes.is_empty() {
        bail!("--modes must name at least one mode");
    }
    let d = InferenceConfig::default();
    let base_cfg = InferenceConfig {
        mode: Mode::Fid,
        k_sentences: pick(args.k_sentences, file.infer.k_sentences, d.k_sentences),
        l_max: pick(args.l_max, file.infer.l_max, d.l_max),
        first_k_tokens: pick(args.first_k, file.infer.first_k_tokens, d.first_k_tokens),
        top_passages: pick(args.top_passages, file.infer.top_passages, d.top_passages),
        beam_size: pick(args.beam, file.infer.beam_size, d.beam_size),
        max_decode_len: pick(args.max_decode, file.infer.max_decode_len, d.max_decode_len),
    };
    let opts = BenchOptions {
        repetitions: pick(args.reps, file.bench.repetitions, 5),
        warmup: pick(args.warmup, file.bench.warmup, 2),
    };
    let questions = args.questions.or(file.bench.questions);

    let mut base = load_model(&args.ckpt)?;
    let stage2 = match &args.ckpt_stage2 {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let vocab = load_vocab(&args.vocab)?;
    if modes.contains(&Mode::RerankFid) {
        if let Some(fit) = &args.rerank_fit_file {
            let fit_examples = load_examples(fit, Some(args.rerank_fit_n))?;
            let used = fit_rerank_head(&mut base, &vocab, &fit_examples, 3, 1e-2, args.seed)?;
            println!("fitted rerank head on {used} examples");
        }
    }

    let resolved = ResolvedBench {
        command: "bench".into(),
        seed: args.seed,
        modes: modes.iter().map(|m| m.as_str().to_string()).collect(),
        infer: base_cfg.clone(),
        repetitions: opts.repetitions,
        warmup: opts.warmup,
        questions,
        data_files: args.data_file.iter().map(|p| p.display().to_string()).collect(),
        ckpt: args.ckpt.display().to_string(),
        ckpt_stage2: args.ckpt_stage2.as_ref().map(|p| p.display().to_string()),
    };
    write_resolved(&args.out, &resolved)?;

    let models = BenchModels {
        base: &base,
        selected: stage2.as_ref(),
    };
    let configs: Vec<InferenceConfig> = modes
        .iter()
        .map(|&mode| InferenceConfig { mode, ..base_cfg.clone() })
        .collect();

    let mut all_reports = Vec::new();
    let mut speedup_curve: Vec<(f64, f64)> = Vec::new();
    for data_file in &args.data_file {
        let examples = load_examples(data_file, questions)?;
        let reports = bench(&models, &vocab, &examples, &configs, &opts)?;
        for r in &reports {
            println!(
                "K={} {}: tpq {:.1}ms (enc {:.1} sel {:.1} dec {:.1}) context {:.0} speedup {} em {:.3}",
                r.k_passages,
                r.mode,
                r.tpq_ms,
                r.encode_ms,
                r.select_ms,
                r.decode_ms,
                r.context_length,
                r.speedup.map(|s| format!("{s:.2}x")).unwrap_or_else(|| "-".into()),
                r.em,
            );
            if r.mode == "fastfid" {
                if let Some(s) = r.speedup {
                    speedup_curve.push((r.k_passages as f64, s));
                }
            }
        }
        all_reports.extend(reports);
    }
    std::fs::create_dir_all(&args.out)?;
    write_reports(&args.out.join("bench.json"), &all_reports)?;

    // TPQ bars for the first dataset's modes
    let first_k = all_reports.first().map(|r| r.k_passages).unwrap_or(0);
    let bars: Vec<(String, f64)> = all_reports
        .iter()
        .filter(|r| r.k_passages == first_k)
        .map(|r| (r.mode.clone(), r.tpq_ms))
        .collect();
    std::fs::write(
        args.out.join("tpq.svg"),
        svg_bar_chart(&format!("time per question, K={first_k}"), "ms", &bars),
    )?;
    if speedup_curve.len() > 1 {
        speedup_curve.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        std::fs::write(
            args.out.join("speedup_vs_k.svg"),
            svg_line_chart(
                "speedup vs retrieved passages",
                "passages",
                "speedup over fid",
                &[("fastfid".into(), speedup_curve)],
            ),
        )?;
    }
    Ok(())
}
