//! `analyze`: selection accuracy@k curve and the cross-attention
//! contribution summary (selected vs non-selected tokens).

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use fastfid::analysis::{accuracy_at_k, attention_profile, selection_ceiling};
use fastfid::report::svg_line_chart;

use crate::commands::{load_examples, load_model, load_vocab};
use crate::config::{load_file_config, pick, write_resolved};

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data_file: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated k values for the accuracy@k curve.
    #[arg(long, default_value = "1,2,5,10,20")]
    pub ks: String,
    /// Spans kept when partitioning tokens for the attention study.
    #[arg(long)]
    pub k_sentences: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
    /// Cap the number of analyzed questions.
    #[arg(long)]
    pub questions: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResolvedAnalyze {
    pub command: String,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub k_sentences: usize,
    pub l_max: usize,
    pub questions: Option<usize>,
    pub ckpt: String,
    pub data_file: String,
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    accuracy_at_k: Vec<(usize, f64)>,
    selection_ceiling: f64,
    mean_attention_selected: f64,
    mean_attention_unselected: f64,
    attention_ratio: f64,
    questions: usize,
}

pub fn run(args: AnalyzeArgs) -> anyhow::Result<()> {
    let file = load_file_config(args.config.as_ref())?;
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("parsing --ks"))
        .collect::<anyhow::Result<_>>()?;
    let k_sentences = pick(args.k_sentences, file.infer.k_sentences, 5);
    let l_max = pick(args.l_max, file.infer.l_max, 64);

    let model = load_model(&args.ckpt)?;
    let vocab = load_vocab(&args.vocab)?;
    let examples = load_examples(&args.data_file, args.questions)?;

    let resolved = ResolvedAnalyze {
        command: "analyze".into(),
        seed: args.seed,
        ks: ks.clone(),
        k_sentences,
        l_max,
        questions: args.questions,
        ckpt: args.ckpt.display().to_string(),
        data_file: args.data_file.display().to_string(),
    };
    write_resolved(&args.out, &resolved)?;

    let curve = accuracy_at_k(&model, &vocab, &examples, &ks, l_max)?;
    let ceiling = selection_ceiling(&model, &vocab, &examples)?;

    // macro-average the attention partition means over questions
    let mut sel_sum = 0.0;
    let mut unsel_sum = 0.0;
    let mut counted = 0usize;
    for ex in &examples {
        let profile = attention_profile(&model, &vocab, ex, k_sentences, l_max)?;
        sel_sum += profile.mean_selected;
        unsel_sum += profile.mean_unselected;
        counted += 1;
    }
    let mean_sel = sel_sum / counted.max(1) as f64;
    let mean_unsel = unsel_sum / counted.max(1) as f64;

    let report = AnalyzeReport {
        accuracy_at_k: curve.clone(),
        selection_ceiling: ceiling,
        mean_attention_selected: mean_sel,
        mean_attention_unselected: mean_unsel,
        attention_ratio: mean_sel / mean_unsel,
        questions: examples.len(),
    };
    println!(
        "accuracy@k: {:?}\nceiling {:.4}; attention selected {:.3e} vs unselected {:.3e} (ratio {:.2})",
        report.accuracy_at_k, ceiling, mean_sel, mean_unsel, report.attention_ratio
    );
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("analysis.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let pts: Vec<(f64, f64)> = curve.iter().map(|&(k, v)| (k as f64, v)).collect();
    let ceiling_line: Vec<(f64, f64)> = pts.iter().map(|&(k, _)| (k, ceiling)).collect();
    std::fs::write(
        args.out.join("accuracy_at_k.svg"),
        svg_line_chart(
            "sentence selection accuracy@k",
            "k selected sentences",
            "accuracy",
            &[("selector".into(), pts), ("ceiling".into(), ceiling_line)],
        ),
    )?;
    Ok(())
}
