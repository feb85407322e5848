//! `train-stage1` / `train-stage2`: the two-stage training pipeline with a
//! streamed metrics log and best-dev checkpointing.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use fastfid::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Model, ModelConfig};
use fastfid::train::{train, Stage, TrainConfig};

use crate::commands::{load_examples, load_vocab};
use crate::config::{load_file_config, pick, write_resolved, FileConfig};

#[derive(Args)]
pub struct Stage1Args {
    /// Directory produced by gen-data (train/dev/vocab).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, metrics log and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k_sentences: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    // model shape
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_enc_layers: Option<usize>,
    #[arg(long)]
    pub n_dec_layers: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_passage_len: Option<usize>,
    #[arg(long)]
    pub max_decode_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Resume from the run directory's training state if present.
    #[arg(long, default_value_t = false)]
    pub resume: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct Stage2Args {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint to continue from (required).
    #[arg(long)]
    pub stage1_ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k_sentences: Option<usize>,
    #[arg(long)]
    pub l_max: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Train from random initialization instead of the stage-1 checkpoint
    /// (ablation support; model shape is still read from the checkpoint).
    #[arg(long, default_value_t = false)]
    pub from_scratch: bool,
    #[arg(long, default_value_t = false)]
    pub resume: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResolvedTrain {
    pub command: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage1_ckpt: Option<String>,
    pub from_scratch: bool,
}

fn resolve_train(file: &FileConfig, seed: u64) -> TrainConfig {
    let t = &file.train;
    let d = TrainConfig::default();
    TrainConfig {
        lambda: t.lambda.unwrap_or(d.lambda),
        stage1_max_lr: t.stage1_max_lr.unwrap_or(d.stage1_max_lr),
        stage1_warmup_ratio: t.stage1_warmup_ratio.unwrap_or(d.stage1_warmup_ratio),
        stage1_epochs: t.stage1_epochs.unwrap_or(d.stage1_epochs),
        stage2_lr: t.stage2_lr.unwrap_or(d.stage2_lr),
        stage2_epochs: t.stage2_epochs.unwrap_or(d.stage2_epochs),
        k_sentences: t.k_sentences.unwrap_or(d.k_sentences),
        l_max: t.l_max.unwrap_or(d.l_max),
        batch_size: t.batch_size.unwrap_or(d.batch_size),
        seed,
        grad_clip: t.grad_clip.unwrap_or(d.grad_clip),
        weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
        dev_eval_k: d.dev_eval_k,
    }
}

fn run_stage(
    stage: Stage,
    model: Model,
    data_dir: &PathBuf,
    out: &PathBuf,
    cfg: &TrainConfig,
    resolved: &ResolvedTrain,
    resume: bool,
) -> anyhow::Result<()> {
    let vocab = load_vocab(data_dir)?;
    let train_set = load_examples(&data_dir.join("train.jsonl"), None)?;
    let dev_set = load_examples(&data_dir.join("dev.jsonl"), None)?;
    std::fs::create_dir_all(out)?;
    write_resolved(out, resolved)?;

    let log_path = out.join("metrics.jsonl");
    let mut log_file = std::io::BufWriter::new(
        std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let state_path = out.join("state.ckpt");
    if !resume && state_path.exists() {
        std::fs::remove_file(&state_path)?;
    }
    let mut log = |rec: &fastfid::train::MetricsRecord| {
        if let Ok(line) = serde_json::to_string(rec) {
            let _ = writeln!(log_file, "{line}");
            let _ = log_file.flush();
        }
        if let Some(em) = rec.dev_em {
            println!(
                "[{}] epoch {} step {}: dev_em {:.4} dev_acc@k {:.4}",
                rec.stage,
                rec.epoch,
                rec.step,
                em,
                rec.dev_acc_at_k.unwrap_or(0.0)
            );
        }
    };
    let seed = cfg.seed;
    let outcome = train(
        stage,
        model,
        &vocab,
        &train_set,
        &dev_set,
        cfg,
        &mut log,
        Some(&state_path),
    )?;
    let meta = CheckpointMeta {
        config: outcome.model.config.clone(),
        stage: stage.tag().into(),
        seed,
        extra: {
            let mut m = serde_json::Map::new();
            m.insert("best_dev_em".into(), outcome.best_dev_em.into());
            m.insert("best_epoch".into(), outcome.best_epoch.into());
            m
        },
    };
    save_checkpoint(&out.join("checkpoint.ckpt"), &meta, &outcome.model.params)?;
    println!(
        "{} finished: best dev EM {:.4} at epoch {} -> {}",
        stage.tag(),
        outcome.best_dev_em,
        outcome.best_epoch,
        out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

pub fn run_stage1(args: Stage1Args) -> anyhow::Result<()> {
    let file = load_file_config(args.config.as_ref())?;
    let mut cfg = resolve_train(&file, args.seed);
    cfg.lambda = pick(args.lambda, None, cfg.lambda);
    cfg.stage1_max_lr = pick(args.max_lr, None, cfg.stage1_max_lr);
    cfg.stage1_warmup_ratio = pick(args.warmup_ratio, None, cfg.stage1_warmup_ratio);
    cfg.stage1_epochs = pick(args.epochs, None, cfg.stage1_epochs);
    cfg.batch_size = pick(args.batch_size, None, cfg.batch_size);
    cfg.k_sentences = pick(args.k_sentences, None, cfg.k_sentences);
    cfg.l_max = pick(args.l_max, None, cfg.l_max);
    cfg.grad_clip = pick(args.grad_clip, None, cfg.grad_clip);
    cfg.weight_decay = pick(args.weight_decay, None, cfg.weight_decay);

    let vocab = load_vocab(&args.data)?;
    let md = &file.model;
    let dm = ModelConfig::default();
    let model_cfg = ModelConfig {
        vocab_size: vocab.len().max(dm.vocab_size),
        d_model: pick(args.d_model, md.d_model, dm.d_model),
        n_heads: pick(args.n_heads, md.n_heads, dm.n_heads),
        n_enc_layers: pick(args.n_enc_layers, md.n_enc_layers, dm.n_enc_layers),
        n_dec_layers: pick(args.n_dec_layers, md.n_dec_layers, dm.n_dec_layers),
        ffn_dim: pick(args.ffn_dim, md.ffn_dim, dm.ffn_dim),
        max_passage_len: pick(args.max_passage_len, md.max_passage_len, dm.max_passage_len),
        max_decode_len: pick(args.max_decode_len, md.max_decode_len, dm.max_decode_len),
        dropout: pick(args.dropout, md.dropout, dm.dropout),
    };
    let mut rng = <ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(
        args.seed.wrapping_add(0x5eed_1111),
    );
    let model = Model::init(model_cfg.clone(), &mut rng)?;
    let resolved = ResolvedTrain {
        command: "train-stage1".into(),
        seed: args.seed,
        model: model_cfg,
        train: cfg.clone(),
        stage1_ckpt: None,
        from_scratch: true,
    };
    run_stage(Stage::One, model, &args.data, &args.out, &cfg, &resolved, args.resume)
}

pub fn run_stage2(args: Stage2Args) -> anyhow::Result<()> {
    if !args.stage1_ckpt.exists() {
        bail!(
            "stage-1 checkpoint {} does not exist (train-stage2 requires --stage1-ckpt)",
            args.stage1_ckpt.display()
        );
    }
    let file = load_file_config(args.config.as_ref())?;
    let mut cfg = resolve_train(&file, args.seed);
    cfg.lambda = pick(args.lambda, None, cfg.lambda);
    cfg.stage2_lr = pick(args.lr, None, cfg.stage2_lr);
    cfg.stage2_epochs = pick(args.epochs, None, cfg.stage2_epochs);
    cfg.batch_size = pick(args.batch_size, None, cfg.batch_size);
    cfg.k_sentences = pick(args.k_sentences, None, cfg.k_sentences);
    cfg.l_max = pick(args.l_max, None, cfg.l_max);
    cfg.grad_clip = pick(args.grad_clip, None, cfg.grad_clip);
    cfg.weight_decay = pick(args.weight_decay, None, cfg.weight_decay);

    let ckpt = load_checkpoint(&args.stage1_ckpt)?;
    let model = if args.from_scratch {
        let mut rng = <ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(
            args.seed.wrapping_add(0x5eed_2222),
        );
        Model::init(ckpt.meta.config.clone(), &mut rng)?
    } else {
        ckpt.into_model()?
    };
    let resolved = ResolvedTrain {
        command: "train-stage2".into(),
        seed: args.seed,
        model: model.config.clone(),
        train: cfg.clone(),
        stage1_ckpt: Some(args.stage1_ckpt.display().to_string()),
        from_scratch: args.from_scratch,
    };
    run_stage(Stage::Two, model, &args.data, &args.out, &cfg, &resolved, args.resume)
}
