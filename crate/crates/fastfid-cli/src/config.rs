//! Config file support: a TOML file supplies defaults that command-line
//! flags override. Each command writes the fully resolved settings next to
//! its outputs so any run can be reproduced from its output directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// Optional config-file sections. Field names mirror the flags.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct DataSection {
    pub n_train: Option<usize>,
    pub n_dev: Option<usize>,
    pub n_test: Option<usize>,
    pub k_passages: Option<usize>,
    pub difficulty: Option<f64>,
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_enc_layers: Option<usize>,
    pub n_dec_layers: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub max_passage_len: Option<usize>,
    pub max_decode_len: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct TrainSection {
    pub lambda: Option<f64>,
    pub stage1_max_lr: Option<f64>,
    pub stage1_warmup_ratio: Option<f64>,
    pub stage1_epochs: Option<usize>,
    pub stage2_lr: Option<f64>,
    pub stage2_epochs: Option<usize>,
    pub k_sentences: Option<usize>,
    pub l_max: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_clip: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct InferSection {
    pub k_sentences: Option<usize>,
    pub l_max: Option<usize>,
    pub first_k_tokens: Option<usize>,
    pub top_passages: Option<usize>,
    pub beam_size: Option<usize>,
    pub max_decode_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct BenchSection {
    pub repetitions: Option<usize>,
    pub warmup: Option<usize>,
    pub questions: Option<usize>,
}

pub fn load_file_config(path: Option<&PathBuf>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let body = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            toml::from_str(&body).with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

/// Write the resolved settings of a run as TOML beside its outputs.
pub fn write_resolved<T: Serialize>(out_dir: &Path, resolved: &T) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let body = toml::to_string_pretty(resolved).context("serializing resolved config")?;
    std::fs::write(out_dir.join("resolved-config.toml"), body)?;
    Ok(())
}

/// flags > file > default
pub fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
