pub mod analyze;
pub mod bench;
pub mod eval;
pub mod gen;
pub mod train;

use std::path::Path;

use anyhow::Context;
use fastfid::data::{load_dataset, QAExample, Vocabulary};
use fastfid::model::{load_checkpoint, Model};

pub fn load_model(path: &Path) -> anyhow::Result<Model> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ckpt.into_model()?)
}

pub fn load_examples(path: &Path, limit: Option<usize>) -> anyhow::Result<Vec<QAExample>> {
    let mut examples = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if let Some(n) = limit {
        examples.truncate(n);
    }
    Ok(examples)
}

pub fn load_vocab(dir_or_file: &Path) -> anyhow::Result<Vocabulary> {
    let path = if dir_or_file.is_dir() {
        dir_or_file.join("vocab.txt")
    } else {
        dir_or_file.to_path_buf()
    };
    Ok(Vocabulary::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))?)
}
