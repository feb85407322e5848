//! Datasets: examples, tokenization, input formatting, gold-sentence
//! annotation, and synthetic corpus generation.

mod format;
mod synth;
mod tokenizer;

pub use format::{annotate_crucial_sentences, format_input, sentence_split, FormattedInput, GoldAnnotation};
pub use synth::{build_vocab, synth_generate, GeneratedDataset, SynthConfig};
pub use tokenizer::{Vocabulary, EOS_ID, MARK_CONTEXT_ID, MARK_QUESTION_ID, MARK_TITLE_ID, PAD_ID, UNK_ID};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One retrieved passage: a title and its body text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub title: String,
    pub text: String,
}

/// A question with gold answers and retrieved passages. `long_answer`
/// holds a reference long-form answer for substring-match evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub question: String,
    pub answers: Vec<String>,
    pub passages: Vec<Passage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_answer: Option<String>,
}

impl QAExample {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.passages.is_empty() {
            return Err("passages must be non-empty".into());
        }
        if self.answers.is_empty() || self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err("answers must contain at least one non-empty string".into());
        }
        Ok(())
    }
}

/// Load a line-delimited dataset: one JSON example per line.
pub fn load_dataset(path: &Path) -> Result<Vec<QAExample>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        ex.validate().map_err(|detail| Error::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            detail,
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, examples: &[QAExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
