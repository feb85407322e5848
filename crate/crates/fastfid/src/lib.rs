//! A fusion-in-decoder reader with sentence selection heads.
//!
//! The library implements the full pipeline on a miniature encoder-decoder
//! transformer trained from scratch on synthetic data:
//!
//! - [`autodiff`]: dense f64 tensors with a recording compute graph.
//! - [`model`]: the reader — per-passage encoding, concatenated
//!   cross-attention memory, autoregressive decoder, checkpoints.
//! - [`select`]: span scoring heads, local/global span probabilities, the
//!   multi-objective selection loss and top-k span gathering.
//! - [`data`]: tokenizer, input formatting, crucial-sentence annotation,
//!   synthetic corpus generation, dataset files.
//! - [`train`]: the two-stage training pipeline (multi-task, then
//!   select-generation) with AdamW and LR schedules.
//! - [`infer`]: greedy/beam decoding, selection-based inference, the
//!   first-k-tokens and passage-rerank baselines, and the latency benchmark.
//! - [`analysis`]: EM / STR-EM / accuracy@k metrics and the cross-attention
//!   contribution study.
//! - [`report`]: benchmark report files and SVG plots.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod infer;
pub mod model;
pub mod report;
pub mod select;
pub mod train;

pub use error::{Error, Result};
