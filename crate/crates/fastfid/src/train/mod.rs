//! Two-stage training pipeline.
//!
//! Stage 1 trains answer generation over the full memory together with the
//! span-selection heads (multi-task). Stage 2 continues from the stage-1
//! checkpoint and trains generation over the top-k selected spans, keeping
//! the selection loss so the selector stays trained.

mod loss;
mod optim;

pub use loss::{
    generation_loss_graph, prepare_dataset, prepare_example, stage1_loss_graph, stage2_loss_graph,
    LossParts, PreparedExample,
};
pub use optim::{clip_global_norm, linear_warmup_decay, AdamW};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{accuracy_at_k, em_score};
use crate::data::{QAExample, Vocabulary};
use crate::error::{Error, Result};
use crate::infer::{answer, InferenceConfig, Mode};
use crate::model::{grad_sink, load_checkpoint, save_checkpoint, Bound, CheckpointMeta, Model, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
        }
    }
}

/// Training hyperparameters for both stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Selection-loss weight λ.
    pub lambda: f64,
    pub stage1_max_lr: f64,
    pub stage1_warmup_ratio: f64,
    pub stage1_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_epochs: usize,
    /// Spans kept by stage-2 select-generation training.
    pub k_sentences: usize,
    /// Maximum candidate span length.
    pub l_max: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    /// k for the dev selection accuracy metric.
    pub dev_eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            stage1_max_lr: 1e-4,
            stage1_warmup_ratio: 0.1,
            stage1_epochs: 10,
            stage2_lr: 5e-5,
            stage2_epochs: 5,
            k_sentences: 5,
            l_max: 64,
            batch_size: 4,
            seed: 0,
            grad_clip: 1.0,
            weight_decay: 0.01,
            dev_eval_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 || self.k_sentences == 0 || self.l_max == 0 {
            return Err(Error::Config("batch_size, k_sentences and l_max must be positive".into()));
        }
        Ok(())
    }

    fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_epochs,
            Stage::Two => self.stage2_epochs,
        }
    }
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub l_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_s: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_acc_at_k: Option<f64>,
}

pub struct TrainOutcome {
    /// Model with the best-dev parameters.
    pub model: Model,
    pub best_dev_em: f64,
    pub best_epoch: usize,
    pub records: Vec<MetricsRecord>,
    /// Examples whose stage-2 selection kept nothing (full-memory fallback).
    pub fallback_count: usize,
    /// Examples without gold spans (selection loss skipped).
    pub no_supervision_count: usize,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x
}

/// Run one training stage. Metrics stream through `log` as they happen.
/// When `state_path` is given, a resumable state checkpoint is written
/// after every epoch and picked up on restart; the continued run
/// reproduces the uninterrupted loss trajectory exactly.
#[allow(clippy::too_many_arguments)]
pub fn train(
    stage: Stage,
    model: Model,
    vocab: &Vocabulary,
    train_examples: &[QAExample],
    dev_examples: &[QAExample],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&MetricsRecord),
    state_path: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_examples.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let n = model.config.max_passage_len;
    let max_decode = model.config.max_decode_len;
    let prepared = prepare_dataset(vocab, train_examples, n, max_decode)?;
    let no_supervision_count = prepared.iter().filter(|p| p.gold.total() == 0).count();

    let mut model = model;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut step = 0usize;
    let mut best_em = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut start_epoch = 0usize;

    if let Some(path) = state_path {
        if path.exists() {
            let state = load_train_state(path, &model)?;
            model.params = state.current;
            best_params = state.best;
            opt.m = state.m;
            opt.v = state.v;
            opt.t = state.step;
            step = state.step;
            best_em = state.best_em;
            best_epoch = state.best_epoch;
            start_epoch = state.epoch_done;
        }
    }

    let epochs = cfg.epochs(stage);
    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let total_steps = epochs * steps_per_epoch;
    let mut records = Vec::new();
    let mut fallback_count = 0usize;

    for epoch in start_epoch..epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, match stage {
            Stage::One => 1,
            Stage::Two => 2,
        }));
        order.shuffle(&mut shuffle_rng);

        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(Vec<Vec<f64>>, f64, f64, Option<f64>, bool)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, i as u64));
                    let mut b = Bound::new(&model, true);
                    let parts = match stage {
                        Stage::One => stage1_loss_graph(&mut b, &prepared[i], cfg.lambda, true, Some(&mut rng))?,
                        Stage::Two => stage2_loss_graph(
                            &mut b,
                            &prepared[i],
                            cfg.lambda,
                            cfg.k_sentences,
                            cfg.l_max,
                            true,
                            Some(&mut rng),
                        )?,
                    };
                    let loss_val = b.graph.value(parts.total);
                    b.graph.backward(parts.total)?;
                    let mut sink = grad_sink(&model.params);
                    b.collect_grads(&mut sink);
                    Ok((sink, loss_val, parts.l_g, parts.l_s, parts.used_fallback))
                })
                .collect();

            let mut grads = grad_sink(&model.params);
            let mut loss_sum = 0.0;
            let mut lg_sum = 0.0;
            let mut ls_sum = 0.0;
            let mut ls_n = 0usize;
            let bn = batch.len() as f64;
            for r in results {
                let (sink, loss_val, lg, ls, fb) = r.map_err(|e| match e {
                    Error::NonFinite { op } => {
                        Error::Diverged(format!("step {}: non-finite value in {op}", step + 1))
                    }
                    other => other,
                })?;
                loss_sum += loss_val;
                lg_sum += lg;
                if let Some(v) = ls {
                    ls_sum += v;
                    ls_n += 1;
                }
                if fb {
                    fallback_count += 1;
                }
                for (acc, g) in grads.iter_mut().zip(sink) {
                    if g.is_empty() {
                        continue;
                    }
                    if acc.is_empty() {
                        acc.resize(g.len(), 0.0);
                    }
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
            }
            for g in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x /= bn;
                }
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            step += 1;
            let lr = match stage {
                Stage::One => linear_warmup_decay(step, total_steps, cfg.stage1_warmup_ratio, cfg.stage1_max_lr),
                Stage::Two => cfg.stage2_lr,
            };
            opt.step(&mut model.params, &grads, lr);

            let rec = MetricsRecord {
                step,
                stage: stage.tag().into(),
                epoch,
                loss: loss_sum / bn,
                l_g: lg_sum / bn,
                l_s: if ls_n > 0 { Some(ls_sum / ls_n as f64) } else { None },
                lr,
                dev_em: None,
                dev_acc_at_k: None,
            };
            log(&rec);
            records.push(rec);
        }

        // dev evaluation: EM with the stage's inference mode, plus
        // selection accuracy@k; the best-dev checkpoint wins
        let (dev_em, dev_acc) = evaluate_dev(&model, vocab, dev_examples, stage, cfg)?;
        if dev_em > best_em {
            best_em = dev_em;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        // epoch-summary line: dev metrics only
        let rec = MetricsRecord {
            step,
            stage: stage.tag().into(),
            epoch,
            loss: 0.0,
            l_g: 0.0,
            l_s: None,
            lr: 0.0,
            dev_em: Some(dev_em),
            dev_acc_at_k: Some(dev_acc),
        };
        log(&rec);
        records.push(rec);

        if let Some(path) = state_path {
            save_train_state(
                path,
                &model,
                &best_params,
                &opt,
                stage,
                step,
                epoch + 1,
                best_em,
                best_epoch,
                cfg.seed,
            )?;
        }
    }

    Ok(TrainOutcome {
        model: Model {
            config: model.config,
            params: best_params,
        },
        best_dev_em: best_em.max(0.0),
        best_epoch,
        records,
        fallback_count,
        no_supervision_count,
    })
}

fn evaluate_dev(
    model: &Model,
    vocab: &Vocabulary,
    dev: &[QAExample],
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Ok((0.0, 0.0));
    }
    let infer_cfg = InferenceConfig {
        mode: match stage {
            Stage::One => Mode::Fid,
            Stage::Two => Mode::FastFid,
        },
        k_sentences: cfg.k_sentences,
        l_max: cfg.l_max,
        beam_size: 1,
        max_decode_len: model.config.max_decode_len,
        ..Default::default()
    };
    let predictions: Vec<String> = dev
        .par_iter()
        .map(|ex| answer(model, vocab, ex, &infer_cfg).map(|o| o.text))
        .collect::<Result<_>>()?;
    let em = em_score(&predictions, dev);
    let curve = accuracy_at_k(model, vocab, dev, &[cfg.dev_eval_k], cfg.l_max)?;
    Ok((em, curve[0].1))
}

// ── Resumable state ──────────────────────────────────────────────────

struct TrainState {
    current: ParamSet,
    best: ParamSet,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    epoch_done: usize,
    best_em: f64,
    best_epoch: usize,
}

#[allow(clippy::too_many_arguments)]
fn save_train_state(
    path: &Path,
    model: &Model,
    best: &ParamSet,
    opt: &AdamW,
    stage: Stage,
    step: usize,
    epoch_done: usize,
    best_em: f64,
    best_epoch: usize,
    seed: u64,
) -> Result<()> {
    let mut params = ParamSet::default();
    for (i, e) in model.params.iter().enumerate() {
        params.push(&format!("cur.{}", e.name), &e.shape, e.data.clone(), e.decay);
        params.push(&format!("best.{}", e.name), &best.entry(i).shape, best.entry(i).data.clone(), e.decay);
        params.push(&format!("m.{}", e.name), &e.shape, opt.m[i].clone(), false);
        params.push(&format!("v.{}", e.name), &e.shape, opt.v[i].clone(), false);
    }
    let mut extra = serde_json::Map::new();
    extra.insert("step".into(), step.into());
    extra.insert("epoch_done".into(), epoch_done.into());
    extra.insert("best_em".into(), best_em.into());
    extra.insert("best_epoch".into(), best_epoch.into());
    let meta = CheckpointMeta {
        config: model.config.clone(),
        stage: format!("{}-state", stage.tag()),
        seed,
        extra,
    };
    save_checkpoint(path, &meta, &params)
}

fn load_train_state(path: &Path, model: &Model) -> Result<TrainState> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.config != model.config {
        return Err(Error::Checkpoint("training state config differs from model config".into()));
    }
    let mut current = ParamSet::default();
    let mut best = ParamSet::default();
    let mut m = Vec::with_capacity(model.params.len());
    let mut v = Vec::with_capacity(model.params.len());
    for e in model.params.iter() {
        let pick = |prefix: &str| -> Result<&crate::model::ParamEntry> {
            let idx = ckpt
                .params
                .index(&format!("{prefix}.{}", e.name))
                .ok_or_else(|| Error::Checkpoint(format!("state missing {prefix}.{}", e.name)))?;
            Ok(ckpt.params.entry(idx))
        };
        let c = pick("cur")?;
        current.push(&e.name, &c.shape, c.data.clone(), e.decay);
        let bst = pick("best")?;
        best.push(&e.name, &bst.shape, bst.data.clone(), e.decay);
        m.push(pick("m")?.data.clone());
        v.push(pick("v")?.data.clone());
    }
    let get = |k: &str| -> f64 {
        ckpt.meta
            .extra
            .get(k)
            .and_then(|v| v.as_f64())
            .unwrap_or(0.0)
    };
    Ok(TrainState {
        current,
        best,
        m,
        v,
        step: get("step") as usize,
        epoch_done: get("epoch_done") as usize,
        best_em: get("best_em"),
        best_epoch: get("best_epoch") as usize,
    })
}
