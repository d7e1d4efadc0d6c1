//! Multitask training loop.
//!
//! Batches are drawn by task-weighted sampling with replacement, padded to a
//! shared length, and masked so pad positions contribute nothing to the
//! loss. Optimization is Adam under a global-norm gradient clip, with a
//! linear-warmup / inverse-square-root learning-rate schedule. Every step
//! appends one metrics record (no timestamps, so reruns are byte-identical);
//! held-out per-task perplexity is evaluated periodically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Task;
use crate::model::{
    batch_cross_entropy, loss_and_grads, math::sum_sq, ModelError, ModelParams, Scalar, ScoredSeq,
};

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.98;
/// Adam denominator fuzz.
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("task {task} has weight {weight} but an empty dataset")]
    EmptyTask { task: Task, weight: f64 },
    #[error("bad training sequence: {0}")]
    BadSequence(String),
    #[error("loss became non-finite at step {step}; aborting")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Training hyperparameters. Serializes as the on-disk config format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Per-task sampling weights (textlm, speechlm, asr, tts); any
    /// nonnegative vector with positive sum, normalized internally.
    pub task_weights: [f64; 4],
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Maximum gradient global norm before the Adam update.
    pub grad_clip: f64,
    /// Held-out evaluation cadence, in steps.
    pub eval_every: usize,
    /// Token id used to pad batches; masked out of every loss.
    pub pad_id: u32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.task_weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return bad(format!(
                "task weights must be finite and nonnegative, got {:?}",
                self.task_weights
            ));
        }
        if self.task_weights.iter().sum::<f64>() <= 0.0 {
            return bad("task weights must not all be zero".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return bad(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }

    /// Weights scaled to sum to exactly 1.
    pub fn normalized_weights(&self) -> [f64; 4] {
        let sum: f64 = self.task_weights.iter().sum();
        let mut out = self.task_weights;
        for w in &mut out {
            *w /= sum;
        }
        out
    }
}

/// Task weights proportional to per-task corpus sizes.
pub fn weights_from_counts(counts: [usize; 4]) -> [f64; 4] {
    let sum: usize = counts.iter().sum();
    assert!(sum > 0, "at least one task needs data");
    counts.map(|c| c as f64 / sum as f64)
}

/// Formatted training sequences grouped by task.
#[derive(Debug, Clone, Default)]
pub struct MixedDataset {
    per_task: [Vec<Vec<u32>>; 4],
}

impl MixedDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = (Task, Vec<u32>)>) -> Self {
        let mut mix = Self::new();
        for (task, tokens) in records {
            mix.push(task, tokens);
        }
        mix
    }

    pub fn push(&mut self, task: Task, tokens: Vec<u32>) {
        self.per_task[task.index()].push(tokens);
    }

    pub fn task(&self, task: Task) -> &[Vec<u32>] {
        &self.per_task[task.index()]
    }

    pub fn len(&self) -> usize {
        self.per_task.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every positively weighted task must have data; every sequence must be
    /// scorable and fit the model context.
    fn validate(&self, weights: &[f64; 4], max_seq_len: usize) -> Result<(), TrainError> {
        for task in Task::ALL {
            let w = weights[task.index()];
            if w > 0.0 && self.task(task).is_empty() {
                return Err(TrainError::EmptyTask { task, weight: w });
            }
            for (i, seq) in self.task(task).iter().enumerate() {
                if seq.len() < 2 {
                    return Err(TrainError::BadSequence(format!(
                        "{task} sequence {i} has {} tokens; need at least 2",
                        seq.len()
                    )));
                }
                if seq.len() > max_seq_len {
                    return Err(TrainError::BadSequence(format!(
                        "{task} sequence {i} has {} tokens; model context is {max_seq_len}",
                        seq.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One padded training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// batch_size rows, all padded to the longest drawn sequence.
    pub tokens: Vec<Vec<u32>>,
    /// Score masks: true on real tokens, false on padding.
    pub masks: Vec<Vec<bool>>,
    /// Which task each row was drawn from.
    pub tasks: Vec<Task>,
}

impl Batch {
    /// Empirical per-task fraction of rows — the audit trail for the mix.
    pub fn task_mix(&self) -> [f64; 4] {
        let mut counts = [0usize; 4];
        for &t in &self.tasks {
            counts[t.index()] += 1;
        }
        counts.map(|c| c as f64 / self.tasks.len() as f64)
    }

    fn scored(&self) -> Vec<ScoredSeq<'_>> {
        self.tokens
            .iter()
            .zip(&self.masks)
            .map(|(tokens, score_mask)| ScoredSeq {
                tokens,
                score_mask,
            })
            .collect()
    }
}

fn draw_task(weights: &[f64; 4], rng: &mut ChaCha8Rng) -> Task {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = Task::Textlm;
    for task in Task::ALL {
        let w = weights[task.index()];
        if w > 0.0 {
            last_positive = task;
            cum += w;
            if u < cum {
                return task;
            }
        }
    }
    // Rounding can leave cum fractionally below 1; fall back to the last
    // task that can legally be drawn.
    last_positive
}

/// Draws `batch_size` sequences: task by weight, then uniformly within the
/// task; pads to the batch maximum with `pad_id`, masking pads out.
pub fn sample_batch(
    mix: &MixedDataset,
    weights: &[f64; 4],
    batch_size: usize,
    pad_id: u32,
    rng: &mut ChaCha8Rng,
) -> Batch {
    let mut tokens = Vec::with_capacity(batch_size);
    let mut tasks = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let task = draw_task(weights, rng);
        let pool = mix.task(task);
        assert!(!pool.is_empty(), "sampled task {task} has no data");
        let seq = &pool[rng.gen_range(0..pool.len())];
        tokens.push(seq.clone());
        tasks.push(task);
    }
    let width = tokens.iter().map(Vec::len).max().unwrap();
    let mut masks = Vec::with_capacity(batch_size);
    for seq in &mut tokens {
        let mut mask = vec![true; seq.len()];
        mask.resize(width, false);
        seq.resize(width, pad_id);
        masks.push(mask);
    }
    Batch {
        tokens,
        masks,
        tasks,
    }
}

/// Learning rate at 1-based `step`: linear warmup to `peak_lr`, then
/// inverse-square-root decay peak_lr·sqrt(warmup/step).
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    if step <= cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.peak_lr * (cfg.warmup_steps as f64 / step as f64).sqrt()
    }
}

/// Adam moment buffers. Kept in the training precision.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
    t: usize,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
            t: 0,
        }
    }

    /// Clips `grads` to `clip` global norm, then applies one bias-corrected
    /// Adam update to `params` at learning rate `lr`.
    pub fn step(&mut self, params: &mut [S], grads: &mut [S], lr: f64, clip: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let norm = sum_sq(grads).sqrt();
        if norm > clip {
            let scale = S::from_f64(clip / norm);
            for g in grads.iter_mut() {
                *g = *g * scale;
            }
        }
        self.t += 1;
        let b1 = S::from_f64(ADAM_BETA1);
        let b2 = S::from_f64(ADAM_BETA2);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(ADAM_EPS);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / corr1;
            let v_hat = self.v[i] / corr2;
            params[i] = params[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One line of the metrics log. Deliberately free of timestamps so repeated
/// runs serialize byte-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Empirical task mix of this step's batch (textlm, speechlm, asr, tts).
    pub task_mix: [f64; 4],
    pub lr: f64,
    pub loss: f64,
    /// Held-out per-task perplexity, present on evaluation steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_ppl: Option<BTreeMap<String, f64>>,
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<(), TrainError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_metrics_jsonl(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Teacher-forced perplexity of `seqs` (full-sequence scoring), or None for
/// an empty slice.
pub fn heldout_ppl<S: Scalar>(
    params: &ModelParams<S>,
    seqs: &[Vec<u32>],
) -> Result<Option<f64>, TrainError> {
    if seqs.is_empty() {
        return Ok(None);
    }
    let masks: Vec<Vec<bool>> = seqs.iter().map(|s| vec![true; s.len()]).collect();
    let batch: Vec<ScoredSeq<'_>> = seqs
        .iter()
        .zip(&masks)
        .map(|(tokens, score_mask)| ScoredSeq {
            tokens,
            score_mask,
        })
        .collect();
    let (ce, n) = batch_cross_entropy(params, &batch)?;
    Ok(Some((ce / n as f64).exp()))
}

fn eval_heldout<S: Scalar>(
    params: &ModelParams<S>,
    heldout: &MixedDataset,
) -> Result<BTreeMap<String, f64>, TrainError> {
    let mut out = BTreeMap::new();
    for task in Task::ALL {
        if let Some(ppl) = heldout_ppl(params, heldout.task(task))? {
            out.insert(task.name().to_string(), ppl);
        }
    }
    Ok(out)
}

/// Provenance block recorded in checkpoints produced by this trainer: the
/// full config plus the fixed optimizer constants.
pub fn train_provenance(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "optimizer": {
            "name": "adam",
            "beta1": ADAM_BETA1,
            "beta2": ADAM_BETA2,
            "eps": ADAM_EPS,
        },
        "schedule": "linear-warmup inverse-sqrt",
        "train_config": cfg,
    })
}

/// Runs `total_steps` optimizer updates on `params`, returning the metrics
/// log. Deterministic for a fixed (params, data, config).
pub fn train<S: Scalar>(
    params: &mut ModelParams<S>,
    mix: &MixedDataset,
    heldout: &MixedDataset,
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRecord>, TrainError> {
    cfg.validate()?;
    let weights = cfg.normalized_weights();
    let max_len = params.config().max_seq_len;
    mix.validate(&weights, max_len)?;
    if (cfg.pad_id as usize) >= params.config().vocab_size {
        return Err(TrainError::BadConfig(format!(
            "pad_id {} outside vocab of size {}",
            cfg.pad_id,
            params.config().vocab_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params.n_params());
    let dropout_on = params.config().dropout > 0.0;
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let batch = sample_batch(mix, &weights, cfg.batch_size, cfg.pad_id, &mut rng);
        let scored = batch.scored();
        let out = if dropout_on {
            loss_and_grads(params, &scored, Some(&mut rng))?
        } else {
            loss_and_grads(params, &scored, None)?
        };
        if !out.loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        let lr = lr_at_step(step, cfg);
        let mut grads = out.grads;
        adam.step(params.data_mut(), &mut grads, lr, cfg.grad_clip);

        let eval_ppl = if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let map = eval_heldout(params, heldout)?;
            if map.is_empty() {
                None
            } else {
                Some(map)
            }
        } else {
            None
        };
        metrics.push(MetricsRecord {
            step,
            task_mix: batch.task_mix(),
            lr,
            loss: out.loss,
            eval_ppl,
        });
    }
    Ok(metrics)
}
