//! Conditioned autoregressive generation.
//!
//! Beam search (plus greedy and nucleus sampling) over the incremental
//! decoder, with hard token filtering: modality-constrained decoding allows
//! only the target modality's ids plus ⟨eos⟩, so ASR can never emit speech
//! units and TTS can never emit text. Hypothesis log-probabilities always
//! come from the *unfiltered* distribution, so they can be recomputed by
//! teacher-forced rescoring.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Task;
use crate::formatter::{format_prompt, FormatError};
use crate::model::{forward, math::log_softmax_f64, DecoderState, ModelError, ModelParams, Scalar};
use crate::vocab::{DecodedItem, Modality, Segment, Special, TokenSeq, VocabError, VoxtVocab};

/// Length-normalization exponent used for ASR/TTS beam ranking.
pub const DEFAULT_LENGTH_PENALTY: f64 = 0.6;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("prompt must be nonempty")]
    EmptyPrompt,
    #[error("prompt ({prompt}) plus max_new_tokens ({max_new}) exceeds model context {max}")]
    PromptTooLong {
        prompt: usize,
        max_new: usize,
        max: usize,
    },
    #[error("token filter allows nothing")]
    EmptyAllowedSet,
    #[error("filter covers {filter} ids but the model vocabulary has {vocab}")]
    FilterSizeMismatch { filter: usize, vocab: usize },
    #[error("bad decode config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Which ids decoding may emit. Disallowed ids are masked to −∞.
#[derive(Debug, Clone)]
pub struct TokenFilter {
    allowed: Vec<bool>,
}

impl TokenFilter {
    /// Allows the whole vocabulary.
    pub fn all(vocab_size: usize) -> Self {
        Self {
            allowed: vec![true; vocab_size],
        }
    }

    /// Allows exactly `ids`.
    pub fn only(vocab_size: usize, ids: impl IntoIterator<Item = u32>) -> Self {
        let mut allowed = vec![false; vocab_size];
        for id in ids {
            allowed[id as usize] = true;
        }
        Self { allowed }
    }

    /// Additionally allows `id` (chainable; used to admit ⟨eos⟩).
    pub fn with_token(mut self, id: u32) -> Self {
        self.allowed[id as usize] = true;
        self
    }

    pub fn allows(&self, id: u32) -> bool {
        self.allowed
            .get(id as usize)
            .copied()
            .unwrap_or(false)
    }

    pub fn vocab_size(&self) -> usize {
        self.allowed.len()
    }

    pub fn allowed_ids(&self) -> Vec<u32> {
        (0..self.allowed.len() as u32)
            .filter(|&id| self.allowed[id as usize])
            .collect()
    }

    pub fn n_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DecodeMode {
    Beam,
    Greedy,
    Sample { temperature: f64, top_p: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    /// Length-normalization exponent α ∈ [0,1]: ranking uses logprob/len^α.
    pub length_penalty: f64,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_new_tokens: 64,
            length_penalty: DEFAULT_LENGTH_PENALTY,
            mode: DecodeMode::Beam,
        }
    }
}

impl DecodeConfig {
    pub fn beam(beam_size: usize, max_new_tokens: usize) -> Self {
        Self {
            beam_size,
            max_new_tokens,
            ..Self::default()
        }
    }

    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            beam_size: 1,
            max_new_tokens,
            length_penalty: 0.0,
            mode: DecodeMode::Greedy,
        }
    }

    pub fn validate(&self) -> Result<(), InferError> {
        let bad = |msg: String| Err(InferError::BadConfig(msg));
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.length_penalty) {
            return bad(format!(
                "length_penalty {} outside [0,1]",
                self.length_penalty
            ));
        }
        if let DecodeMode::Sample { temperature, top_p } = self.mode {
            if !(temperature.is_finite() && temperature >= 0.0) {
                return bad(format!("temperature {temperature} must be ≥ 0"));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return bad(format!("top_p {top_p} outside (0,1]"));
            }
        }
        Ok(())
    }
}

/// One decoded continuation (generated ids only; the prompt is excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Sum of unfiltered per-token log-softmax values.
    pub logprob: f64,
    /// True iff generation ended with ⟨eos⟩ (which is then the last id).
    pub finished: bool,
}

impl Hypothesis {
    /// Ranking score: logprob / len^α.
    pub fn score(&self, length_penalty: f64) -> f64 {
        self.logprob / (self.ids.len() as f64).powf(length_penalty)
    }
}

/// One emitted generation, as written to JSON-lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub utt_id: String,
    pub task: Task,
    pub prompt_len: usize,
    pub ids: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl GenerationRecord {
    pub fn new(utt_id: impl Into<String>, task: Task, prompt_len: usize, hyp: &Hypothesis) -> Self {
        Self {
            utt_id: utt_id.into(),
            task,
            prompt_len,
            ids: hyp.ids.clone(),
            logprob: hyp.logprob,
            finished: hyp.finished,
        }
    }
}

fn check_decode_inputs<S: Scalar>(
    params: &ModelParams<S>,
    prompt: &[u32],
    filter: &TokenFilter,
    cfg: &DecodeConfig,
) -> Result<(), InferError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(InferError::EmptyPrompt);
    }
    let vocab = params.config().vocab_size;
    if filter.vocab_size() != vocab {
        return Err(InferError::FilterSizeMismatch {
            filter: filter.vocab_size(),
            vocab,
        });
    }
    if filter.n_allowed() == 0 {
        return Err(InferError::EmptyAllowedSet);
    }
    let max = params.config().max_seq_len;
    if prompt.len() + cfg.max_new_tokens > max {
        return Err(InferError::PromptTooLong {
            prompt: prompt.len(),
            max_new: cfg.max_new_tokens,
            max,
        });
    }
    Ok(())
}

/// Orders hypotheses best-first: score descending, ties by ids ascending.
fn rank(mut hyps: Vec<Hypothesis>, length_penalty: f64) -> Vec<Hypothesis> {
    hyps.sort_by(|a, b| {
        b.score(length_penalty)
            .partial_cmp(&a.score(length_penalty))
            .expect("hypothesis scores are finite")
            .then_with(|| a.ids.cmp(&b.ids))
    });
    hyps
}

struct LiveHyp<S: Scalar> {
    state: DecoderState<S>,
    /// Next-token logits given everything consumed so far.
    logits: Vec<S>,
    ids: Vec<u32>,
    logprob: f64,
}

/// Beam search over the incremental decoder.
///
/// Keeps `beam_size` live hypotheses; at each step the top `beam_size`
/// single-token extensions (by total logprob, ties broken by token id then
/// hypothesis order) survive. Hypotheses emitting ⟨eos⟩ retire to the result
/// set; the rest advance. Results are ranked by logprob/len^α.
pub fn beam_search<S: Scalar>(
    params: &ModelParams<S>,
    prompt: &[u32],
    filter: &TokenFilter,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, InferError> {
    check_decode_inputs(params, prompt, filter, cfg)?;
    let eos = Special::Eos.id();
    let allowed = filter.allowed_ids();

    let mut root = DecoderState::new(params);
    let logits = root.advance_all(params, prompt)?;
    let mut live = vec![LiveHyp {
        state: root,
        logits,
        ids: Vec::new(),
        logprob: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_new_tokens {
        if live.is_empty() {
            break;
        }
        // (total logprob, parent index, token)
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * allowed.len());
        for (hi, hyp) in live.iter().enumerate() {
            let ls = log_softmax_f64(&hyp.logits);
            for &tok in &allowed {
                cands.push((hyp.logprob + ls[tok as usize], hi, tok));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("log-probabilities are finite")
                .then_with(|| a.2.cmp(&b.2))
                .then_with(|| a.1.cmp(&b.1))
        });
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cfg.beam_size);
        for (logprob, hi, tok) in cands {
            let parent = &live[hi];
            let mut ids = parent.ids.clone();
            ids.push(tok);
            if tok == eos {
                done.push(Hypothesis {
                    ids,
                    logprob,
                    finished: true,
                });
            } else {
                let mut state = parent.state.clone();
                let logits = state.advance(params, tok)?;
                next.push(LiveHyp {
                    state,
                    logits,
                    ids,
                    logprob,
                });
            }
        }
        live = next;
    }

    for hyp in live {
        done.push(Hypothesis {
            ids: hyp.ids,
            logprob: hyp.logprob,
            finished: false,
        });
    }
    Ok(rank(done, cfg.length_penalty))
}

/// Greedy argmax decoding, written independently of the beam machinery.
/// Ties pick the lowest token id.
pub fn greedy_decode<S: Scalar>(
    params: &ModelParams<S>,
    prompt: &[u32],
    filter: &TokenFilter,
    max_new_tokens: usize,
) -> Result<Hypothesis, InferError> {
    let cfg = DecodeConfig::greedy(max_new_tokens);
    check_decode_inputs(params, prompt, filter, &cfg)?;
    let eos = Special::Eos.id();
    let mut state = DecoderState::new(params);
    let mut logits = state.advance_all(params, prompt)?;
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    for step in 0..max_new_tokens {
        let ls = log_softmax_f64(&logits);
        let mut best: Option<(u32, f64)> = None;
        for id in 0..params.config().vocab_size as u32 {
            if !filter.allows(id) {
                continue;
            }
            let lp = ls[id as usize];
            if best.map_or(true, |(_, b)| lp > b) {
                best = Some((id, lp));
            }
        }
        let (tok, lp) = best.expect("allowed set checked nonempty");
        ids.push(tok);
        logprob += lp;
        if tok == eos {
            return Ok(Hypothesis {
                ids,
                logprob,
                finished: true,
            });
        }
        if step + 1 < max_new_tokens {
            logits = state.advance(params, tok)?;
        }
    }
    Ok(Hypothesis {
        ids,
        logprob,
        finished: false,
    })
}

/// Nucleus (top-p) sampling at a temperature. Selection draws from the
/// renormalized allowed set; the recorded logprob is still the unfiltered
/// log-softmax of the chosen token. Temperatures below 1e-6 reduce to
/// greedy.
#[allow(clippy::too_many_arguments)]
pub fn sample_nucleus<S: Scalar>(
    params: &ModelParams<S>,
    prompt: &[u32],
    filter: &TokenFilter,
    max_new_tokens: usize,
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Hypothesis, InferError> {
    let cfg = DecodeConfig {
        beam_size: 1,
        max_new_tokens,
        length_penalty: 0.0,
        mode: DecodeMode::Sample { temperature, top_p },
    };
    check_decode_inputs(params, prompt, filter, &cfg)?;
    if temperature < 1e-6 {
        return greedy_decode(params, prompt, filter, max_new_tokens);
    }
    let eos = Special::Eos.id();
    let allowed = filter.allowed_ids();
    let mut state = DecoderState::new(params);
    let mut logits = state.advance_all(params, prompt)?;
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    for step in 0..max_new_tokens {
        let ls = log_softmax_f64(&logits);
        // Tempered distribution over the allowed set.
        let max_scaled = allowed
            .iter()
            .map(|&id| logits[id as usize].to_f64() / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut items: Vec<(u32, f64)> = allowed
            .iter()
            .map(|&id| {
                let z = logits[id as usize].to_f64() / temperature - max_scaled;
                (id, z.exp())
            })
            .collect();
        let total: f64 = items.iter().map(|(_, p)| p).sum();
        for item in &mut items {
            item.1 /= total;
        }
        // Nucleus truncation: most-probable prefix reaching top_p.
        items.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("probabilities are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        let mut cum = 0.0;
        let mut cut = items.len();
        for (i, (_, p)) in items.iter().enumerate() {
            cum += p;
            if cum >= top_p {
                cut = i + 1;
                break;
            }
        }
        items.truncate(cut);
        let mass: f64 = items.iter().map(|(_, p)| p).sum();
        let mut u: f64 = rng.gen::<f64>() * mass;
        let mut tok = items.last().unwrap().0;
        for &(id, p) in &items {
            if u < p {
                tok = id;
                break;
            }
            u -= p;
        }
        ids.push(tok);
        logprob += ls[tok as usize];
        if tok == eos {
            return Ok(Hypothesis {
                ids,
                logprob,
                finished: true,
            });
        }
        if step + 1 < max_new_tokens {
            logits = state.advance(params, tok)?;
        }
    }
    Ok(Hypothesis {
        ids,
        logprob,
        finished: false,
    })
}

/// Runs the mode selected in `cfg`, returning ranked hypotheses (a single
/// one for greedy/sampling). Sampling requires `rng`.
pub fn decode<S: Scalar>(
    params: &ModelParams<S>,
    prompt: &[u32],
    filter: &TokenFilter,
    cfg: &DecodeConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<Hypothesis>, InferError> {
    match cfg.mode {
        DecodeMode::Beam => beam_search(params, prompt, filter, cfg),
        DecodeMode::Greedy => Ok(vec![greedy_decode(
            params,
            prompt,
            filter,
            cfg.max_new_tokens,
        )?]),
        DecodeMode::Sample { temperature, top_p } => {
            let rng = rng.ok_or_else(|| {
                InferError::BadConfig("sampling mode needs a seeded rng".into())
            })?;
            Ok(vec![sample_nucleus(
                params,
                prompt,
                filter,
                cfg.max_new_tokens,
                temperature,
                top_p,
                rng,
            )?])
        }
    }
}

/// Teacher-forced rescoring: the sum of log-softmax values `generated`
/// receives after `prompt` under a full (cache-free) forward pass.
pub fn rescore_generated<S: Scalar>(
    params: &ModelParams<S>,
    prompt: &[u32],
    generated: &[u32],
) -> Result<f64, InferError> {
    if prompt.is_empty() || generated.is_empty() {
        return Err(InferError::EmptyPrompt);
    }
    let mut all = prompt.to_vec();
    all.extend_from_slice(generated);
    let logits = forward(params, &all)?;
    let mut total = 0.0;
    for (i, &tok) in generated.iter().enumerate() {
        let row = logits.row(prompt.len() + i - 1);
        let ls = log_softmax_f64(row.as_slice().unwrap());
        total += ls[tok as usize];
    }
    Ok(total)
}

/// Reference decoder: enumerates every allowed continuation up to
/// `max_new_tokens` with full forward passes (no incremental cache) and
/// returns the best-ranked hypothesis. Exponential in `max_new_tokens` —
/// verification use only.
pub fn exhaustive_reference_best<S: Scalar>(
    params: &ModelParams<S>,
    prompt: &[u32],
    filter: &TokenFilter,
    cfg: &DecodeConfig,
) -> Result<Hypothesis, InferError> {
    check_decode_inputs(params, prompt, filter, cfg)?;
    let eos = Special::Eos.id();
    let allowed = filter.allowed_ids();

    let mut all: Vec<Hypothesis> = Vec::new();
    // Stack of open prefixes (ids, logprob).
    let mut stack: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((ids, logprob)) = stack.pop() {
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(&ids);
        let logits = forward(params, &seq)?;
        let last = logits.row(seq.len() - 1);
        let ls = log_softmax_f64(last.as_slice().unwrap());
        for &tok in &allowed {
            let mut child = ids.clone();
            child.push(tok);
            let child_lp = logprob + ls[tok as usize];
            if tok == eos {
                all.push(Hypothesis {
                    ids: child,
                    logprob: child_lp,
                    finished: true,
                });
            } else if child.len() == cfg.max_new_tokens {
                all.push(Hypothesis {
                    ids: child,
                    logprob: child_lp,
                    finished: false,
                });
            } else {
                stack.push((child, child_lp));
            }
        }
    }
    Ok(rank(all, cfg.length_penalty)
        .into_iter()
        .next()
        .expect("allowed set is nonempty"))
}

/// A task-level generation: decoded content plus the raw hypothesis.
#[derive(Debug, Clone)]
pub struct TaskOutput<T> {
    pub content: T,
    pub hypothesis: Hypothesis,
    pub prompt_len: usize,
}

fn strip_eos(ids: &[u32]) -> &[u32] {
    match ids.split_last() {
        Some((&last, rest)) if last == Special::Eos.id() => rest,
        _ => ids,
    }
}

fn modality_filter(vocab: &VoxtVocab, m: Modality) -> TokenFilter {
    TokenFilter::only(vocab.total_size(), vocab.ids_of_modality(m))
        .with_token(Special::Eos.id())
}

fn decode_content(vocab: &VoxtVocab, ids: &[u32]) -> Result<(String, Vec<u32>), InferError> {
    let mut text = String::new();
    let mut units = Vec::new();
    for item in vocab.decode(&TokenSeq::new(strip_eos(ids).to_vec()))? {
        match item {
            DecodedItem::Text(s) => text.push_str(&s),
            DecodedItem::Speech(mut u) => units.append(&mut u),
            DecodedItem::Special(_) => {}
        }
    }
    Ok((text, units))
}

/// Speech-to-text: formats the ASR prompt from quantized units and decodes
/// under a text-only constraint.
pub fn recognize<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &VoxtVocab,
    speech_units: &[u32],
    cfg: &DecodeConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TaskOutput<String>, InferError> {
    let condition = vocab.encode(&[Segment::Speech(speech_units.to_vec())]);
    let prompt = format_prompt(Task::Asr, &condition, vocab)?;
    let filter = modality_filter(vocab, Modality::Text);
    let hyps = decode(params, prompt.as_slice(), &filter, cfg, rng)?;
    let best = hyps.into_iter().next().expect("decode returns ≥1 hypothesis");
    let (text, _) = decode_content(vocab, &best.ids)?;
    Ok(TaskOutput {
        content: text,
        hypothesis: best,
        prompt_len: prompt.len(),
    })
}

/// Text-to-speech: formats the TTS prompt from text and decodes under a
/// speech-only constraint, returning quantizer unit ids.
pub fn synthesize<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &VoxtVocab,
    text: &str,
    cfg: &DecodeConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TaskOutput<Vec<u32>>, InferError> {
    let condition = vocab.encode(&[Segment::Text(text.to_string())]);
    let prompt = format_prompt(Task::Tts, &condition, vocab)?;
    let filter = modality_filter(vocab, Modality::Speech);
    let hyps = decode(params, prompt.as_slice(), &filter, cfg, rng)?;
    let best = hyps.into_iter().next().expect("decode returns ≥1 hypothesis");
    let (_, units) = decode_content(vocab, &best.ids)?;
    Ok(TaskOutput {
        content: units,
        hypothesis: best,
        prompt_len: prompt.len(),
    })
}

/// Same-modality continuation (the two LM tasks). The returned content
/// excludes the prompt and any final ⟨eos⟩.
pub fn continue_sequence<S: Scalar>(
    params: &ModelParams<S>,
    vocab: &VoxtVocab,
    modality: Modality,
    prefix: &TokenSeq,
    cfg: &DecodeConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TaskOutput<TokenSeq>, InferError> {
    let task = match modality {
        Modality::Text => Task::Textlm,
        Modality::Speech => Task::Speechlm,
    };
    let prompt = format_prompt(task, prefix, vocab)?;
    let filter = modality_filter(vocab, modality);
    let hyps = decode(params, prompt.as_slice(), &filter, cfg, rng)?;
    let best = hyps.into_iter().next().expect("decode returns ≥1 hypothesis");
    let content = TokenSeq::new(strip_eos(&best.ids).to_vec());
    Ok(TaskOutput {
        content,
        hypothesis: best,
        prompt_len: prompt.len(),
    })
}
