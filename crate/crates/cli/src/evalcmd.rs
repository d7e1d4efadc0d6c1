//! Evaluation subcommands: perplexity, transcription error rates, and
//! paired positive/negative judgment accuracy.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxt_core::corpus::Task;
use voxt_core::eval::{self, paired_judgment, perplexity, UnigramBaseline};
use voxt_core::formatter::{load_dataset, DatasetRecord};
use voxt_core::model::load_checkpoint;
use voxt_core::{EvalReport, MaskPolicy, Modality, ModelParams, VoxtVocab};

use crate::io::{ensure_parent, read_jsonl, resolve, TextLine};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    /// Score every position after the first token.
    FullSequence,
    /// Score only positions after the last generation-start marker.
    TargetOnly,
}

impl From<PolicyArg> for MaskPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::FullSequence => MaskPolicy::FullSequence,
            PolicyArg::TargetOnly => MaskPolicy::TargetOnly,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Textlm,
    Speechlm,
    Asr,
    Tts,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Textlm => Task::Textlm,
            TaskArg::Speechlm => Task::Speechlm,
            TaskArg::Asr => Task::Asr,
            TaskArg::Tts => Task::Tts,
        }
    }
}

fn load_model_and_vocab(
    checkpoint: &PathBuf,
    vocab: &PathBuf,
) -> Result<(ModelParams<f32>, VoxtVocab)> {
    let vocab = VoxtVocab::load(&resolve(vocab))?;
    let ckpt = load_checkpoint(&resolve(checkpoint))?;
    ensure!(
        ckpt.params.config().vocab_size == vocab.total_size(),
        "checkpoint was trained with vocab_size {}, vocabulary has {} ids",
        ckpt.params.config().vocab_size,
        vocab.total_size()
    );
    Ok((ckpt.params, vocab))
}

fn load_filtered(
    path: &PathBuf,
    vocab_size: usize,
    task: Option<Task>,
) -> Result<Vec<DatasetRecord>> {
    let records = load_dataset(&resolve(path), vocab_size)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    let records: Vec<DatasetRecord> = match task {
        Some(t) => records.into_iter().filter(|r| r.task == t).collect(),
        None => records,
    };
    ensure!(
        !records.is_empty(),
        "dataset {} has no matching sequences",
        path.display()
    );
    Ok(records)
}

fn write_report(report: &EvalReport, out: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = out {
        let path = resolve(path);
        ensure_parent(&path)?;
        report.save(&path)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalPplArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary the dataset was formatted with.
    #[arg(long)]
    vocab: PathBuf,
    /// Formatted dataset to score.
    #[arg(long)]
    dataset: PathBuf,
    /// Restrict scoring to one task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Which positions count toward the loss.
    #[arg(long, value_enum, default_value_t = PolicyArg::FullSequence)]
    policy: PolicyArg,
    /// Fit a unigram model on this dataset and report its perplexity on
    /// the scored dataset for comparison.
    #[arg(long)]
    baseline_dataset: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval_ppl(args: EvalPplArgs) -> Result<()> {
    let (params, _vocab) = load_model_and_vocab(&args.checkpoint, &args.vocab)?;
    let task: Option<Task> = args.task.map(Task::from);
    let policy: MaskPolicy = args.policy.into();
    let records = load_filtered(&args.dataset, params.config().vocab_size, task)?;
    let seqs: Vec<Vec<u32>> = records
        .into_iter()
        .map(|r| r.seq.into_inner())
        .collect();
    let ppl = perplexity(&params, &seqs, policy)?;

    let metric = match task {
        Some(t) => format!("ppl/{t:?}").to_lowercase(),
        None => "ppl".to_string(),
    };
    println!("{metric} = {ppl:.4} over {} sequences", seqs.len());
    if let Some(base_path) = &args.baseline_dataset {
        let base_records =
            load_filtered(base_path, params.config().vocab_size, task)?;
        let base_seqs: Vec<Vec<u32>> = base_records
            .into_iter()
            .map(|r| r.seq.into_inner())
            .collect();
        let unigram = UnigramBaseline::fit(&base_seqs, params.config().vocab_size);
        let base_ppl = unigram.perplexity(&seqs, policy)?;
        println!(
            "unigram baseline = {base_ppl:.4} (model/baseline = {:.4})",
            ppl / base_ppl
        );
    }

    let digest_input = serde_json::json!({
        "metric": metric,
        "model": params.config(),
        "policy": policy,
        "n_items": seqs.len(),
    });
    write_report(
        &EvalReport::new(metric, ppl, seqs.len(), &digest_input),
        &args.out,
    )
}

/// Reads {"utt_id", "text"} lines, skipping JSONL lines without a text
/// field so manifests with speech-only records work as references.
fn read_text_lines(path: &PathBuf) -> Result<Vec<TextLine>> {
    let values: Vec<serde_json::Value> = read_jsonl(&resolve(path))?;
    let mut out = Vec::new();
    for v in values {
        let Some(utt_id) = v.get("utt_id").and_then(|u| u.as_str()) else {
            bail!("{}: line without an utt_id", path.display());
        };
        if let Some(text) = v.get("text").and_then(|t| t.as_str()) {
            out.push(TextLine {
                utt_id: utt_id.to_string(),
                text: text.to_string(),
            });
        }
    }
    ensure!(!out.is_empty(), "{} has no text lines", path.display());
    Ok(out)
}

#[derive(Args)]
pub struct EvalWerArgs {
    /// Reference {"utt_id", "text"} JSONL (a manifest works; its
    /// text-free records are ignored).
    #[arg(long)]
    refs: PathBuf,
    /// Hypothesis {"utt_id", "text"} JSONL; every utt_id must appear in
    /// the references.
    #[arg(long)]
    hyps: PathBuf,
    /// Score characters instead of whitespace-separated words.
    #[arg(long)]
    chars: bool,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval_wer(args: EvalWerArgs) -> Result<()> {
    let ref_lines = read_text_lines(&args.refs)?;
    let hyp_lines = read_text_lines(&args.hyps)?;
    let by_id: HashMap<&str, &str> = ref_lines
        .iter()
        .map(|l| (l.utt_id.as_str(), l.text.as_str()))
        .collect();
    let mut refs = Vec::with_capacity(hyp_lines.len());
    let mut hyps = Vec::with_capacity(hyp_lines.len());
    for line in &hyp_lines {
        let Some(&r) = by_id.get(line.utt_id.as_str()) else {
            bail!("hypothesis {:?} has no reference", line.utt_id);
        };
        refs.push(r.to_string());
        hyps.push(line.text.clone());
    }
    let (metric, value) = if args.chars {
        ("cer", eval::char_error_rate(&refs, &hyps)?)
    } else {
        ("wer", eval::word_error_rate(&refs, &hyps)?)
    };
    println!("{metric} = {value:.4} over {} utterances", hyps.len());
    let digest_input = serde_json::json!({
        "metric": metric,
        "unit": if args.chars { "char" } else { "word" },
        "n_items": hyps.len(),
    });
    write_report(
        &EvalReport::new(metric, value, hyps.len(), &digest_input),
        &args.out,
    )
}

#[derive(Args)]
pub struct EvalPairedArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary the dataset was formatted with.
    #[arg(long)]
    vocab: PathBuf,
    /// Formatted dataset providing the positive sequences.
    #[arg(long)]
    dataset: PathBuf,
    /// Restrict to one task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Seed for the corruption draws.
    #[arg(long)]
    seed: u64,
    /// Cap on scored pairs.
    #[arg(long)]
    max_pairs: Option<usize>,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval_paired(args: EvalPairedArgs) -> Result<()> {
    let (params, vocab) = load_model_and_vocab(&args.checkpoint, &args.vocab)?;
    let task: Option<Task> = args.task.map(Task::from);
    let records = load_filtered(&args.dataset, params.config().vocab_size, task)?;
    let text_pool = vocab.ids_of_modality(Modality::Text);
    let speech_pool = vocab.ids_of_modality(Modality::Speech);

    // Corrupt the content modality each task generates: recognition and
    // text modeling produce text, synthesis and speech modeling produce
    // speech units.
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let limit = args.max_pairs.unwrap_or(usize::MAX);
    let mut pairs = Vec::new();
    for rec in records.iter().take(limit) {
        let pool = match rec.task {
            Task::Textlm | Task::Asr => &text_pool,
            Task::Speechlm | Task::Tts => &speech_pool,
        };
        let seq = rec.seq.as_slice();
        if let Some(neg) = eval::corrupt_sequence(seq, pool, &mut rng) {
            pairs.push((seq.to_vec(), neg));
        }
    }
    ensure!(!pairs.is_empty(), "no sequence was corruptible");
    let acc = paired_judgment(&params, &pairs)?;
    println!("paired judgment accuracy = {acc:.4} over {} pairs", pairs.len());
    let digest_input = serde_json::json!({
        "metric": "paired-judgment",
        "model": params.config(),
        "seed": args.seed,
        "n_items": pairs.len(),
    });
    write_report(
        &EvalReport::new("paired-judgment", acc, pairs.len(), &digest_input),
        &args.out,
    )
}
