//! Vocabulary-side subcommands: base vocabulary construction, merge
//! training, and manifest-to-dataset formatting.

use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::Args;

use voxt_core::corpus::{load_manifest, ManifestRecord, Task};
use voxt_core::formatter::{format_train, write_dataset, DatasetRecord, TaskRecord};
use voxt_core::vocab::Segment;
use voxt_core::{TokenSeq, VoxtVocab};

use crate::data::read_units;
use crate::io::{ensure_parent, resolve};

#[derive(Args)]
pub struct BuildVocabArgs {
    /// Text symbols of the vocabulary, one character each.
    #[arg(long, default_value = "abcdefghijklmnopqrstuvwxyz")]
    charset: String,
    /// Leave the space character out instead of appending it to the
    /// charset as the word separator.
    #[arg(long)]
    no_space: bool,
    /// Speech unit alphabet size (must match the codebook's k).
    #[arg(long)]
    k: usize,
    /// Output vocabulary path.
    #[arg(long)]
    out: PathBuf,
}

pub fn build_vocab(args: BuildVocabArgs) -> Result<()> {
    let mut symbols: Vec<char> = args.charset.chars().collect();
    if !args.no_space && !symbols.contains(&' ') {
        symbols.push(' ');
    }
    let vocab = VoxtVocab::build_base_vocab(&symbols, args.k)?;
    let out = resolve(&args.out);
    ensure_parent(&out)?;
    vocab.save(&out)?;
    println!(
        "built base vocabulary: {} text symbols + {} speech units, {} ids total; wrote {}",
        symbols.len(),
        args.k,
        vocab.total_size(),
        out.display()
    );
    Ok(())
}

/// Encodes the sides of a manifest record under a vocabulary: the text side
/// (when present) and the speech side (when present) as separate sequences.
fn encode_sides(
    rec: &ManifestRecord,
    vocab: &VoxtVocab,
) -> Result<(Option<TokenSeq>, Option<TokenSeq>)> {
    let text = rec
        .text
        .as_ref()
        .map(|t| vocab.encode(&[Segment::Text(t.clone())]));
    let speech = match rec.token_path {
        Some(_) => {
            let units = read_units(rec, vocab.k())?;
            Some(vocab.encode(&[Segment::Speech(units)]))
        }
        None => None,
    };
    Ok((text, speech))
}

#[derive(Args)]
pub struct TrainBpeArgs {
    /// Base vocabulary to extend with merges.
    #[arg(long)]
    vocab: PathBuf,
    /// Manifest providing the merge-training corpus.
    #[arg(long)]
    manifest: PathBuf,
    /// Total vocabulary size after merging (base size + merge count).
    #[arg(long)]
    target_size: usize,
    /// Cap on manifest records consumed.
    #[arg(long)]
    max_records: Option<usize>,
    /// Output vocabulary path.
    #[arg(long)]
    out: PathBuf,
}

pub fn train_bpe(args: TrainBpeArgs) -> Result<()> {
    let base = VoxtVocab::load(&resolve(&args.vocab))?;
    let manifest = load_manifest(&resolve(&args.manifest))?;
    let limit = args.max_records.unwrap_or(usize::MAX);
    let mut corpora = Vec::new();
    for rec in manifest.records.iter().take(limit) {
        let (text, speech) = encode_sides(rec, &base)
            .with_context(|| format!("encoding record {:?}", rec.utt_id))?;
        corpora.extend(text);
        corpora.extend(speech);
    }
    ensure!(!corpora.is_empty(), "manifest provided no encodable sides");
    let merged = base.train_bpe(&corpora, args.target_size)?;
    let out = resolve(&args.out);
    ensure_parent(&out)?;
    merged.save(&out)?;
    println!(
        "trained {} merges on {} sequences ({} ids total); wrote {}",
        merged.merges().len(),
        corpora.len(),
        merged.total_size(),
        out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct FormatArgs {
    /// Manifest to format.
    #[arg(long)]
    manifest: PathBuf,
    /// Vocabulary used for encoding.
    #[arg(long)]
    vocab: PathBuf,
    /// Output dataset path (an .idx sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
}

pub fn format(args: FormatArgs) -> Result<()> {
    let vocab = VoxtVocab::load(&resolve(&args.vocab))?;
    let manifest = load_manifest(&resolve(&args.manifest))?;
    ensure!(!manifest.is_empty(), "manifest is empty");
    let mut records = Vec::with_capacity(manifest.len());
    let mut max_len = 0usize;
    for rec in &manifest.records {
        let (text, speech) = encode_sides(rec, &vocab)
            .with_context(|| format!("encoding record {:?}", rec.utt_id))?;
        let task_rec = TaskRecord {
            task: rec.task,
            text,
            speech,
        };
        let seq = format_train(&task_rec, &vocab)
            .with_context(|| format!("formatting record {:?}", rec.utt_id))?;
        max_len = max_len.max(seq.len());
        records.push(DatasetRecord {
            utt_id: rec.utt_id.clone(),
            task: rec.task,
            seq,
        });
    }
    let out = resolve(&args.out);
    ensure_parent(&out)?;
    write_dataset(&out, &records)?;
    let counts: Vec<String> = Task::ALL
        .iter()
        .map(|&t| format!("{} {:?}", records.iter().filter(|r| r.task == t).count(), t))
        .collect();
    println!(
        "formatted {} sequences ({}; longest {max_len} tokens); wrote {}",
        records.len(),
        counts.join(", "),
        out.display()
    );
    Ok(())
}
