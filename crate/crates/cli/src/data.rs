//! Data-side subcommands: toy corpus generation, codebook training, and
//! feature quantization.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxt_core::corpus::{
    gen_toy_corpus, load_manifest, FeatureMatrix, Manifest, ManifestRecord, Task, ToyDomainSpec,
    ToyLanguage,
};
use voxt_core::quantizer::{assign, dedup_runs, train_codebook, Codebook};

use crate::io::{ensure_parent, resolve};

#[derive(Args)]
pub struct GenToyArgs {
    /// Directory receiving toy-spec.json, features/, and manifest.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Characters of the toy text alphabet (whitespace excluded).
    #[arg(long, default_value = "abcdefghijklmnopqrstuvwxyz")]
    charset: String,
    /// Speech unit alphabet size.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Units per character tuple.
    #[arg(long, default_value_t = 2)]
    arity: usize,
    /// Probability of duplicating each emitted unit (frame repetition).
    #[arg(long, default_value_t = 0.3)]
    dup_prob: f64,
    /// Number of words in the toy lexicon.
    #[arg(long, default_value_t = 64)]
    lexicon_size: usize,
    /// Seed fixing the toy language and its utterance stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Utterances receiving both text and speech sides (one asr and one
    /// tts manifest record each).
    #[arg(long, default_value_t = 0)]
    n_paired: usize,
    /// Text-only utterances (textlm records).
    #[arg(long, default_value_t = 0)]
    n_text: usize,
    /// Speech-only utterances (speechlm records).
    #[arg(long, default_value_t = 0)]
    n_speech: usize,
    /// Utterances to skip first — use disjoint skips to carve held-out
    /// splits from the same deterministic stream.
    #[arg(long, default_value_t = 0)]
    skip: usize,
    /// Minimum words per utterance.
    #[arg(long, default_value_t = 2)]
    min_words: usize,
    /// Maximum words per utterance.
    #[arg(long, default_value_t = 4)]
    max_words: usize,
    /// Feature dimensionality.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Gaussian noise around each unit's feature center.
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    /// Seed for feature noise.
    #[arg(long, default_value_t = 11)]
    feature_seed: u64,
    /// Prefix of utterance ids and feature file names.
    #[arg(long, default_value = "utt")]
    id_prefix: String,
}

pub fn gen_toy(args: GenToyArgs) -> Result<()> {
    let spec = ToyDomainSpec {
        charset: args.charset.chars().collect(),
        k: args.k,
        arity: args.arity,
        dup_prob: args.dup_prob,
        lexicon_size: args.lexicon_size,
        seed: args.seed,
    };
    let total = args.skip + args.n_paired + args.n_text + args.n_speech;
    ensure!(total > args.skip, "nothing to generate: all counts are zero");
    let lang = ToyLanguage::new(&spec)?;
    let corpus = gen_toy_corpus(&spec, total, (args.min_words, args.max_words))?;

    let out_dir = resolve(&args.out_dir);
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir)
        .with_context(|| format!("creating {}", feat_dir.display()))?;
    let spec_path = out_dir.join("toy-spec.json");
    let mut spec_json = serde_json::to_string_pretty(&spec)?;
    spec_json.push('\n');
    std::fs::write(&spec_path, spec_json)?;

    let mut feat_rng = ChaCha8Rng::seed_from_u64(args.feature_seed);
    let mut records = Vec::new();
    let mut written_features = 0usize;
    for (i, (text, noisy)) in corpus.iter().enumerate().skip(args.skip) {
        let role = i - args.skip;
        let stem = format!("{}-{i:05}", args.id_prefix);
        let needs_speech = role < args.n_paired || role >= args.n_paired + args.n_text;
        let feature_path = if needs_speech {
            let fm = lang.features_for(noisy.as_slice(), args.dim, args.noise_sigma, &mut feat_rng);
            let rel = args.out_dir.join("features").join(format!("{stem}.fmx"));
            fm.write(&resolve(&rel))?;
            written_features += 1;
            Some(rel)
        } else {
            None
        };
        if role < args.n_paired {
            records.push(ManifestRecord {
                utt_id: format!("{stem}-asr"),
                task: Task::Asr,
                text: Some(text.clone()),
                feature_path: feature_path.clone(),
                token_path: None,
            });
            records.push(ManifestRecord {
                utt_id: format!("{stem}-tts"),
                task: Task::Tts,
                text: Some(text.clone()),
                feature_path,
                token_path: None,
            });
        } else if role < args.n_paired + args.n_text {
            records.push(ManifestRecord {
                utt_id: format!("{stem}-text"),
                task: Task::Textlm,
                text: Some(text.clone()),
                feature_path: None,
                token_path: None,
            });
        } else {
            records.push(ManifestRecord {
                utt_id: format!("{stem}-speech"),
                task: Task::Speechlm,
                text: None,
                feature_path,
                token_path: None,
            });
        }
    }
    let n_records = records.len();
    let manifest = Manifest::new(records)?;
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    println!(
        "wrote {n_records} manifest records and {written_features} feature files under {}",
        out_dir.display()
    );
    Ok(())
}

/// Feature paths referenced by a manifest, first appearance first, each
/// listed once even when several records share it.
fn unique_feature_paths(manifest: &Manifest) -> Vec<PathBuf> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for rec in &manifest.records {
        if let Some(path) = &rec.feature_path {
            if seen.insert(path.clone()) {
                out.push(path.clone());
            }
        }
    }
    out
}

#[derive(Args)]
pub struct TrainKmeansArgs {
    /// Manifest whose feature files provide training frames.
    #[arg(long)]
    manifest: PathBuf,
    /// Codebook size.
    #[arg(long)]
    k: usize,
    /// Maximum Lloyd iterations.
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// Seed for the k-means++ initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on training frames; files beyond the cap are skipped.
    #[arg(long, default_value_t = 200_000)]
    max_frames: usize,
    /// Output codebook path (a JSON sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
}

pub fn train_kmeans(args: TrainKmeansArgs) -> Result<()> {
    let manifest = load_manifest(&resolve(&args.manifest))?;
    let paths = unique_feature_paths(&manifest);
    ensure!(!paths.is_empty(), "manifest references no feature files");
    let mut data: Vec<f32> = Vec::new();
    let mut dim = 0usize;
    let mut n_frames = 0usize;
    for path in &paths {
        if n_frames >= args.max_frames {
            break;
        }
        let fm = FeatureMatrix::read(&resolve(path))
            .with_context(|| format!("reading {}", path.display()))?;
        if dim == 0 {
            dim = fm.dim();
        }
        ensure!(
            fm.dim() == dim,
            "feature dim mismatch: {} has {}, earlier files have {dim}",
            path.display(),
            fm.dim()
        );
        let take = (args.max_frames - n_frames).min(fm.n_frames());
        data.extend_from_slice(&fm.data()[..take * dim]);
        n_frames += take;
    }
    let frames = FeatureMatrix::new(n_frames, dim, data)?;
    let codebook = train_codebook(&frames, args.k, args.iters, args.seed)?;
    let out = resolve(&args.out);
    ensure_parent(&out)?;
    codebook.save(&out)?;
    println!(
        "trained k={} codebook on {n_frames} frames (dim {dim}); wrote {}",
        args.k,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TokenizeArgs {
    /// Manifest whose feature files get quantized.
    #[arg(long)]
    manifest: PathBuf,
    /// Trained codebook.
    #[arg(long)]
    codebook: PathBuf,
    /// Directory receiving one token file per feature file.
    #[arg(long)]
    out_dir: PathBuf,
    /// Rewritten manifest with token paths filled in.
    #[arg(long)]
    out_manifest: PathBuf,
    /// Keep consecutive duplicate units instead of collapsing runs.
    #[arg(long)]
    keep_dups: bool,
}

pub fn tokenize(args: TokenizeArgs) -> Result<()> {
    let manifest = load_manifest(&resolve(&args.manifest))?;
    let codebook = Codebook::load(&resolve(&args.codebook))?;
    let out_dir = resolve(&args.out_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let mut token_paths: BTreeMap<PathBuf, PathBuf> = BTreeMap::new();
    for path in unique_feature_paths(&manifest) {
        let fm = FeatureMatrix::read(&resolve(&path))
            .with_context(|| format!("reading {}", path.display()))?;
        let units = assign(&fm, &codebook)?;
        let units = if args.keep_dups { units } else { dedup_runs(&units) };
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_owned)
            .unwrap_or_else(|| "units".into());
        let rel = args.out_dir.join(format!("{stem}.tok"));
        units.write(&resolve(&rel), codebook.k())?;
        token_paths.insert(path, rel);
    }

    let mut records: Vec<ManifestRecord> = Vec::new();
    for rec in &manifest.records {
        let mut rec = rec.clone();
        if let Some(fp) = &rec.feature_path {
            rec.token_path = Some(token_paths[fp].clone());
        }
        records.push(rec);
    }
    let n_files = token_paths.len();
    let out_manifest = resolve(&args.out_manifest);
    ensure_parent(&out_manifest)?;
    Manifest::new(records)?.write(&out_manifest)?;
    println!(
        "tokenized {n_files} feature files into {}; wrote {}",
        out_dir.display(),
        out_manifest.display()
    );
    Ok(())
}

/// Reads the token file of a manifest record, checking the unit alphabet
/// against the expectation.
pub fn read_units(rec: &ManifestRecord, expect_k: usize) -> Result<Vec<u32>> {
    let Some(path) = &rec.token_path else {
        bail!(
            "record {:?} has no token file; run `voxt tokenize` first",
            rec.utt_id
        );
    };
    let (units, k) = voxt_core::SpeechTokenSeq::read(&resolve(path))
        .with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        k == expect_k,
        "token file {} was built for k={k}, expected k={expect_k}",
        path.display()
    );
    Ok(units.into_inner())
}

