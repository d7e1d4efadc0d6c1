//! Conditioned-generation subcommands: speech-to-text, text-to-speech, and
//! same-modality continuation.

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxt_core::corpus::{load_manifest, FeatureMatrix, Task};
use voxt_core::inference::{continue_sequence, recognize, synthesize};
use voxt_core::model::load_checkpoint;
use voxt_core::quantizer::{assign, dedup_runs, Codebook};
use voxt_core::vocab::{DecodedItem, Segment};
use voxt_core::{
    DecodeConfig, DecodeMode, GenerationRecord, Modality, ModelParams, VoxtVocab,
};

use crate::data::read_units;
use crate::io::{resolve, write_jsonl, TextLine};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Beam,
    Greedy,
    Sample,
}

/// Flags shared by every generation subcommand.
#[derive(Args)]
pub struct DecodeArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary (cross-checked against the checkpoint's vocab_size).
    #[arg(long)]
    vocab: PathBuf,
    /// Search strategy.
    #[arg(long, value_enum, default_value_t = ModeArg::Beam)]
    mode: ModeArg,
    /// Beam width.
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Cap on generated tokens.
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    /// Length-normalization exponent for ranking finished hypotheses.
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Softmax temperature (sample mode only).
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Nucleus probability mass (sample mode only).
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    /// Sampling seed (required in sample mode).
    #[arg(long)]
    seed: Option<u64>,
    /// Write one generation record per item to this JSONL file.
    #[arg(long)]
    record: Option<PathBuf>,
}

/// Loaded model/vocab pair plus the decode configuration, ready to run.
struct DecodeSetup {
    params: ModelParams<f32>,
    vocab: VoxtVocab,
    cfg: DecodeConfig,
    rng: Option<ChaCha8Rng>,
}

impl DecodeArgs {
    fn setup(&self) -> Result<DecodeSetup> {
        let vocab = VoxtVocab::load(&resolve(&self.vocab))?;
        let ckpt = load_checkpoint(&resolve(&self.checkpoint))?;
        ensure!(
            ckpt.params.config().vocab_size == vocab.total_size(),
            "checkpoint was trained with vocab_size {}, vocabulary has {} ids",
            ckpt.params.config().vocab_size,
            vocab.total_size()
        );
        let (mode, rng) = match self.mode {
            ModeArg::Beam => (DecodeMode::Beam, None),
            ModeArg::Greedy => (DecodeMode::Greedy, None),
            ModeArg::Sample => {
                let Some(seed) = self.seed else {
                    bail!("sample mode needs --seed for a reproducible draw");
                };
                let mode = DecodeMode::Sample {
                    temperature: self.temperature,
                    top_p: self.top_p,
                };
                (mode, Some(ChaCha8Rng::seed_from_u64(seed)))
            }
        };
        Ok(DecodeSetup {
            params: ckpt.params,
            vocab,
            cfg: DecodeConfig {
                beam_size: self.beam,
                max_new_tokens: self.max_new,
                length_penalty: self.alpha,
                mode,
            },
            rng,
        })
    }

    fn finish(&self, records: Vec<GenerationRecord>) -> Result<()> {
        if let Some(path) = &self.record {
            let path = resolve(path);
            write_jsonl(&path, &records)?;
        }
        Ok(())
    }
}

/// Parses "3 1 4" or "3,1,4" into unit ids.
fn parse_units(s: &str) -> Result<Vec<u32>> {
    let units: Result<Vec<u32>, _> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect();
    let units = units.context("units must be non-negative integers")?;
    ensure!(!units.is_empty(), "no units given");
    Ok(units)
}

fn units_to_string(units: &[u32]) -> String {
    units
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Args)]
pub struct AsrArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Recognize every asr record of this manifest (needs token files).
    #[arg(long, group = "input")]
    manifest: Option<PathBuf>,
    /// Recognize one unit sequence, e.g. "3 1 4".
    #[arg(long, group = "input")]
    units: Option<String>,
    /// Recognize one token file.
    #[arg(long, group = "input")]
    tokens: Option<PathBuf>,
    /// Recognize one feature file (quantized on the fly; runs collapse).
    #[arg(long, group = "input", requires = "codebook")]
    features: Option<PathBuf>,
    /// Codebook for --features.
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Write recognized {"utt_id", "text"} lines to this JSONL file.
    #[arg(long)]
    text_out: Option<PathBuf>,
}

/// The (utt_id, speech units) items a recognition run decodes.
fn asr_items(args: &AsrArgs, vocab: &VoxtVocab) -> Result<Vec<(String, Vec<u32>)>> {
    if let Some(path) = &args.manifest {
        let manifest = load_manifest(&resolve(path))?;
        let mut items = Vec::new();
        for rec in manifest.by_task(Task::Asr) {
            items.push((rec.utt_id.clone(), read_units(rec, vocab.k())?));
        }
        ensure!(!items.is_empty(), "manifest has no asr records");
        return Ok(items);
    }
    if let Some(s) = &args.units {
        return Ok(vec![("cli".into(), parse_units(s)?)]);
    }
    if let Some(path) = &args.tokens {
        let (units, k) = voxt_core::SpeechTokenSeq::read(&resolve(path))?;
        ensure!(
            k == vocab.k(),
            "token file {} was built for k={k}, vocabulary has k={}",
            path.display(),
            vocab.k()
        );
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cli");
        return Ok(vec![(stem.to_owned(), units.into_inner())]);
    }
    if let Some(path) = &args.features {
        let cb_path = args.codebook.as_ref().expect("clap enforces --codebook");
        let codebook = Codebook::load(&resolve(cb_path))?;
        ensure!(
            codebook.k() == vocab.k(),
            "codebook has k={}, vocabulary has k={}",
            codebook.k(),
            vocab.k()
        );
        let fm = FeatureMatrix::read(&resolve(path))?;
        let units = dedup_runs(&assign(&fm, &codebook)?);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cli");
        return Ok(vec![(stem.to_owned(), units.into_inner())]);
    }
    bail!("give one of --manifest, --units, --tokens, or --features");
}

pub fn asr(args: AsrArgs) -> Result<()> {
    let mut setup = args.decode.setup()?;
    let items = asr_items(&args, &setup.vocab)?;
    let mut records = Vec::with_capacity(items.len());
    let mut text_lines = Vec::with_capacity(items.len());
    for (utt_id, units) in &items {
        let out = recognize(
            &setup.params,
            &setup.vocab,
            units,
            &setup.cfg,
            setup.rng.as_mut(),
        )
        .with_context(|| format!("recognizing {utt_id:?}"))?;
        println!("{utt_id}\t{}", out.content);
        records.push(GenerationRecord::new(
            utt_id.clone(),
            Task::Asr,
            out.prompt_len,
            &out.hypothesis,
        ));
        text_lines.push(TextLine {
            utt_id: utt_id.clone(),
            text: out.content,
        });
    }
    if let Some(path) = &args.text_out {
        write_jsonl(&resolve(path), &text_lines)?;
    }
    args.decode.finish(records)
}

#[derive(Args)]
pub struct TtsArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Synthesize every tts record of this manifest.
    #[arg(long, group = "input")]
    manifest: Option<PathBuf>,
    /// Synthesize one utterance.
    #[arg(long, group = "input")]
    text: Option<String>,
    /// Write one token file per item into this directory.
    #[arg(long)]
    tokens_out_dir: Option<PathBuf>,
}

pub fn tts(args: TtsArgs) -> Result<()> {
    let mut setup = args.decode.setup()?;
    let items: Vec<(String, String)> = if let Some(path) = &args.manifest {
        let manifest = load_manifest(&resolve(path))?;
        let items: Vec<_> = manifest
            .by_task(Task::Tts)
            .map(|rec| {
                let text = rec.text.clone().expect("manifest validation requires text");
                (rec.utt_id.clone(), text)
            })
            .collect();
        ensure!(!items.is_empty(), "manifest has no tts records");
        items
    } else if let Some(text) = &args.text {
        vec![("cli".into(), text.clone())]
    } else {
        bail!("give one of --manifest or --text");
    };

    let out_dir = match &args.tokens_out_dir {
        Some(dir) => {
            let dir = resolve(dir);
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            Some(dir)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(items.len());
    for (utt_id, text) in &items {
        let out = synthesize(
            &setup.params,
            &setup.vocab,
            text,
            &setup.cfg,
            setup.rng.as_mut(),
        )
        .with_context(|| format!("synthesizing {utt_id:?}"))?;
        println!("{utt_id}\t{}", units_to_string(&out.content));
        if let Some(dir) = &out_dir {
            let seq = voxt_core::SpeechTokenSeq::new(out.content.clone());
            seq.write(&dir.join(format!("{utt_id}.tok")), setup.vocab.k())?;
        }
        records.push(GenerationRecord::new(
            utt_id.clone(),
            Task::Tts,
            out.prompt_len,
            &out.hypothesis,
        ));
    }
    args.decode.finish(records)
}

#[derive(Args)]
pub struct ContinueArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Continue a text prefix.
    #[arg(long, group = "input")]
    text: Option<String>,
    /// Continue a speech unit prefix, e.g. "3 1 4".
    #[arg(long, group = "input")]
    units: Option<String>,
    /// Continue the units of a token file.
    #[arg(long, group = "input")]
    tokens: Option<PathBuf>,
}

pub fn continue_prefix(args: ContinueArgs) -> Result<()> {
    let mut setup = args.decode.setup()?;
    let (modality, prefix) = if let Some(text) = &args.text {
        let seq = setup.vocab.encode(&[Segment::Text(text.clone())]);
        (Modality::Text, seq)
    } else if let Some(s) = &args.units {
        let seq = setup.vocab.encode(&[Segment::Speech(parse_units(s)?)]);
        (Modality::Speech, seq)
    } else if let Some(path) = &args.tokens {
        let (units, k) = voxt_core::SpeechTokenSeq::read(&resolve(path))?;
        ensure!(
            k == setup.vocab.k(),
            "token file {} was built for k={k}, vocabulary has k={}",
            path.display(),
            setup.vocab.k()
        );
        let seq = setup.vocab.encode(&[Segment::Speech(units.into_inner())]);
        (Modality::Speech, seq)
    } else {
        bail!("give one of --text, --units, or --tokens");
    };

    let out = continue_sequence(
        &setup.params,
        &setup.vocab,
        modality,
        &prefix,
        &setup.cfg,
        setup.rng.as_mut(),
    )?;
    let mut text = String::new();
    let mut units: Vec<u32> = Vec::new();
    for item in setup.vocab.decode(&out.content)? {
        match item {
            DecodedItem::Text(t) => text.push_str(&t),
            DecodedItem::Speech(u) => units.extend(u),
            DecodedItem::Special(_) => {}
        }
    }
    match modality {
        Modality::Text => println!("{text}"),
        Modality::Speech => println!("{}", units_to_string(&units)),
    }
    let task = match modality {
        Modality::Text => Task::Textlm,
        Modality::Speech => Task::Speechlm,
    };
    args.decode.finish(vec![GenerationRecord::new(
        "cli",
        task,
        out.prompt_len,
        &out.hypothesis,
    )])
}
