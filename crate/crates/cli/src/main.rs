//! `voxt` — operator surface for the joint speech-text modeling pipeline.
//!
//! One subcommand per pipeline stage, in recipe order: `gen-toy`,
//! `train-kmeans`, `tokenize`, `build-vocab`, `train-bpe`, `format`,
//! `train`, then the task runners (`asr`, `tts`, `continue`) and the
//! evaluators (`eval-ppl`, `eval-wer`, `eval-paired`,
//! `inspect-checkpoint`). Every stochastic stage takes a seed, and every
//! stage is idempotent: identical inputs and seeds produce byte-identical
//! artifacts.

mod data;
mod evalcmd;
mod infercmd;
mod io;
mod traincmd;
mod vocabcmd;

use anyhow::{ensure, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "voxt",
    version,
    about = "Joint speech-text language modeling pipeline",
    after_help = "Relative paths resolve against $VOXT_DATA_ROOT when it is set."
)]
struct Cli {
    /// Cap on worker threads. Computation currently runs on one worker;
    /// larger caps are accepted but add no parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy corpus: feature files plus a task manifest.
    GenToy(data::GenToyArgs),
    /// Train the k-means codebook over manifest feature files.
    TrainKmeans(data::TrainKmeansArgs),
    /// Quantize feature files to speech-token files via a codebook.
    Tokenize(data::TokenizeArgs),
    /// Build the base merged vocabulary (specials + text chars + units).
    BuildVocab(vocabcmd::BuildVocabArgs),
    /// Extend a vocabulary with BPE metatokens trained on a manifest.
    TrainBpe(vocabcmd::TrainBpeArgs),
    /// Format manifest records into a framed training dataset.
    Format(vocabcmd::FormatArgs),
    /// Train a model on a formatted dataset; writes checkpoint + metrics.
    Train(traincmd::TrainArgs),
    /// Recognize text from speech features or unit ids.
    Asr(infercmd::AsrArgs),
    /// Synthesize speech unit ids from text.
    Tts(infercmd::TtsArgs),
    /// Continue a text or speech prefix in its own modality.
    Continue(infercmd::ContinueArgs),
    /// Perplexity of a checkpoint over a formatted dataset.
    EvalPpl(evalcmd::EvalPplArgs),
    /// Word or character error rate between reference and hypothesis files.
    EvalWer(evalcmd::EvalWerArgs),
    /// Paired likelihood judgment over corrupted negatives.
    EvalPaired(evalcmd::EvalPairedArgs),
    /// Print a checkpoint's config, tensor directory, and provenance.
    InspectCheckpoint(traincmd::InspectArgs),
}

fn run(cli: Cli) -> Result<()> {
    ensure!(cli.threads >= 1, "--threads must be at least 1");
    match cli.command {
        Command::GenToy(args) => data::gen_toy(args),
        Command::TrainKmeans(args) => data::train_kmeans(args),
        Command::Tokenize(args) => data::tokenize(args),
        Command::BuildVocab(args) => vocabcmd::build_vocab(args),
        Command::TrainBpe(args) => vocabcmd::train_bpe(args),
        Command::Format(args) => vocabcmd::format(args),
        Command::Train(args) => traincmd::train(args),
        Command::Asr(args) => infercmd::asr(args),
        Command::Tts(args) => infercmd::tts(args),
        Command::Continue(args) => infercmd::continue_prefix(args),
        Command::EvalPpl(args) => evalcmd::eval_ppl(args),
        Command::EvalWer(args) => evalcmd::eval_wer(args),
        Command::EvalPaired(args) => evalcmd::eval_paired(args),
        Command::InspectCheckpoint(args) => traincmd::inspect(args),
    }
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
