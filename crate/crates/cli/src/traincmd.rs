//! Training and checkpoint-inspection subcommands.

use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::Args;

use voxt_core::formatter::load_dataset;
use voxt_core::model::checkpoint::{
    load_checkpoint, load_pretrained_text_init, read_checkpoint_header, save_checkpoint,
};
use voxt_core::model::init_params;
use voxt_core::trainer::{train as run_train, train_provenance, write_metrics_jsonl};
use voxt_core::{MixedDataset, ModelConfig, ModelParams, TrainConfig, VoxtVocab};

use crate::io::{ensure_parent, resolve};

/// Reads a JSON config file into any deserializable type.
fn read_json_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let resolved = resolve(path);
    let text = std::fs::read_to_string(&resolved)
        .with_context(|| format!("reading {}", resolved.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", resolved.display()))
}

fn load_mixed(path: &PathBuf, vocab_size: usize) -> Result<MixedDataset> {
    let records = load_dataset(&resolve(path), vocab_size)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(MixedDataset::from_records(
        records.into_iter().map(|r| (r.task, r.seq.into_inner())),
    ))
}

#[derive(Args)]
pub struct TrainArgs {
    /// Model hyperparameter JSON ({"vocab_size": …, "n_layers": …, …}).
    #[arg(long)]
    model_config: PathBuf,
    /// Training hyperparameter JSON ({"task_weights": …, "batch_size": …, …}).
    #[arg(long)]
    train_config: PathBuf,
    /// Formatted training dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Formatted held-out dataset, evaluated every eval_every steps.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Vocabulary the datasets were formatted with (cross-checked against
    /// the model's vocab_size).
    #[arg(long)]
    vocab: PathBuf,
    /// Seed for fresh parameter initialization.
    #[arg(long, default_value_t = 0)]
    param_seed: u64,
    /// Resume from this checkpoint's exact parameters (configs must match).
    #[arg(long, conflicts_with = "warm_start_text")]
    init_from: Option<PathBuf>,
    /// Warm-start transformer blocks from a text-pretrained checkpoint,
    /// reinitializing embeddings and output head at the current vocabulary.
    #[arg(long)]
    warm_start_text: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Output metrics JSONL path.
    #[arg(long)]
    metrics: PathBuf,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let model_cfg: ModelConfig = read_json_config(&args.model_config)?;
    model_cfg.validate()?;
    let train_cfg: TrainConfig = read_json_config(&args.train_config)?;
    let vocab = VoxtVocab::load(&resolve(&args.vocab))?;
    ensure!(
        model_cfg.vocab_size == vocab.total_size(),
        "model vocab_size {} does not match the vocabulary's {} ids",
        model_cfg.vocab_size,
        vocab.total_size()
    );

    let mix = load_mixed(&args.dataset, model_cfg.vocab_size)?;
    let heldout = match &args.heldout {
        Some(path) => load_mixed(path, model_cfg.vocab_size)?,
        None => MixedDataset::new(),
    };

    let (mut params, init_mode): (ModelParams<f32>, &str) = if let Some(path) = &args.init_from {
        let ckpt = load_checkpoint(&resolve(path))?;
        ensure!(
            *ckpt.params.config() == model_cfg,
            "checkpoint config differs from --model-config; use --warm-start-text \
             to adapt a text-pretrained model"
        );
        (ckpt.params, "resume")
    } else if let Some(path) = &args.warm_start_text {
        let ckpt = load_checkpoint(&resolve(path))?;
        let params = load_pretrained_text_init(&model_cfg, args.param_seed, &ckpt.params)?;
        (params, "warm-start-text")
    } else {
        (init_params(&model_cfg, args.param_seed)?, "fresh")
    };

    let metrics = run_train(&mut params, &mix, &heldout, &train_cfg)?;

    let mut provenance = train_provenance(&train_cfg);
    provenance["init"] = serde_json::json!({
        "mode": init_mode,
        "param_seed": args.param_seed,
    });
    let ckpt_path = resolve(&args.out_checkpoint);
    ensure_parent(&ckpt_path)?;
    save_checkpoint(&ckpt_path, &params, &provenance)?;
    let metrics_path = resolve(&args.metrics);
    ensure_parent(&metrics_path)?;
    write_metrics_jsonl(&metrics_path, &metrics)?;

    let last = metrics.last().expect("training always records a step");
    println!(
        "trained {} steps (final loss {:.4}); wrote {} and {}",
        last.step,
        last.loss,
        ckpt_path.display(),
        metrics_path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Emit one JSON object instead of a table.
    #[arg(long)]
    json: bool,
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let header = read_checkpoint_header(&resolve(&args.checkpoint))?;
    let n_params: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if args.json {
        let tensors: Vec<serde_json::Value> = header
            .tensors
            .iter()
            .map(|t| serde_json::json!({"name": t.name, "shape": t.shape}))
            .collect();
        let doc = serde_json::json!({
            "config": header.config,
            "dtype": header.dtype,
            "n_params": n_params,
            "tensors": tensors,
            "provenance": header.provenance,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    println!("config: {}", serde_json::to_string(&header.config)?);
    println!("dtype: {}", header.dtype);
    println!("params: {n_params}");
    println!("tensors:");
    for t in &header.tensors {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        println!("  {:32} [{}]", t.name, shape.join(", "));
    }
    println!("provenance: {}", serde_json::to_string(&header.provenance)?);
    Ok(())
}
