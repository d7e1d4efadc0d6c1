//! Versioned checkpoint files and warm-start initialization.
//!
//! Layout: magic `VCK1`, a little-endian u32 header length, a JSON header
//! (model config, payload dtype, free-form provenance, tensor directory),
//! then every parameter as little-endian f32 in flat-layout order. The
//! loader cross-checks the directory against the config's derived layout and
//! rejects truncated or oversized files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{init_params, ModelConfig, ModelError, ModelParams, ParamLayout};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCK1";

/// Name and shape of one stored tensor, in payload order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// The JSON header embedded in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub dtype: String,
    /// Free-form record of how the parameters were produced (training
    /// hyperparameters, seeds, data digests, ...).
    pub provenance: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint: parameters (config inside) plus provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub provenance: serde_json::Value,
}

fn expected_tensors(layout: &ParamLayout) -> Vec<TensorMeta> {
    layout
        .entries()
        .iter()
        .map(|e| TensorMeta {
            name: e.name.clone(),
            shape: e.shape.clone(),
        })
        .collect()
}

/// Writes `params` with an arbitrary JSON `provenance` record.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    provenance: &serde_json::Value,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        config: params.config().clone(),
        dtype: "f32".to_string(),
        provenance: provenance.clone(),
        tensors: expected_tensors(params.layout()),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + params.n_params() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for &v in params.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize), ModelError> {
    let bad = |msg: String| ModelError::BadCheckpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("file too small for magic and header length".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            CHECKPOINT_MAGIC
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8 + header_len;
    if bytes.len() < payload_start {
        return Err(bad(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    Ok((header, payload_start))
}

/// Reads only the header — enough to inspect config and provenance without
/// touching the payload.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    let bytes = fs::read(path)?;
    Ok(parse_header(&bytes, path)?.0)
}

/// Loads a checkpoint, validating magic, header, tensor directory, and
/// exact payload size.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path)?;
    let (header, payload_start) = parse_header(&bytes, path)?;
    let bad = |msg: String| ModelError::BadCheckpoint(format!("{}: {msg}", path.display()));
    if header.dtype != "f32" {
        return Err(bad(format!("unsupported dtype {:?}", header.dtype)));
    }
    header.config.validate()?;
    let layout = ParamLayout::for_config(&header.config);
    let expected = expected_tensors(&layout);
    if header.tensors != expected {
        return Err(bad(
            "tensor directory does not match the config's parameter layout".into(),
        ));
    }
    let payload = &bytes[payload_start..];
    let want = layout.total_params() * 4;
    if payload.len() != want {
        return Err(bad(format!(
            "payload is {} bytes, expected {want}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ModelParams::from_flat(header.config.clone(), data)?;
    Ok(Checkpoint {
        params,
        provenance: header.provenance,
    })
}

/// Warm-starts a model from text-only pretrained parameters.
///
/// The target config may use a different vocabulary (and a longer context)
/// than the source; layer count, width, and head count must match. All
/// transformer-block tensors and the final norm are copied; position
/// embeddings are copied over the shared prefix; token embeddings and the
/// output projection are freshly initialized from `seed` at the target
/// vocabulary size.
pub fn load_pretrained_text_init(
    target: &ModelConfig,
    seed: u64,
    source: &ModelParams<f32>,
) -> Result<ModelParams<f32>, ModelError> {
    let src_cfg = source.config();
    let mismatch = |what: &str, a: usize, b: usize| {
        Err(ModelError::CheckpointMismatch(format!(
            "{what} differs between source ({a}) and target ({b})"
        )))
    };
    if src_cfg.n_layers != target.n_layers {
        return mismatch("n_layers", src_cfg.n_layers, target.n_layers);
    }
    if src_cfg.width != target.width {
        return mismatch("width", src_cfg.width, target.width);
    }
    if src_cfg.n_heads != target.n_heads {
        return mismatch("n_heads", src_cfg.n_heads, target.n_heads);
    }
    if src_cfg.ff_mult != target.ff_mult {
        return mismatch("ff_mult", src_cfg.ff_mult, target.ff_mult);
    }

    let mut params: ModelParams<f32> = init_params(target, seed)?;
    let layout = params.layout().clone();
    for entry in source.layout().entries() {
        let name = entry.name.as_str();
        if matches!(name, "tok_emb" | "lm_head.w" | "lm_head.b") {
            continue;
        }
        let src = source.layout().slice_of(source.data(), name);
        let dst = layout.slice_of_mut(params.data_mut(), name);
        if name == "pos_emb" {
            let shared = src_cfg.max_seq_len.min(target.max_seq_len) * target.width;
            dst[..shared].copy_from_slice(&src[..shared]);
        } else {
            dst.copy_from_slice(src);
        }
    }
    Ok(params)
}
