//! Model configuration, the named-tensor layout over flat parameter storage,
//! and initialization.
//!
//! Parameters live in one contiguous vector, so the optimizer, the gradient
//! checker, and checkpoint I/O all see the model as a single flat array; the
//! layout maps tensor names to (shape, offset) windows into it.

use std::collections::HashMap;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::math::{standard_normal, Scalar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {id} outside vocab of size {vocab}")]
    BadTokenId { id: u32, vocab: usize },
    #[error("need at least 2 tokens to score next-token loss, got {len}")]
    TooShort { len: usize },
    #[error("every position is masked; nothing to score")]
    AllMasked,
    #[error("batch sequences must share one padded length")]
    RaggedBatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("bad checkpoint file: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Decoder-only transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_ff_mult() -> usize {
    4
}

impl ModelConfig {
    /// The small preset: 12 layers, width 768, 12 heads.
    pub fn preset_small(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 12,
            width: 768,
            n_heads: 12,
            max_seq_len,
            ff_mult: 4,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("width", self.width),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("ff_mult", self.ff_mult),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.width % self.n_heads != 0 {
            return bad(format!(
                "width {} not divisible by n_heads {}",
                self.width, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn ff_width(&self) -> usize {
        self.width * self.ff_mult
    }
}

/// One named tensor's place inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered map of tensor names to windows of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    entries: Vec<TensorSpec>,
    by_name: HashMap<String, usize>,
    total: usize,
}

/// Name of the attention-norm gain tensor of layer `l`, and friends.
pub fn tensor_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let f = cfg.width;
        let ff = cfg.ff_width();
        let v = cfg.vocab_size;
        let mut entries = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            entries.push(TensorSpec {
                name,
                shape,
                offset: 0,
            });
        };
        push("tok_emb".into(), vec![v, f]);
        push("pos_emb".into(), vec![cfg.max_seq_len, f]);
        for l in 0..cfg.n_layers {
            push(tensor_name(l, "attn_norm.gain"), vec![f]);
            push(tensor_name(l, "attn_norm.bias"), vec![f]);
            push(tensor_name(l, "attn.q_w"), vec![f, f]);
            push(tensor_name(l, "attn.q_b"), vec![f]);
            push(tensor_name(l, "attn.k_w"), vec![f, f]);
            push(tensor_name(l, "attn.k_b"), vec![f]);
            push(tensor_name(l, "attn.v_w"), vec![f, f]);
            push(tensor_name(l, "attn.v_b"), vec![f]);
            push(tensor_name(l, "attn.out_w"), vec![f, f]);
            push(tensor_name(l, "attn.out_b"), vec![f]);
            push(tensor_name(l, "ff_norm.gain"), vec![f]);
            push(tensor_name(l, "ff_norm.bias"), vec![f]);
            push(tensor_name(l, "ff.in_w"), vec![f, ff]);
            push(tensor_name(l, "ff.in_b"), vec![ff]);
            push(tensor_name(l, "ff.out_w"), vec![ff, f]);
            push(tensor_name(l, "ff.out_b"), vec![f]);
        }
        push("final_norm.gain".into(), vec![f]);
        push("final_norm.bias".into(), vec![f]);
        push("lm_head.w".into(), vec![f, v]);
        push("lm_head.b".into(), vec![v]);

        let mut offset = 0;
        let mut by_name = HashMap::new();
        for (i, e) in entries.iter_mut().enumerate() {
            e.offset = offset;
            offset += e.len();
            by_name.insert(e.name.clone(), i);
        }
        Self {
            entries,
            by_name,
            total: offset,
        }
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[TensorSpec] {
        &self.entries
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    fn expect(&self, name: &str) -> &TensorSpec {
        self.spec(name)
            .unwrap_or_else(|| panic!("unknown tensor {name:?}"))
    }

    pub fn slice_of<'a, S>(&self, data: &'a [S], name: &str) -> &'a [S] {
        let spec = self.expect(name);
        &data[spec.offset..spec.offset + spec.len()]
    }

    pub fn slice_of_mut<'a, S>(&self, data: &'a mut [S], name: &str) -> &'a mut [S] {
        let spec = self.expect(name);
        &mut data[spec.offset..spec.offset + spec.len()]
    }
}

/// Flat parameter storage plus its config and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    config: ModelConfig,
    layout: ParamLayout,
    data: Vec<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Wraps an existing flat vector; length must match the layout.
    pub fn from_flat(config: ModelConfig, data: Vec<S>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        if data.len() != layout.total_params() {
            return Err(ModelError::BadConfig(format!(
                "flat vector has {} values, layout needs {}",
                data.len(),
                layout.total_params()
            )));
        }
        Ok(Self {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn mat(&self, name: &str) -> ArrayView2<'_, S> {
        let spec = self.layout.expect(name);
        assert_eq!(spec.shape.len(), 2, "{name} is not a matrix");
        ArrayView2::from_shape((spec.shape[0], spec.shape[1]), self.layout.slice_of(&self.data, name))
            .unwrap()
    }

    pub fn vec1(&self, name: &str) -> ArrayView1<'_, S> {
        let spec = self.layout.expect(name);
        assert_eq!(spec.shape.len(), 1, "{name} is not a vector");
        ArrayView1::from_shape(spec.shape[0], self.layout.slice_of(&self.data, name)).unwrap()
    }

    pub fn mat_mut(&mut self, name: &str) -> ArrayViewMut2<'_, S> {
        let spec = self.layout.expect(name).clone();
        let slice = &mut self.data[spec.offset..spec.offset + spec.len()];
        ArrayViewMut2::from_shape((spec.shape[0], spec.shape[1]), slice).unwrap()
    }

    pub fn vec1_mut(&mut self, name: &str) -> ArrayViewMut1<'_, S> {
        let spec = self.layout.expect(name).clone();
        let slice = &mut self.data[spec.offset..spec.offset + spec.len()];
        ArrayViewMut1::from_shape(spec.shape[0], slice).unwrap()
    }

    /// Converts parameter precision (used to run gradient checks in f64).
    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Initializes parameters: normals with std 0.02 for weights and embeddings,
/// residual output projections scaled down by 1/sqrt(2*n_layers), unit gains,
/// zero biases. Draws happen in f64 in layout order, so every precision sees
/// the same values.
pub fn init_params<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<S>, ModelError> {
    config.validate()?;
    let layout = ParamLayout::for_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut data = vec![S::zero(); layout.total_params()];
    for spec in layout.entries() {
        let window = &mut data[spec.offset..spec.offset + spec.len()];
        let leaf = spec.name.rsplit('.').next().unwrap_or(&spec.name);
        let is_weight = spec.shape.len() == 2;
        let is_residual_proj = spec.name.ends_with("attn.out_w") || spec.name.ends_with("ff.out_w");
        if is_weight {
            let std = if is_residual_proj {
                0.02 * residual_scale
            } else {
                0.02
            };
            for v in window.iter_mut() {
                *v = S::from_f64(std * standard_normal(&mut rng));
            }
        } else if leaf == "gain" {
            for v in window.iter_mut() {
                *v = S::one();
            }
        }
        // Biases stay zero.
    }
    Ok(ModelParams {
        config: config.clone(),
        layout,
        data,
    })
}
