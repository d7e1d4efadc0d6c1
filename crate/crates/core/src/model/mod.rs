//! Decoder-only transformer language model.
//!
//! Parameters live in one flat vector addressed by a named layout
//! ([`params`]), which keeps the optimizer, gradient checks, and checkpoint
//! I/O trivial. The forward/backward pass ([`forward`]) is hand-derived and
//! verified against finite differences; [`checkpoint`] handles persistence
//! and warm-starting from text-only pretraining.

pub mod checkpoint;
pub mod forward;
pub mod math;
pub mod params;

pub use checkpoint::{
    load_checkpoint, load_pretrained_text_init, read_checkpoint_header, save_checkpoint,
    Checkpoint, CheckpointHeader, TensorMeta, CHECKPOINT_MAGIC,
};
pub use forward::{
    batch_cross_entropy, finite_diff_max_rel_err, forward, loss_and_grads, loss_and_grads_single,
    DecoderState, LossGrads, ScoredSeq,
};
pub use math::Scalar;
pub use params::{
    init_params, tensor_name, ModelConfig, ModelError, ModelParams, ParamLayout, TensorSpec,
};
