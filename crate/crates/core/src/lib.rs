//! Joint speech-text language modeling at desk scale.
//!
//! The pipeline turns continuous speech features and raw text into a single
//! token stream over a merged vocabulary, trains a decoder-only transformer
//! on four tasks (text LM, speech LM, speech recognition, speech synthesis),
//! and generates conditioned output with beam search.
//!
//! Stages, in pipeline order:
//!
//! * [`corpus`] — feature matrices, JSONL manifests, and a synthetic toy
//!   speech domain with a known invertible text-to-token mapping.
//! * [`quantizer`] — k-means codebook training and frame-to-token assignment.
//! * [`vocab`] — the merged vocabulary (specials + text units + speech units)
//!   and BPE metatoken training over mixed-modality corpora.
//! * [`formatter`] — special-token framing of task records into training
//!   sequences and inference prompts, and parsing of generated output.
//! * [`model`] — decoder-only transformer with exact gradients and
//!   checkpoint I/O.
//! * [`trainer`] — task-weighted sampling, Adam with warmup schedule,
//!   metrics logging.
//! * [`inference`] — beam/greedy/sampling decoders with modality-constrained
//!   output, plus task-level entry points.
//! * [`eval`] — perplexity, word/character error rate, and paired-judgment
//!   accuracy.

pub mod corpus;
pub mod eval;
pub mod formatter;
pub mod inference;
pub mod model;
pub mod quantizer;
pub mod trainer;
pub mod vocab;

pub use corpus::{FeatureMatrix, Manifest, ManifestRecord, Task, ToyDomainSpec};
pub use eval::{EvalReport, MaskPolicy};
pub use inference::{DecodeConfig, DecodeMode, GenerationRecord, Hypothesis, TokenFilter};
pub use model::{ModelConfig, ModelParams, Scalar};
pub use quantizer::{Codebook, SpeechTokenSeq};
pub use trainer::{MetricsRecord, MixedDataset, TrainConfig};
pub use vocab::{Modality, Segment, TokenSeq, VoxtVocab};
