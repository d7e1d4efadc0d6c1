//! Corpus ingestion and the synthetic toy speech domain.
//!
//! Real feature dumps arrive as `.fmx` files (see [`FeatureMatrix`]); task
//! assignments arrive as JSONL manifests. The toy domain generates paired
//! (text, speech-token) data from a known injective mapping so the full
//! recognition/synthesis loop can be verified end to end.

mod features;
mod manifest;
mod toy;

pub use features::FeatureMatrix;
pub use manifest::{load_manifest, Manifest, ManifestRecord, Task};
pub use toy::{gen_toy_corpus, ToyDomainSpec, ToyInversion, ToyLanguage};

use thiserror::Error;

/// Errors raised while ingesting corpus files or generating toy data.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{len} trailing bytes after payload")]
    TrailingData { len: usize },
    #[error("non-finite value at frame {frame}, column {col}")]
    NonFinite { frame: usize, col: usize },
    #[error("data length {len} does not match {n_frames} x {dim}")]
    ShapeMismatch { len: usize, n_frames: usize, dim: usize },
    #[error("manifest line {line}: {msg}")]
    BadManifestRecord { line: usize, msg: String },
    #[error("toy domain: {0}")]
    BadToySpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
