//! Fixed-dimension feature matrices and their `.fmx` on-disk format.
//!
//! Layout: magic `FMX1`, then `n_frames` and `dim` as little-endian u32,
//! then `n_frames * dim` little-endian IEEE-754 f32 values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::CorpusError;

const MAGIC: &[u8; 4] = b"FMX1";

/// Rows of real-valued feature frames, one fixed-dimension row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    /// Builds a matrix, checking the shape/length invariant and finiteness.
    pub fn new(n_frames: usize, dim: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if data.len() != n_frames * dim {
            return Err(CorpusError::ShapeMismatch {
                len: data.len(),
                n_frames,
                dim,
            });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CorpusError::NonFinite {
                    frame: if dim == 0 { 0 } else { i / dim },
                    col: if dim == 0 { 0 } else { i % dim },
                });
            }
        }
        Ok(Self {
            n_frames,
            dim,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.n_frames)
    }

    /// Concatenates matrices of equal dimension into one frame stack.
    pub fn concat(parts: &[&FeatureMatrix]) -> Result<Self, CorpusError> {
        let dim = parts.first().map_or(0, |m| m.dim);
        let mut data = Vec::new();
        let mut n_frames = 0;
        for m in parts {
            if m.dim != dim {
                return Err(CorpusError::ShapeMismatch {
                    len: m.data.len(),
                    n_frames: m.n_frames,
                    dim,
                });
            }
            data.extend_from_slice(&m.data);
            n_frames += m.n_frames;
        }
        Self::new(n_frames, dim, data)
    }

    /// Writes the `.fmx` binary layout.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an `.fmx` file, validating magic, length, and finiteness.
    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CorpusError> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(CorpusError::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&buf[..buf.len().min(4)]).into_owned(),
            });
        }
        if buf.len() < 12 {
            return Err(CorpusError::Truncated {
                expected: 12,
                found: buf.len(),
            });
        }
        let n_frames = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let payload = &buf[12..];
        let expected = n_frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(CorpusError::Truncated {
                expected: usize::MAX,
                found: payload.len(),
            })?;
        if payload.len() < expected {
            return Err(CorpusError::Truncated {
                expected: expected + 12,
                found: buf.len(),
            });
        }
        if payload.len() > expected {
            return Err(CorpusError::TrailingData {
                len: payload.len() - expected,
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n_frames, dim, data)
    }
}
