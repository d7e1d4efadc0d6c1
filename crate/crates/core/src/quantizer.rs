//! Speech tokenizer: k-means vector quantization of feature frames.
//!
//! A [`Codebook`] holds k centroids; [`assign`] maps each frame to its
//! nearest centroid index, producing discrete speech tokens. Training uses
//! Lloyd's algorithm with k-means++ seeding, empty-cluster repair, and a
//! fixed-point convergence test. [`dedup_runs`] collapses frame repetitions
//! before downstream subword merging.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, FeatureMatrix};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("max_iters must be at least 1")]
    ZeroIters,
    #[error("need at least k={k} frames, got {n_frames}")]
    TooFewFrames { n_frames: usize, k: usize },
    #[error("frame dim {frame_dim} does not match codebook dim {codebook_dim}")]
    DimMismatch { frame_dim: usize, codebook_dim: usize },
    #[error("codebook sidecar disagrees with matrix: {0}")]
    SidecarMismatch(String),
    #[error("bad token file: {0}")]
    BadTokenFile(String),
    #[error("token {token} out of range for k={k}")]
    TokenOutOfRange { token: u32, k: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// k centroids in feature space; the discrete speech vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    /// Row-major k x dim.
    centroids: Vec<f32>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CodebookSidecar {
    k: usize,
    dim: usize,
    seed: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Writes centroids as a feature matrix and a JSON sidecar next to it
    /// (same stem, `.json` extension).
    pub fn save(&self, path: &Path) -> Result<(), QuantError> {
        let mat = FeatureMatrix::new(self.k, self.dim, self.centroids.clone())?;
        mat.write(path)?;
        let sidecar = CodebookSidecar {
            k: self.k,
            dim: self.dim,
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QuantError> {
        let mat = FeatureMatrix::read(path)?;
        let raw = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: CodebookSidecar = serde_json::from_str(&raw)?;
        if sidecar.k != mat.n_frames() || sidecar.dim != mat.dim() {
            return Err(QuantError::SidecarMismatch(format!(
                "sidecar says {}x{}, matrix is {}x{}",
                sidecar.k,
                sidecar.dim,
                mat.n_frames(),
                mat.dim()
            )));
        }
        Ok(Self {
            k: sidecar.k,
            dim: sidecar.dim,
            centroids: mat.data().to_vec(),
            seed: sidecar.seed,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Discrete speech token sequence; every token is a centroid index in [0, k).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SpeechTokenSeq(Vec<u32>);

#[derive(Serialize, Deserialize)]
struct TokenFile {
    format: String,
    k: usize,
    tokens: Vec<u32>,
}

const TOKEN_FORMAT: &str = "voxt-tokens-v1";

impl SpeechTokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    /// Writes a versioned JSON token file, checking every token against `k`.
    pub fn write(&self, path: &Path, k: usize) -> Result<(), QuantError> {
        for &t in &self.0 {
            if t as usize >= k {
                return Err(QuantError::TokenOutOfRange { token: t, k });
            }
        }
        let file = TokenFile {
            format: TOKEN_FORMAT.to_string(),
            k,
            tokens: self.0.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    /// Reads a token file, returning the sequence and its unit count k.
    pub fn read(path: &Path) -> Result<(Self, usize), QuantError> {
        let raw = std::fs::read_to_string(path)?;
        let file: TokenFile = serde_json::from_str(&raw)?;
        if file.format != TOKEN_FORMAT {
            return Err(QuantError::BadTokenFile(format!(
                "expected format {TOKEN_FORMAT:?}, found {:?}",
                file.format
            )));
        }
        for &t in &file.tokens {
            if t as usize >= file.k {
                return Err(QuantError::TokenOutOfRange { token: t, k: file.k });
            }
        }
        Ok((Self(file.tokens), file.k))
    }
}

/// Trains a codebook with Lloyd's algorithm (k-means++ seeding). Stops at the
/// assignment fixed point or after `max_iters` passes.
pub fn train_codebook(
    frames: &FeatureMatrix,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Codebook, QuantError> {
    train_codebook_traced(frames, k, max_iters, seed).map(|(cb, _)| cb)
}

/// As [`train_codebook`], additionally returning the total distortion
/// measured after each assignment pass (non-increasing by construction).
pub fn train_codebook_traced(
    frames: &FeatureMatrix,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Codebook, Vec<f64>), QuantError> {
    if k == 0 {
        return Err(QuantError::ZeroK);
    }
    if max_iters == 0 {
        return Err(QuantError::ZeroIters);
    }
    let n = frames.n_frames();
    let dim = frames.dim();
    if n < k {
        return Err(QuantError::TooFewFrames { n_frames: n, k });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(frames, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..max_iters {
        let mut changed = false;
        let mut distortion = 0.0f64;
        for i in 0..n {
            let (j, d2) = nearest(frames.row(i), &centroids, dim);
            distortion += d2;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        trace.push(distortion);
        if !changed {
            break;
        }

        // Means of each cluster.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignments[i];
            counts[j] += 1;
            for (d, &x) in frames.row(i).iter().enumerate() {
                sums[j * dim + d] += x as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for d in 0..dim {
                    centroids[j * dim + d] = (sums[j * dim + d] / counts[j] as f64) as f32;
                }
            }
        }
        repair_empty_clusters(frames, &mut centroids, &assignments, &counts, dim);
    }

    let cb = Codebook {
        k,
        dim,
        centroids,
        seed,
    };
    Ok((cb, trace))
}

/// Moves each empty cluster's centroid onto the frame currently farthest from
/// its own centroid, keeping k populated without shrinking the codebook.
fn repair_empty_clusters(
    frames: &FeatureMatrix,
    centroids: &mut [f32],
    assignments: &[usize],
    counts: &[usize],
    dim: usize,
) {
    let mut taken: HashSet<usize> = HashSet::new();
    for j in 0..counts.len() {
        if counts[j] > 0 {
            continue;
        }
        let mut far_i = 0;
        let mut far_d = -1.0f64;
        for i in 0..frames.n_frames() {
            if taken.contains(&i) {
                continue;
            }
            let own = &centroids[assignments[i] * dim..(assignments[i] + 1) * dim];
            let d = sq_dist(frames.row(i), own);
            if d > far_d {
                far_d = d;
                far_i = i;
            }
        }
        taken.insert(far_i);
        for (d, &x) in frames.row(far_i).iter().enumerate() {
            centroids[j * dim + d] = x;
        }
    }
}

/// k-means++ seeding: first centroid uniform, each next drawn with
/// probability proportional to squared distance from the chosen set.
fn seed_plus_plus(frames: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = frames.n_frames();
    let dim = frames.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(frames.row(first));

    let mut d2 = vec![0.0f64; n];
    for _ in 1..k {
        let chosen = centroids.len() / dim;
        let mut total = 0.0f64;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..chosen {
                let d = sq_dist(frames.row(i), &centroids[j * dim..(j + 1) * dim]);
                if d < best {
                    best = d;
                }
            }
            d2[i] = best;
            total += best;
        }
        let next = if total > 0.0 {
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for i in 0..n {
                acc += d2[i];
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points); any index works.
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(frames.row(next));
    }
    centroids
}

fn nearest(frame: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let k = centroids.len() / dim;
    let mut best_j = 0;
    let mut best_d = f64::INFINITY;
    for j in 0..k {
        let d = sq_dist(frame, &centroids[j * dim..(j + 1) * dim]);
        // Strict inequality keeps the lowest index on ties.
        if d < best_d {
            best_d = d;
            best_j = j;
        }
    }
    (best_j, best_d)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Maps each frame to its nearest centroid (squared Euclidean distance, ties
/// to the lowest index).
pub fn assign(frames: &FeatureMatrix, cb: &Codebook) -> Result<SpeechTokenSeq, QuantError> {
    if frames.dim() != cb.dim && frames.n_frames() > 0 {
        return Err(QuantError::DimMismatch {
            frame_dim: frames.dim(),
            codebook_dim: cb.dim,
        });
    }
    let tokens = (0..frames.n_frames())
        .map(|i| nearest(frames.row(i), &cb.centroids, cb.dim).0 as u32)
        .collect();
    Ok(SpeechTokenSeq::new(tokens))
}

/// Collapses maximal runs of identical adjacent tokens to a single token.
pub fn dedup_runs(seq: &SpeechTokenSeq) -> SpeechTokenSeq {
    let mut out = Vec::with_capacity(seq.len());
    for &t in seq.as_slice() {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    SpeechTokenSeq::new(out)
}
