//! Synthetic toy speech domain with a known invertible text-to-token map.
//!
//! Each character maps to a fixed tuple of speech units; a reserved unit
//! separates words. Tuples are built from alternating disjoint unit classes,
//! so an ideal token stream never contains two equal adjacent units. Frame
//! repetition noise (`dup_prob`) only ever creates adjacent duplicates, which
//! run-length dedup removes exactly, keeping the stream invertible.
//!
//! Toy text is sampled from a seeded word lexicon with a first-order word
//! transition model, so sequences carry learnable structure beyond unigram
//! statistics.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, FeatureMatrix};
use crate::quantizer::{dedup_runs, SpeechTokenSeq};

const MAP_SALT: u64 = 0x746f_795f_6d61_7031;
const LEX_SALT: u64 = 0x746f_795f_6c65_7832;
const TRANS_SALT: u64 = 0x746f_795f_7472_6e33;
const UTT_SALT: u64 = 0x746f_795f_7574_7434;
const FEAT_SALT: u64 = 0x746f_795f_6665_6135;

/// Lexicon word lengths in chars. Words are long and variable enough that
/// space timing alone cannot compress the stream far below its unigram
/// statistics; getting there takes actual word knowledge.
const WORD_LEN: std::ops::RangeInclusive<usize> = 4..=6;

/// Spread of the log-normal word-transition weights. Kept mild so the
/// structure is learnable but no single continuation dominates a row:
/// compressing text requires broad word knowledge, not a few memorized
/// pairs.
const TRANS_SPREAD: f64 = 0.7;

/// Replacement character emitted for speech tuples that do not decode.
pub const UNDECODABLE: char = '\u{FFFD}';

/// Configuration of the toy domain.
///
/// `k` is the speech unit alphabet size and `lexicon_size` the number of toy
/// words; both are needed to pin the generated language down and are part of
/// the persisted spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDomainSpec {
    pub charset: Vec<char>,
    pub k: usize,
    #[serde(default = "default_arity")]
    pub arity: usize,
    #[serde(default = "default_dup_prob")]
    pub dup_prob: f64,
    #[serde(default = "default_lexicon")]
    pub lexicon_size: usize,
    pub seed: u64,
}

fn default_arity() -> usize {
    2
}
fn default_dup_prob() -> f64 {
    0.3
}
fn default_lexicon() -> usize {
    64
}

impl Default for ToyDomainSpec {
    fn default() -> Self {
        Self {
            charset: ('a'..='z').collect(),
            k: 16,
            arity: default_arity(),
            dup_prob: default_dup_prob(),
            lexicon_size: default_lexicon(),
            seed: 0,
        }
    }
}

impl ToyDomainSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |msg: String| Err(CorpusError::BadToySpec(msg));
        if self.charset.is_empty() {
            return err("charset must be nonempty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for &c in &self.charset {
            if c.is_whitespace() {
                return err("charset must not contain whitespace".into());
            }
            if !seen.insert(c) {
                return err(format!("charset contains duplicate char {c:?}"));
            }
        }
        if self.charset.len() < 2 {
            return err("charset needs at least 2 chars (lexicon words avoid repeated letters)".into());
        }
        if self.arity < 2 {
            return err("arity must be at least 2 (needed so run-length dedup is lossless)".into());
        }
        if self.k < 3 {
            return err("k must be at least 3 (word boundary plus two unit classes)".into());
        }
        if !(0.0..=1.0).contains(&self.dup_prob) {
            return err(format!("dup_prob {} outside [0,1]", self.dup_prob));
        }
        if self.lexicon_size == 0 {
            return err("lexicon_size must be positive".into());
        }
        if tuple_capacity(self.k, self.arity) < self.charset.len() as u128 {
            return err(format!(
                "k={} arity={} admits only {} distinct tuples for {} chars",
                self.k,
                self.arity,
                tuple_capacity(self.k, self.arity),
                self.charset.len()
            ));
        }
        Ok(())
    }
}

/// Sizes of the two alternating unit classes (boundary unit excluded).
fn class_sizes(k: usize) -> (usize, usize) {
    let n = k - 1;
    (n - n / 2, n / 2)
}

fn tuple_capacity(k: usize, arity: usize) -> u128 {
    let (a, b) = class_sizes(k);
    let mut cap: u128 = 1;
    for p in 0..arity {
        let c = if p % 2 == 0 { a } else { b } as u128;
        cap = cap.saturating_mul(c);
    }
    cap
}

/// Result of inverting a speech token stream back to text.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInversion {
    pub text: String,
    /// Count of token groups that did not decode to a known tuple.
    pub errors: usize,
}

/// The fully instantiated toy language: unit mapping, lexicon, and word
/// transition model, all deterministic functions of a [`ToyDomainSpec`].
#[derive(Debug, Clone)]
pub struct ToyLanguage {
    spec: ToyDomainSpec,
    boundary: u32,
    char_to_tuple: HashMap<char, Vec<u32>>,
    tuple_to_char: HashMap<Vec<u32>, char>,
    lexicon: Vec<String>,
    init_cum: Vec<f64>,
    trans_cum: Vec<Vec<f64>>,
}

impl ToyLanguage {
    pub fn new(spec: &ToyDomainSpec) -> Result<Self, CorpusError> {
        spec.validate()?;
        let boundary = (spec.k - 1) as u32;
        let (class_a, class_b) = unit_classes(spec.k);

        let mut map_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ MAP_SALT);
        let tuples = assign_tuples(&mut map_rng, &class_a, &class_b, spec.arity, spec.charset.len());
        let mut char_to_tuple = HashMap::new();
        let mut tuple_to_char = HashMap::new();
        for (&c, t) in spec.charset.iter().zip(tuples) {
            char_to_tuple.insert(c, t.clone());
            tuple_to_char.insert(t, c);
        }

        let mut lex_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ LEX_SALT);
        let lexicon = build_lexicon(&mut lex_rng, &spec.charset, spec.lexicon_size);

        let mut trans_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TRANS_SALT);
        let init_cum = cumulative(sample_weights(&mut trans_rng, lexicon.len()));
        let trans_cum = (0..lexicon.len())
            .map(|_| cumulative(sample_weights(&mut trans_rng, lexicon.len())))
            .collect();

        Ok(Self {
            spec: spec.clone(),
            boundary,
            char_to_tuple,
            tuple_to_char,
            lexicon,
            init_cum,
            trans_cum,
        })
    }

    pub fn spec(&self) -> &ToyDomainSpec {
        &self.spec
    }

    pub fn boundary_unit(&self) -> u32 {
        self.boundary
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    pub fn tuple_for(&self, c: char) -> Option<&[u32]> {
        self.char_to_tuple.get(&c).map(|t| t.as_slice())
    }

    /// Maps text to the ideal (noise-free) speech token sequence. Words are
    /// whitespace-separated; a boundary unit is emitted between words.
    pub fn map_text(&self, text: &str) -> Result<SpeechTokenSeq, CorpusError> {
        let mut tokens = Vec::new();
        for (w, word) in text.split_whitespace().enumerate() {
            if w > 0 {
                tokens.push(self.boundary);
            }
            for c in word.chars() {
                let tuple = self.char_to_tuple.get(&c).ok_or_else(|| {
                    CorpusError::BadToySpec(format!("char {c:?} not in toy charset"))
                })?;
                tokens.extend_from_slice(tuple);
            }
        }
        Ok(SpeechTokenSeq::new(tokens))
    }

    /// Duplicates each emitted token with probability `dup_prob`, simulating
    /// frame repetition.
    pub fn with_dup_noise<R: Rng>(&self, ideal: &SpeechTokenSeq, rng: &mut R) -> SpeechTokenSeq {
        let mut out = Vec::with_capacity(ideal.len() * 2);
        for &t in ideal.as_slice() {
            out.push(t);
            if self.spec.dup_prob > 0.0 && rng.gen::<f64>() < self.spec.dup_prob {
                out.push(t);
            }
        }
        SpeechTokenSeq::new(out)
    }

    /// Inverts a speech token stream to text: collapse runs, split on the
    /// boundary unit, decode tuple groups. Undecodable groups produce one
    /// replacement char each and are counted in `errors`.
    pub fn invert(&self, tokens: &[u32]) -> ToyInversion {
        let deduped = dedup_runs(&SpeechTokenSeq::new(tokens.to_vec()));
        let mut text = String::new();
        let mut errors = 0;
        let mut first_word = true;
        for word_units in deduped.as_slice().split(|&u| u == self.boundary) {
            if !first_word {
                text.push(' ');
            }
            first_word = false;
            for group in word_units.chunks(self.spec.arity) {
                if group.len() == self.spec.arity {
                    if let Some(&c) = self.tuple_to_char.get(group) {
                        text.push(c);
                        continue;
                    }
                }
                text.push(UNDECODABLE);
                errors += 1;
            }
        }
        // Boundary-only or empty input yields empty words on both sides.
        let text = text.trim().to_string();
        ToyInversion { text, errors }
    }

    /// Samples one utterance of `n` words from the word transition model.
    pub fn sample_utterance<R: Rng>(&self, n_words: usize, rng: &mut R) -> String {
        let mut words = Vec::with_capacity(n_words);
        let mut state: Option<usize> = None;
        for _ in 0..n_words {
            let cum = match state {
                None => &self.init_cum,
                Some(i) => &self.trans_cum[i],
            };
            let next = sample_cumulative(cum, rng);
            words.push(self.lexicon[next].clone());
            state = Some(next);
        }
        words.join(" ")
    }

    /// Per-unit feature centers for synthesizing toy feature frames. Centers
    /// depend only on (seed, dim), so regenerated corpora agree.
    pub fn frame_centers(&self, dim: usize) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ FEAT_SALT);
        (0..self.spec.k)
            .map(|_| (0..dim).map(|_| 6.0 * normal(&mut rng) as f32).collect())
            .collect()
    }

    /// Synthesizes one noisy feature frame per token.
    pub fn features_for<R: Rng>(
        &self,
        tokens: &[u32],
        dim: usize,
        noise_sigma: f64,
        rng: &mut R,
    ) -> FeatureMatrix {
        let centers = self.frame_centers(dim);
        let mut data = Vec::with_capacity(tokens.len() * dim);
        for &t in tokens {
            let c = &centers[t as usize];
            for d in 0..dim {
                data.push(c[d] + (noise_sigma * normal(rng)) as f32);
            }
        }
        FeatureMatrix::new(tokens.len(), dim, data).expect("toy features are finite by construction")
    }
}

/// Generates `n_utts` (text, noisy speech tokens) pairs. Pure in
/// (spec, n_utts, len_range): the same inputs always yield the same corpus.
pub fn gen_toy_corpus(
    spec: &ToyDomainSpec,
    n_utts: usize,
    len_range: (usize, usize),
) -> Result<Vec<(String, SpeechTokenSeq)>, CorpusError> {
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(CorpusError::BadToySpec(format!(
            "invalid word-count range ({lo}, {hi})"
        )));
    }
    let lang = ToyLanguage::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ UTT_SALT);
    let mut out = Vec::with_capacity(n_utts);
    for _ in 0..n_utts {
        let n_words = rng.gen_range(lo..=hi);
        let text = lang.sample_utterance(n_words, &mut rng);
        let ideal = lang.map_text(&text)?;
        let noisy = lang.with_dup_noise(&ideal, &mut rng);
        out.push((text, noisy));
    }
    Ok(out)
}

fn unit_classes(k: usize) -> (Vec<u32>, Vec<u32>) {
    let (a, _) = class_sizes(k);
    let units: Vec<u32> = (0..(k - 1) as u32).collect();
    (units[..a].to_vec(), units[a..].to_vec())
}

/// Picks `n` distinct tuples whose positions alternate between the two unit
/// classes. Small tuple spaces are enumerated and shuffled; large ones are
/// rejection-sampled.
fn assign_tuples(
    rng: &mut ChaCha8Rng,
    class_a: &[u32],
    class_b: &[u32],
    arity: usize,
    n: usize,
) -> Vec<Vec<u32>> {
    let cap = {
        let mut c: u128 = 1;
        for p in 0..arity {
            c = c.saturating_mul(if p % 2 == 0 { class_a.len() } else { class_b.len() } as u128);
        }
        c
    };
    if cap <= 1 << 20 {
        let mut all = Vec::with_capacity(cap as usize);
        enumerate_tuples(class_a, class_b, arity, &mut Vec::new(), &mut all);
        // Fisher-Yates with the seeded rng.
        for i in (1..all.len()).rev() {
            let j = rng.gen_range(0..=i);
            all.swap(i, j);
        }
        all.truncate(n);
        all
    } else {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let t: Vec<u32> = (0..arity)
                .map(|p| {
                    let class = if p % 2 == 0 { class_a } else { class_b };
                    class[rng.gen_range(0..class.len())]
                })
                .collect();
            if seen.insert(t.clone()) {
                out.push(t);
            }
        }
        out
    }
}

fn enumerate_tuples(
    class_a: &[u32],
    class_b: &[u32],
    arity: usize,
    prefix: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
) {
    if prefix.len() == arity {
        out.push(prefix.clone());
        return;
    }
    let class = if prefix.len() % 2 == 0 { class_a } else { class_b };
    for &u in class {
        prefix.push(u);
        enumerate_tuples(class_a, class_b, arity, prefix, out);
        prefix.pop();
    }
}

fn build_lexicon(rng: &mut ChaCha8Rng, charset: &[char], requested: usize) -> Vec<String> {
    let n = charset.len() as f64;
    let feasible: usize = WORD_LEN
        .map(|l| (n * (n - 1.0).powi(l as i32 - 1)).min(usize::MAX as f64) as usize)
        .fold(0usize, |acc, c| acc.saturating_add(c));
    let target = requested.min(feasible.max(1));
    let mut seen = std::collections::HashSet::new();
    let mut lexicon = Vec::with_capacity(target);
    let mut attempts = 0usize;
    while lexicon.len() < target && attempts < 100_000 {
        attempts += 1;
        let len = rng.gen_range(WORD_LEN);
        // No immediately repeated letter: a doubled char means a repeated
        // unit tuple in speech, and distinguishing one repetition from two
        // is orthogonal to what the toy domain exercises.
        let mut w = String::with_capacity(len);
        let mut prev: Option<char> = None;
        for _ in 0..len {
            let c = loop {
                let c = charset[rng.gen_range(0..charset.len())];
                if Some(c) != prev {
                    break c;
                }
            };
            w.push(c);
            prev = Some(c);
        }
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    lexicon
}

/// Log-normal word-transition weights with spread [`TRANS_SPREAD`].
fn sample_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| (TRANS_SPREAD * normal(rng)).exp()).collect()
}

fn cumulative(weights: Vec<f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn sample_cumulative<R: Rng>(cum: &[f64], rng: &mut R) -> usize {
    let total = *cum.last().expect("nonempty distribution");
    let u = rng.gen::<f64>() * total;
    match cum.binary_search_by(|x| x.partial_cmp(&u).unwrap()) {
        Ok(i) | Err(i) => i.min(cum.len() - 1),
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; clamp u1 away from zero.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
