//! Merged speech-text vocabulary with BPE metatokens.
//!
//! ID layout is contiguous and fixed: seven specials, then text units, then
//! speech units, then metatokens in merge order. Merges are modality-pure —
//! a metatoken expands to base units of exactly one modality, and specials
//! never participate — so every ID's modality is decidable from the table.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("text symbol list must be nonempty")]
    EmptySymbols,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("duplicate text symbol {0:?}")]
    DuplicateSymbol(char),
    #[error("target size {target} below current vocab size {current}")]
    TargetTooSmall { target: usize, current: usize },
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("bad vocab file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The seven control tokens, in their fixed ID order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    StartText,
    StartSpeech,
    GenerateText,
    GenerateSpeech,
    Eos,
    Pad,
    Unk,
}

impl Special {
    pub const ALL: [Special; 7] = [
        Special::StartText,
        Special::StartSpeech,
        Special::GenerateText,
        Special::GenerateSpeech,
        Special::Eos,
        Special::Pad,
        Special::Unk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Special::StartText => "start-text",
            Special::StartSpeech => "start-speech",
            Special::GenerateText => "generate-text",
            Special::GenerateSpeech => "generate-speech",
            Special::Eos => "eos",
            Special::Pad => "pad",
            Special::Unk => "unk",
        }
    }

    pub fn id(self) -> u32 {
        Special::ALL.iter().position(|&s| s == self).unwrap() as u32
    }
}

pub const N_SPECIALS: usize = 7;

/// Which side of the vocabulary a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

/// Surface content of one modality-typed stretch of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(String),
    Speech(Vec<u32>),
}

impl Segment {
    pub fn modality(&self) -> Modality {
        match self {
            Segment::Text(_) => Modality::Text,
            Segment::Speech(_) => Modality::Speech,
        }
    }
}

/// Structured result of decoding: specials interleaved with maximal
/// same-modality surface runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodedItem {
    Special(Special),
    Text(String),
    Speech(Vec<u32>),
}

/// Sequence of token IDs valid for one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
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
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// One BPE rule; the metatoken it introduces is implied by its position in
/// the merge list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRule {
    pub left: u32,
    pub right: u32,
}

const VOCAB_FORMAT: &str = "voxt-vocab-v1";

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    specials: Vec<String>,
    text_units: Vec<char>,
    k: usize,
    merges: Vec<(u32, u32)>,
}

/// The merged vocabulary: specials + text chars + speech units + metatokens.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxtVocab {
    text_units: Vec<char>,
    k: usize,
    merges: Vec<MergeRule>,
    /// Modality of each metatoken, parallel to `merges`.
    merge_modality: Vec<Modality>,
    char_ids: HashMap<char, u32>,
}

impl VoxtVocab {
    /// Builds the base vocabulary: specials in [0,7), text units next, then k
    /// speech units. No merges yet.
    pub fn build_base_vocab(text_symbols: &[char], k: usize) -> Result<Self, VocabError> {
        if text_symbols.is_empty() {
            return Err(VocabError::EmptySymbols);
        }
        if k == 0 {
            return Err(VocabError::ZeroK);
        }
        let mut char_ids = HashMap::new();
        for (i, &c) in text_symbols.iter().enumerate() {
            if char_ids.insert(c, (N_SPECIALS + i) as u32).is_some() {
                return Err(VocabError::DuplicateSymbol(c));
            }
        }
        Ok(Self {
            text_units: text_symbols.to_vec(),
            k,
            merges: Vec::new(),
            merge_modality: Vec::new(),
            char_ids,
        })
    }

    pub fn n_text_units(&self) -> usize {
        self.text_units.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    /// Size before any metatokens.
    pub fn base_size(&self) -> usize {
        N_SPECIALS + self.text_units.len() + self.k
    }

    pub fn total_size(&self) -> usize {
        self.base_size() + self.merges.len()
    }

    pub fn special_id(&self, s: Special) -> u32 {
        s.id()
    }

    pub fn text_id(&self, c: char) -> Option<u32> {
        self.char_ids.get(&c).copied()
    }

    pub fn speech_id(&self, unit: u32) -> Option<u32> {
        if (unit as usize) < self.k {
            Some((N_SPECIALS + self.text_units.len()) as u32 + unit)
        } else {
            None
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < N_SPECIALS
    }

    /// Modality of an ID; `None` for specials.
    pub fn modality_of(&self, id: u32) -> Option<Modality> {
        let id = id as usize;
        let text_end = N_SPECIALS + self.text_units.len();
        let speech_end = text_end + self.k;
        if id < N_SPECIALS {
            None
        } else if id < text_end {
            Some(Modality::Text)
        } else if id < speech_end {
            Some(Modality::Speech)
        } else {
            self.merge_modality.get(id - speech_end).copied()
        }
    }

    /// All IDs of one modality: base units plus that modality's metatokens.
    pub fn ids_of_modality(&self, m: Modality) -> Vec<u32> {
        (0..self.total_size() as u32)
            .filter(|&id| self.modality_of(id) == Some(m))
            .collect()
    }

    /// Expands an ID to base-unit IDs (identity on base IDs; specials are not
    /// expandable and error).
    pub fn expand_to_base(&self, id: u32) -> Result<Vec<u32>, VocabError> {
        if id as usize >= self.total_size() {
            return Err(VocabError::IdOutOfRange {
                id,
                size: self.total_size(),
            });
        }
        let base = self.base_size() as u32;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(top) = stack.pop() {
            if top < base {
                out.push(top);
            } else {
                let rule = self.merges[(top - base) as usize];
                // Right first so left expands first.
                stack.push(rule.right);
                stack.push(rule.left);
            }
        }
        Ok(out)
    }

    /// Encodes modality segments to IDs: base-unit lookup (unknowns become
    /// ⟨unk⟩), then merges applied in training order within each segment.
    pub fn encode(&self, segments: &[Segment]) -> TokenSeq {
        let unk = Special::Unk.id();
        let mut out = Vec::new();
        for seg in segments {
            let mut ids: Vec<u32> = match seg {
                Segment::Text(s) => s
                    .chars()
                    .map(|c| self.text_id(c).unwrap_or(unk))
                    .collect(),
                Segment::Speech(units) => units
                    .iter()
                    .map(|&u| self.speech_id(u).unwrap_or(unk))
                    .collect(),
            };
            for (rank, rule) in self.merges.iter().enumerate() {
                let new_id = (self.base_size() + rank) as u32;
                ids = apply_merge(&ids, rule.left, rule.right, new_id);
            }
            out.extend(ids);
        }
        TokenSeq::new(out)
    }

    /// Decodes IDs to structure: specials pass through, metatokens expand,
    /// and adjacent same-modality base units collect into maximal segments.
    pub fn decode(&self, seq: &TokenSeq) -> Result<Vec<DecodedItem>, VocabError> {
        let mut items: Vec<DecodedItem> = Vec::new();
        for &id in seq.as_slice() {
            if self.is_special(id) {
                items.push(DecodedItem::Special(Special::ALL[id as usize]));
                continue;
            }
            for b in self.expand_to_base(id)? {
                match self.modality_of(b).expect("base non-special has modality") {
                    Modality::Text => {
                        let c = self.text_units[b as usize - N_SPECIALS];
                        match items.last_mut() {
                            Some(DecodedItem::Text(s)) => s.push(c),
                            _ => items.push(DecodedItem::Text(c.to_string())),
                        }
                    }
                    Modality::Speech => {
                        let unit = b - (N_SPECIALS + self.text_units.len()) as u32;
                        match items.last_mut() {
                            Some(DecodedItem::Speech(v)) => v.push(unit),
                            _ => items.push(DecodedItem::Speech(vec![unit])),
                        }
                    }
                }
            }
        }
        Ok(items)
    }

    /// Learns BPE merges from already-encoded corpora until `target_size`
    /// IDs exist or no adjacent pair occurs at least twice. Pairs crossing a
    /// modality boundary or touching a special are never merged; frequency
    /// ties go to the smaller (left, right) pair.
    pub fn train_bpe(
        &self,
        corpora: &[TokenSeq],
        target_size: usize,
    ) -> Result<VoxtVocab, VocabError> {
        if target_size < self.total_size() {
            return Err(VocabError::TargetTooSmall {
                target: target_size,
                current: self.total_size(),
            });
        }
        let mut vocab = self.clone();
        let mut seqs: Vec<Vec<u32>> = corpora.iter().map(|s| s.as_slice().to_vec()).collect();
        while vocab.total_size() < target_size {
            let Some((left, right)) = best_pair(&vocab, &seqs) else {
                break;
            };
            let new_id = vocab.total_size() as u32;
            let modality = vocab
                .modality_of(left)
                .expect("merge candidates are non-special");
            vocab.merges.push(MergeRule { left, right });
            vocab.merge_modality.push(modality);
            for s in &mut seqs {
                *s = apply_merge(s, left, right, new_id);
            }
        }
        Ok(vocab)
    }

    /// Writes the versioned JSON vocab file. Field order is fixed, so equal
    /// vocabs produce byte-identical files.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let file = VocabFile {
            format: VOCAB_FORMAT.to_string(),
            specials: Special::ALL.iter().map(|s| s.name().to_string()).collect(),
            text_units: self.text_units.clone(),
            k: self.k,
            merges: self.merges.iter().map(|m| (m.left, m.right)).collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let raw = std::fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&raw)?;
        if file.format != VOCAB_FORMAT {
            return Err(VocabError::BadVocabFile(format!(
                "expected format {VOCAB_FORMAT:?}, found {:?}",
                file.format
            )));
        }
        let expected: Vec<String> = Special::ALL.iter().map(|s| s.name().to_string()).collect();
        if file.specials != expected {
            return Err(VocabError::BadVocabFile(
                "special token list does not match this version".into(),
            ));
        }
        let mut vocab = VoxtVocab::build_base_vocab(&file.text_units, file.k)?;
        for (left, right) in file.merges {
            let next = vocab.total_size() as u32;
            if left >= next || right >= next {
                return Err(VocabError::BadVocabFile(format!(
                    "merge ({left},{right}) references an undefined id"
                )));
            }
            let (lm, rm) = (vocab.modality_of(left), vocab.modality_of(right));
            match (lm, rm) {
                (Some(a), Some(b)) if a == b => {
                    vocab.merges.push(MergeRule { left, right });
                    vocab.merge_modality.push(a);
                }
                _ => {
                    return Err(VocabError::BadVocabFile(format!(
                        "merge ({left},{right}) crosses modality or touches a special"
                    )));
                }
            }
        }
        Ok(vocab)
    }
}

/// Replaces non-overlapping (left,right) occurrences with `new_id`, scanning
/// left to right.
fn apply_merge(seq: &[u32], left: u32, right: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if seq[i] == left && i + 1 < seq.len() && seq[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Highest-frequency mergeable adjacent pair (overlapping counts), requiring
/// frequency >= 2; ties to the smaller (left, right).
fn best_pair(vocab: &VoxtVocab, seqs: &[Vec<u32>]) -> Option<(u32, u32)> {
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    for s in seqs {
        for w in s.windows(2) {
            let (a, b) = (w[0], w[1]);
            match (vocab.modality_of(a), vocab.modality_of(b)) {
                (Some(ma), Some(mb)) if ma == mb => {
                    *counts.entry((a, b)).or_insert(0) += 1;
                }
                _ => {}
            }
        }
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= 2)
        .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        .map(|(p, _)| p)
}
