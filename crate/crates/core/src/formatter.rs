//! Task formatting: special-token sequence layouts for training and
//! inference, and the inverse parse of generated output.
//!
//! Layouts per task (training):
//!   textlm    ⟨generate-text⟩ Y ⟨eos⟩
//!   speechlm  ⟨generate-speech⟩ D ⟨eos⟩
//!   asr       ⟨start-speech⟩ D ⟨generate-text⟩ Y ⟨eos⟩
//!   tts       ⟨start-text⟩ Y ⟨generate-speech⟩ D ⟨eos⟩
//! Prompts are the training layout truncated right after the generate token.
//!
//! Formatted corpora are persisted as a framed binary file (`VDS1` magic,
//! u32 length prefix per record) with a JSONL index carrying utt ids, tasks,
//! and byte offsets.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Task;
use crate::vocab::{Modality, Special, TokenSeq, VoxtVocab};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("task {task} requires a {side} segment")]
    MissingSegment { task: Task, side: &'static str },
    #[error("task {task} must not carry a {side} segment")]
    ForbiddenSegment { task: Task, side: &'static str },
    #[error("id {id} is not a {expected:?} unit")]
    WrongModality { id: u32, expected: Modality },
    #[error("malformed generated sequence: {0}")]
    Malformed(String),
    #[error("bad dataset file: {0}")]
    BadDataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One training example: a task plus its encoded segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub task: Task,
    pub text: Option<TokenSeq>,
    pub speech: Option<TokenSeq>,
}

impl TaskRecord {
    pub fn textlm(text: TokenSeq) -> Self {
        Self {
            task: Task::Textlm,
            text: Some(text),
            speech: None,
        }
    }

    pub fn speechlm(speech: TokenSeq) -> Self {
        Self {
            task: Task::Speechlm,
            text: None,
            speech: Some(speech),
        }
    }

    pub fn asr(speech: TokenSeq, text: TokenSeq) -> Self {
        Self {
            task: Task::Asr,
            text: Some(text),
            speech: Some(speech),
        }
    }

    pub fn tts(text: TokenSeq, speech: TokenSeq) -> Self {
        Self {
            task: Task::Tts,
            text: Some(text),
            speech: Some(speech),
        }
    }
}

fn require<'a>(
    seg: &'a Option<TokenSeq>,
    task: Task,
    side: &'static str,
) -> Result<&'a TokenSeq, FormatError> {
    seg.as_ref()
        .ok_or(FormatError::MissingSegment { task, side })
}

fn forbid(seg: &Option<TokenSeq>, task: Task, side: &'static str) -> Result<(), FormatError> {
    if seg.is_some() {
        return Err(FormatError::ForbiddenSegment { task, side });
    }
    Ok(())
}

fn check_modality(
    seq: &TokenSeq,
    expected: Modality,
    vocab: &VoxtVocab,
) -> Result<(), FormatError> {
    for &id in seq.as_slice() {
        if vocab.modality_of(id) != Some(expected) {
            return Err(FormatError::WrongModality { id, expected });
        }
    }
    Ok(())
}

/// Emits the full training sequence for a record, ending in ⟨eos⟩.
pub fn format_train(record: &TaskRecord, vocab: &VoxtVocab) -> Result<TokenSeq, FormatError> {
    let task = record.task;
    let mut ids = Vec::new();
    match task {
        Task::Textlm => {
            let y = require(&record.text, task, "text")?;
            forbid(&record.speech, task, "speech")?;
            check_modality(y, Modality::Text, vocab)?;
            ids.push(Special::GenerateText.id());
            ids.extend_from_slice(y.as_slice());
        }
        Task::Speechlm => {
            let d = require(&record.speech, task, "speech")?;
            forbid(&record.text, task, "text")?;
            check_modality(d, Modality::Speech, vocab)?;
            ids.push(Special::GenerateSpeech.id());
            ids.extend_from_slice(d.as_slice());
        }
        Task::Asr => {
            let d = require(&record.speech, task, "speech")?;
            let y = require(&record.text, task, "text")?;
            check_modality(d, Modality::Speech, vocab)?;
            check_modality(y, Modality::Text, vocab)?;
            ids.push(Special::StartSpeech.id());
            ids.extend_from_slice(d.as_slice());
            ids.push(Special::GenerateText.id());
            ids.extend_from_slice(y.as_slice());
        }
        Task::Tts => {
            let y = require(&record.text, task, "text")?;
            let d = require(&record.speech, task, "speech")?;
            check_modality(y, Modality::Text, vocab)?;
            check_modality(d, Modality::Speech, vocab)?;
            ids.push(Special::StartText.id());
            ids.extend_from_slice(y.as_slice());
            ids.push(Special::GenerateSpeech.id());
            ids.extend_from_slice(d.as_slice());
        }
    }
    ids.push(Special::Eos.id());
    Ok(TokenSeq::new(ids))
}

/// Emits the inference prompt: the conditioning segment wrapped so the
/// sequence ends exactly at the generate token.
pub fn format_prompt(
    task: Task,
    condition: &TokenSeq,
    vocab: &VoxtVocab,
) -> Result<TokenSeq, FormatError> {
    let mut ids = Vec::new();
    match task {
        Task::Asr => {
            check_modality(condition, Modality::Speech, vocab)?;
            ids.push(Special::StartSpeech.id());
            ids.extend_from_slice(condition.as_slice());
            ids.push(Special::GenerateText.id());
        }
        Task::Tts => {
            check_modality(condition, Modality::Text, vocab)?;
            ids.push(Special::StartText.id());
            ids.extend_from_slice(condition.as_slice());
            ids.push(Special::GenerateSpeech.id());
        }
        Task::Textlm => {
            check_modality(condition, Modality::Text, vocab)?;
            ids.push(Special::GenerateText.id());
            ids.extend_from_slice(condition.as_slice());
        }
        Task::Speechlm => {
            check_modality(condition, Modality::Speech, vocab)?;
            ids.push(Special::GenerateSpeech.id());
            ids.extend_from_slice(condition.as_slice());
        }
    }
    Ok(TokenSeq::new(ids))
}

/// Structured view of a full generated sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub task: Task,
    /// Conditioning segment (empty for the two continuation tasks).
    pub condition: TokenSeq,
    /// Generated segment after the generate token, specials stripped.
    pub content: TokenSeq,
    pub modality: Modality,
    /// False when no ⟨eos⟩ arrived and the tail was taken as content.
    pub terminated: bool,
}

/// Parses a full sequence (prompt plus generation) back into task,
/// condition, and content. Output violating the announced structure is
/// reported as malformed, never silently repaired.
pub fn parse_generated(seq: &TokenSeq, vocab: &VoxtVocab) -> Result<ParsedOutput, FormatError> {
    let gen_text = Special::GenerateText.id();
    let gen_speech = Special::GenerateSpeech.id();
    let eos = Special::Eos.id();

    let all = seq.as_slice();
    let eos_idx = all.iter().position(|&t| t == eos);
    let terminated = eos_idx.is_some();
    let effective = &all[..eos_idx.unwrap_or(all.len())];

    let gen_idx = effective
        .iter()
        .rposition(|&t| t == gen_text || t == gen_speech)
        .ok_or_else(|| FormatError::Malformed("no generate token before content".into()))?;
    let modality = if effective[gen_idx] == gen_text {
        Modality::Text
    } else {
        Modality::Speech
    };

    let content = &effective[gen_idx + 1..];
    for &id in content {
        if vocab.modality_of(id) != Some(modality) {
            return Err(FormatError::Malformed(format!(
                "token {id} after the {modality:?} generate token is not a {modality:?} unit"
            )));
        }
    }

    let first = effective[0];
    let (task, condition) = if first == gen_text || first == gen_speech {
        if gen_idx != 0 {
            return Err(FormatError::Malformed(
                "multiple generate tokens in one sequence".into(),
            ));
        }
        let task = if first == gen_text {
            Task::Textlm
        } else {
            Task::Speechlm
        };
        (task, Vec::new())
    } else if first == Special::StartSpeech.id() {
        if modality != Modality::Text {
            return Err(FormatError::Malformed(
                "speech-conditioned sequence must generate text".into(),
            ));
        }
        let cond = &effective[1..gen_idx];
        for &id in cond {
            if vocab.modality_of(id) != Some(Modality::Speech) {
                return Err(FormatError::Malformed(format!(
                    "condition token {id} is not a speech unit"
                )));
            }
        }
        (Task::Asr, cond.to_vec())
    } else if first == Special::StartText.id() {
        if modality != Modality::Speech {
            return Err(FormatError::Malformed(
                "text-conditioned sequence must generate speech".into(),
            ));
        }
        let cond = &effective[1..gen_idx];
        for &id in cond {
            if vocab.modality_of(id) != Some(Modality::Text) {
                return Err(FormatError::Malformed(format!(
                    "condition token {id} is not a text unit"
                )));
            }
        }
        (Task::Tts, cond.to_vec())
    } else {
        return Err(FormatError::Malformed(format!(
            "sequence opens with token {first}, not a task opener"
        )));
    };

    Ok(ParsedOutput {
        task,
        condition: TokenSeq::new(condition),
        content: TokenSeq::new(content.to_vec()),
        modality,
        terminated,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"VDS1";

/// One dataset record as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub utt_id: String,
    pub task: Task,
    pub seq: TokenSeq,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    utt_id: String,
    task: Task,
    offset: u64,
    n_tokens: u32,
}

fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

/// Writes the framed dataset and its JSONL index (`<path>.idx`).
pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), FormatError> {
    let mut data = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut index = std::io::BufWriter::new(std::fs::File::create(index_path(path))?);
    data.write_all(DATASET_MAGIC)?;
    let mut offset = DATASET_MAGIC.len() as u64;
    for rec in records {
        let n = rec.seq.len() as u32;
        let line = IndexLine {
            utt_id: rec.utt_id.clone(),
            task: rec.task,
            offset,
            n_tokens: n,
        };
        serde_json::to_writer(&mut index, &line)?;
        index.write_all(b"\n")?;
        data.write_all(&n.to_le_bytes())?;
        for &id in rec.seq.as_slice() {
            data.write_all(&id.to_le_bytes())?;
        }
        offset += 4 + 4 * n as u64;
    }
    data.flush()?;
    index.flush()?;
    Ok(())
}

/// Loads a dataset, cross-checking frames against the index and every token
/// id against the vocab size.
pub fn load_dataset(path: &Path, vocab_size: usize) -> Result<Vec<DatasetRecord>, FormatError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(FormatError::BadDataset("missing VDS1 magic".into()));
    }
    let index_file = std::fs::File::open(index_path(path))?;
    let mut records = Vec::new();
    let mut end = 4u64;
    for (lineno, line) in std::io::BufReader::new(index_file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexLine = serde_json::from_str(&line).map_err(|e| {
            FormatError::BadDataset(format!("index line {}: {e}", lineno + 1))
        })?;
        let off = entry.offset as usize;
        if off + 4 > bytes.len() {
            return Err(FormatError::BadDataset(format!(
                "record {:?} offset {off} beyond file end",
                entry.utt_id
            )));
        }
        let n = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if n != entry.n_tokens {
            return Err(FormatError::BadDataset(format!(
                "record {:?}: frame length {n} != index length {}",
                entry.utt_id, entry.n_tokens
            )));
        }
        let body_end = off + 4 + 4 * n as usize;
        if body_end > bytes.len() {
            return Err(FormatError::BadDataset(format!(
                "record {:?} truncated",
                entry.utt_id
            )));
        }
        let ids: Vec<u32> = bytes[off + 4..body_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for &id in &ids {
            if id as usize >= vocab_size {
                return Err(FormatError::BadDataset(format!(
                    "record {:?}: id {id} outside vocab of size {vocab_size}",
                    entry.utt_id
                )));
            }
        }
        end = end.max(body_end as u64);
        records.push(DatasetRecord {
            utt_id: entry.utt_id,
            task: entry.task,
            seq: TokenSeq::new(ids),
        });
    }
    if end != bytes.len() as u64 {
        return Err(FormatError::BadDataset(format!(
            "{} trailing bytes after last indexed record",
            bytes.len() as u64 - end
        )));
    }
    Ok(records)
}
