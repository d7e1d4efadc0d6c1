//! JSONL manifests binding utterance ids to tasks and data files.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// The four modeling tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Textlm,
    Speechlm,
    Asr,
    Tts,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Textlm, Task::Speechlm, Task::Asr, Task::Tts];

    /// Stable index used for task-weight vectors and per-task datasets.
    pub fn index(self) -> usize {
        match self {
            Task::Textlm => 0,
            Task::Speechlm => 1,
            Task::Asr => 2,
            Task::Tts => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Textlm => "textlm",
            Task::Speechlm => "speechlm",
            Task::Asr => "asr",
            Task::Tts => "tts",
        }
    }

    pub fn needs_text(self) -> bool {
        matches!(self, Task::Textlm | Task::Asr | Task::Tts)
    }

    pub fn needs_speech(self) -> bool {
        matches!(self, Task::Speechlm | Task::Asr | Task::Tts)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "textlm" => Ok(Task::Textlm),
            "speechlm" => Ok(Task::Speechlm),
            "asr" => Ok(Task::Asr),
            "tts" => Ok(Task::Tts),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// One manifest line: a task-tagged utterance and where its sides live.
///
/// The speech side is either a feature file (pre-quantization) or a token
/// file (post-quantization); paired tasks carry both a text and a speech
/// side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_path: Option<PathBuf>,
}

impl ManifestRecord {
    fn validate(&self) -> Result<(), String> {
        let has_speech = self.feature_path.is_some() || self.token_path.is_some();
        if self.task.needs_text() && self.text.is_none() {
            return Err(format!(
                "{} record {:?} is missing its text field",
                self.task, self.utt_id
            ));
        }
        if self.task.needs_speech() && !has_speech {
            return Err(format!(
                "{} record {:?} is missing a speech side (feature_path or token_path)",
                self.task, self.utt_id
            ));
        }
        if self.task == Task::Textlm && has_speech {
            return Err(format!(
                "textlm record {:?} must not carry a speech side",
                self.utt_id
            ));
        }
        if self.task == Task::Speechlm && self.text.is_some() {
            return Err(format!(
                "speechlm record {:?} must not carry text",
                self.utt_id
            ));
        }
        Ok(())
    }
}

/// A validated list of manifest records.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self, CorpusError> {
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|msg| CorpusError::BadManifestRecord {
                line: i + 1,
                msg,
            })?;
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task_count(&self, task: Task) -> usize {
        self.records.iter().filter(|r| r.task == task).count()
    }

    pub fn by_task(&self, task: Task) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.task == task)
    }

    /// Serializes records back to JSONL.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses a JSONL manifest, one record per line, blank lines ignored.
pub fn load_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let r = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::BadManifestRecord {
                line: i + 1,
                msg: e.to_string(),
            })?;
        rec.validate().map_err(|msg| CorpusError::BadManifestRecord {
            line: i + 1,
            msg,
        })?;
        records.push(rec);
    }
    Ok(Manifest { records })
}
