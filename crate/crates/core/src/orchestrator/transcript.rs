use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentConfig, ControlCommand, FailureReason, StepRecord, TaskStatus};

pub const TRANSCRIPT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("transcript has no header record")]
    MissingHeader,
    #[error("step {found} follows step {previous}")]
    StepGap { previous: u32, found: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptHeader {
    pub format: u32,
    pub goal: String,
    pub start: String,
    pub world_id: String,
    pub config_digest: String,
    pub template_sha256: String,
    pub config: AgentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub after_step: u32,
    pub questions: Vec<String>,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub after_step: u32,
    pub command: ControlCommand,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub status: TaskStatus,
    pub step_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<String>,
}

/// One JSON line of a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Header(TranscriptHeader),
    Step(StepRecord),
    Answers(AnswerRecord),
    Control(ControlRecord),
    Final(FinalRecord),
}

impl TranscriptEntry {
    pub fn without_timestamps(&self) -> Self {
        match self {
            TranscriptEntry::Header(h) => TranscriptEntry::Header(TranscriptHeader { started_at: None, ..h.clone() }),
            TranscriptEntry::Step(s) => TranscriptEntry::Step(s.without_timestamps()),
            TranscriptEntry::Answers(a) => TranscriptEntry::Answers(AnswerRecord { at: None, ..a.clone() }),
            TranscriptEntry::Control(c) => TranscriptEntry::Control(ControlRecord { at: None, ..c.clone() }),
            TranscriptEntry::Final(f) => TranscriptEntry::Final(FinalRecord { at: None, ..f.clone() }),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("transcript entries serialize")
    }
}

/// A header, then step/answer/control records in the order they happened,
/// then (once finished) a final record.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTranscript {
    entries: Vec<TranscriptEntry>,
}

impl SessionTranscript {
    pub fn new(header: TranscriptHeader) -> Self {
        Self { entries: vec![TranscriptEntry::Header(header)] }
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Result<Self, TranscriptError> {
        let transcript = Self { entries };
        transcript.check()?;
        Ok(transcript)
    }

    fn check(&self) -> Result<(), TranscriptError> {
        if !matches!(self.entries.first(), Some(TranscriptEntry::Header(_))) {
            return Err(TranscriptError::MissingHeader);
        }
        let mut previous = 0;
        for step in self.steps() {
            if step.step_index != previous + 1 {
                return Err(TranscriptError::StepGap { previous, found: step.step_index });
            }
            previous = step.step_index;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn header(&self) -> &TranscriptHeader {
        match &self.entries[0] {
            TranscriptEntry::Header(h) => h,
            _ => unreachable!("checked on construction"),
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.entries.iter().filter_map(|e| match e {
            TranscriptEntry::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn final_record(&self) -> Option<&FinalRecord> {
        self.entries.iter().rev().find_map(|e| match e {
            TranscriptEntry::Final(f) => Some(f),
            _ => None,
        })
    }

    pub fn final_status(&self) -> Option<TaskStatus> {
        self.final_record().map(|f| f.status)
    }

    pub fn push(&mut self, entry: TranscriptEntry) {
        self.entries.push(entry);
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    /// JSONL with every timestamp removed, for determinism comparisons.
    pub fn normalized_jsonl(&self) -> String {
        self.entries.iter().map(|e| e.without_timestamps().to_line() + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| TranscriptError::Malformed { line: i + 1, message: e.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_entries(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TranscriptError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// In-memory transcript mirrored to an append-only JSONL file, one line
/// written per entry as it happens.
#[derive(Debug)]
pub struct TranscriptLog {
    transcript: SessionTranscript,
    file: Option<File>,
    path: Option<PathBuf>,
}

impl TranscriptLog {
    pub fn create(header: TranscriptHeader, path: Option<&Path>) -> Result<Self, TranscriptError> {
        let file = match path {
            Some(p) => Some(OpenOptions::new().create(true).write(true).truncate(true).open(p)?),
            None => None,
        };
        let mut log = Self { transcript: SessionTranscript { entries: Vec::new() }, file, path: path.map(Path::to_path_buf) };
        log.append(TranscriptEntry::Header(header))?;
        Ok(log)
    }

    pub fn append(&mut self, entry: TranscriptEntry) -> Result<(), TranscriptError> {
        if let Some(file) = &mut self.file {
            file.write_all((entry.to_line() + "\n").as_bytes())?;
            file.flush()?;
        }
        self.transcript.entries.push(entry);
        Ok(())
    }

    pub fn transcript(&self) -> &SessionTranscript {
        &self.transcript
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn into_transcript(self) -> SessionTranscript {
        self.transcript
    }
}
