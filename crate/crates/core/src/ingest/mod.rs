//! Tutorial ingestion: transcripts and benchmark files to canonical
//! action sequences.

mod clean;
mod extract;
mod pose;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skill_kb::SkillId;

pub use clean::{clean_transcript, parse_verb_list, split_steps, CleanConfig};
pub use extract::{
    extract_actions, extract_actions_with, llm_extract, render_extraction_prompt, ExtractionReport,
    ExtractorBackend, IngestOptions, LlmExtraction, LlmExtractor, Proposal, RuleBased, Substitution,
    Unmapped, DEFAULT_LINE_TOLERANCE, EXTRACTION_PROMPT,
};
pub use pose::{
    check_zero_pose_binding, group_by_file, load_pose_csv, pose_corpus, read_pose_csv, write_pose_csv,
    PoseRecord, ZeroPoseCheck, POSE_CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("transcript is empty after cleaning")]
    EmptyAfterClean,
    #[error("no delimiter found in a multi-word verb list")]
    NoDelimiterFound,
    #[error("extractor backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no step mapped to a library skill ({} unmapped)", unmapped.len())]
    EmptySequence { unmapped: Vec<Unmapped> },
    #[error("malformed extractor response: {0}")]
    MalformedResponse(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("action list is empty")]
    EmptyActionList,
    #[error("pose CSV header mismatch: {0}")]
    SchemaMismatch(String),
    #[error("pose CSV line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("invalid action sequence: {0}")]
    InvalidSequence(String),
    #[error("corpus line {line}: {source}")]
    CorpusLine { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::llm::LlmError> for IngestError {
    fn from(e: crate::llm::LlmError) -> Self {
        match e {
            crate::llm::LlmError::Unavailable(m) => IngestError::BackendUnavailable(m),
            crate::llm::LlmError::Transport(m) => IngestError::Transport(m),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    VideoCaption,
    Article,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub source_id: String,
    pub task_label: String,
    pub text: String,
    pub origin: Origin,
}

impl Transcript {
    pub fn load(path: impl AsRef<Path>, task_label: &str, origin: Origin) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let source_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(Transcript { source_id, task_label: task_label.into(), text, origin })
    }
}

/// Ordered canonical skill tokens extracted from one source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSequence {
    pub tokens: Vec<SkillId>,
    #[serde(default)]
    pub raw_verbs: Vec<String>,
    #[serde(default)]
    pub source_id: String,
    #[serde(default)]
    pub task_label: String,
}

impl ActionSequence {
    pub fn new(tokens: Vec<SkillId>, raw_verbs: Vec<String>, source_id: &str, task_label: &str) -> Result<Self, IngestError> {
        ActionSequence { tokens, raw_verbs, source_id: source_id.into(), task_label: task_label.into() }.checked()
    }

    /// Sequence whose raw verbs are the tokens themselves.
    pub fn from_tokens<S: Into<SkillId>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let tokens: Vec<SkillId> = tokens.into_iter().map(Into::into).collect();
        let raw_verbs = tokens.iter().map(|t| t.to_string()).collect();
        ActionSequence { tokens, raw_verbs, source_id: String::new(), task_label: String::new() }
    }

    fn checked(mut self) -> Result<Self, IngestError> {
        if self.tokens.is_empty() {
            return Err(IngestError::InvalidSequence("tokens must be non-empty".into()));
        }
        if self.raw_verbs.is_empty() {
            self.raw_verbs = self.tokens.iter().map(|t| t.to_string()).collect();
        }
        if self.raw_verbs.len() != self.tokens.len() {
            return Err(IngestError::InvalidSequence(format!(
                "{} tokens but {} raw verbs",
                self.tokens.len(),
                self.raw_verbs.len()
            )));
        }
        Ok(self)
    }
}

/// Training or evaluation corpus. The vocabulary is the sorted union of
/// all tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    sequences: Vec<ActionSequence>,
    vocabulary: BTreeSet<SkillId>,
}

impl Corpus {
    pub fn new(sequences: Vec<ActionSequence>) -> Self {
        let vocabulary = sequences.iter().flat_map(|s| s.tokens.iter().cloned()).collect();
        Corpus { sequences, vocabulary }
    }

    /// Convenience constructor from plain token lists.
    pub fn from_token_lists<S: AsRef<str>>(lists: &[Vec<S>]) -> Self {
        Corpus::new(
            lists
                .iter()
                .filter(|l| !l.is_empty())
                .map(|l| ActionSequence::from_tokens(l.iter().map(|s| SkillId::new(s.as_ref()))))
                .collect(),
        )
    }

    pub fn sequences(&self) -> &[ActionSequence] {
        &self.sequences
    }

    pub fn vocabulary(&self) -> &BTreeSet<SkillId> {
        &self.vocabulary
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    /// Reads JSON lines, one [`ActionSequence`] per non-blank line.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, IngestError> {
        let mut seqs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let seq: ActionSequence =
                serde_json::from_str(&line).map_err(|source| IngestError::CorpusLine { line: i + 1, source })?;
            seqs.push(seq.checked()?);
        }
        Ok(Corpus::new(seqs))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), IngestError> {
        for s in &self.sequences {
            let line = serde_json::to_string(s).expect("sequence serializes");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}
