//! Line-delimited record files: chain records, prompt/SFT records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{parse_chain, render_chain, ReasoningChain};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io error on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line} of {path}: {message}")]
    BadLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid chain record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainSource {
    ExternalModel,
    SelfGenerated,
}

/// A retained chain bound to a sample. `round` is 0 for external-model chains
/// and the SARR round that produced it otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ChainRecordLine", into = "ChainRecordLine")]
pub struct ChainRecord {
    pub sample_id: String,
    pub chain: ReasoningChain,
    pub token_count: usize,
    pub source: ChainSource,
    pub round: usize,
}

impl ChainRecord {
    pub fn new(
        sample_id: impl Into<String>,
        chain: ReasoningChain,
        token_count: usize,
        source: ChainSource,
        round: usize,
    ) -> Result<Self, RecordError> {
        let record = Self {
            sample_id: sample_id.into(),
            chain,
            token_count,
            source,
            round,
        };
        record.check()?;
        Ok(record)
    }

    fn check(&self) -> Result<(), RecordError> {
        if self.token_count == 0 {
            return Err(RecordError::InvalidRecord(
                "token_count must be >= 1".into(),
            ));
        }
        if (self.round == 0) != (self.source == ChainSource::ExternalModel) {
            return Err(RecordError::InvalidRecord(format!(
                "round {} inconsistent with source {:?}",
                self.round, self.source
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ChainRecordLine {
    sample_id: String,
    chain: String,
    token_count: usize,
    source: ChainSource,
    round: usize,
}

impl TryFrom<ChainRecordLine> for ChainRecord {
    type Error = String;

    fn try_from(line: ChainRecordLine) -> Result<Self, Self::Error> {
        let chain = parse_chain(&line.chain).map_err(|e| e.to_string())?;
        ChainRecord::new(
            line.sample_id,
            chain,
            line.token_count,
            line.source,
            line.round,
        )
        .map_err(|e| e.to_string())
    }
}

impl From<ChainRecord> for ChainRecordLine {
    fn from(r: ChainRecord) -> Self {
        Self {
            sample_id: r.sample_id,
            chain: render_chain(&r.chain),
            token_count: r.token_count,
            source: r.source,
            round: r.round,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    Classification,
    Reasoning,
}

/// One supervised example as written for an external fine-tuning backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub sample_id: String,
    pub image_ref: String,
    pub domain: String,
    pub label: String,
    pub kind: PromptKind,
    pub prompt: String,
    pub target: String,
}

/// Writes one JSON object per line and returns the number of lines.
pub fn emit_records<T: Serialize>(records: &[T], path: &Path) -> Result<usize, RecordError> {
    let io = |source| RecordError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for record in records {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(records.len())
}

/// Reads a line-delimited file, failing on the first bad line.
pub fn load_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let (records, rejects) = load_lenient(path)?;
    match rejects.into_iter().next() {
        Some(r) => Err(RecordError::BadLine {
            path: path.to_path_buf(),
            line: r.line,
            message: r.reason,
        }),
        None => Ok(records),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineReject {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedChains {
    pub records: Vec<ChainRecord>,
    pub rejects: Vec<LineReject>,
}

fn load_lenient<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Vec<T>, Vec<LineReject>), RecordError> {
    let io = |source| RecordError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(e) => rejects.push(LineReject {
                line: i + 1,
                reason: e.to_string(),
            }),
        }
    }
    Ok((records, rejects))
}

/// Loads chain records; lines that fail to decode or whose chain text does
/// not parse are reported in `rejects` with their line number.
pub fn load_chains(path: &Path) -> Result<LoadedChains, RecordError> {
    let (records, rejects) = load_lenient(path)?;
    Ok(LoadedChains { records, rejects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(c: &str) -> ReasoningChain {
        ReasoningChain::new("s", "c", "r", "f", c).unwrap()
    }

    #[test]
    fn record_invariants() {
        assert!(ChainRecord::new("a", chain("x"), 0, ChainSource::ExternalModel, 0).is_err());
        assert!(ChainRecord::new("a", chain("x"), 3, ChainSource::ExternalModel, 1).is_err());
        assert!(ChainRecord::new("a", chain("x"), 3, ChainSource::SelfGenerated, 0).is_err());
        assert!(ChainRecord::new("a", chain("x"), 3, ChainSource::SelfGenerated, 2).is_ok());
    }

    #[test]
    fn emit_counts_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let recs = vec![
            PromptRecord {
                sample_id: "1".into(),
                image_ref: "i".into(),
                domain: "d".into(),
                label: "cat".into(),
                kind: PromptKind::Classification,
                prompt: "q".into(),
                target: "cat".into(),
            };
            2
        ];
        assert_eq!(emit_records(&recs, &path).unwrap(), 2);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
        let back: Vec<PromptRecord> = load_records(&path).unwrap();
        assert_eq!(back, recs);

        let empty: Vec<PromptRecord> = vec![];
        assert_eq!(emit_records(&empty, &path).unwrap(), 0);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn chains_with_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = ChainRecord::new("a", chain("cat"), 5, ChainSource::ExternalModel, 0).unwrap();
        emit_records(std::slice::from_ref(&good), &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(
            r#"{"sample_id":"b","chain":"<SUMMARY>s</SUMMARY>","token_count":2,"source":"external-model","round":0}"#,
        );
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        let loaded = load_chains(&path).unwrap();
        assert_eq!(loaded.records, vec![good]);
        assert_eq!(loaded.rejects.len(), 1);
        assert_eq!(loaded.rejects[0].line, 2);
        assert!(loaded.rejects[0].reason.contains("missing section CAPTION"));
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            load_chains(Path::new("/nonexistent/x.jsonl")),
            Err(RecordError::IoFailure { .. })
        ));
    }
}
