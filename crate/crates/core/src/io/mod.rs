//! Record ingestion, run manifests and atomic persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CmcError, Result};
use crate::task::{ElicitationRecord, TaskVocab};

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// One JSONL line as written by elicitation harnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub question: String,
    pub model_answer: String,
    pub gold_answer: String,
    pub correct: bool,
    pub confidence: u8,
    #[serde(flatten)]
    pub metadata: Map<String, Value>,
}

impl RawRecord {
    pub fn from_toy(r: &ElicitationRecord, vocab: &TaskVocab) -> Self {
        Self {
            question: vocab.render(&r.question),
            model_answer: vocab.render(&r.model_answer),
            gold_answer: vocab.render(&r.gold_answer),
            correct: r.correct,
            confidence: r.confidence,
            metadata: Map::new(),
        }
    }

    /// Parse token names against the toy vocabulary.
    pub fn to_toy(&self, vocab: &TaskVocab) -> Result<ElicitationRecord> {
        Ok(ElicitationRecord {
            question: vocab.parse_tokens(&self.question)?,
            model_answer: vocab.parse_tokens(&self.model_answer)?,
            gold_answer: vocab.parse_tokens(&self.gold_answer)?,
            correct: self.correct,
            confidence: self.confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestedDataset {
    pub source: String,
    pub records: Vec<RawRecord>,
    /// 1-based line number of each valid record.
    pub record_lines: Vec<usize>,
    pub errors: Vec<LineError>,
}

impl IngestedDataset {
    pub fn total(&self) -> usize {
        self.records.len() + self.errors.len()
    }
}

fn parse_line(text: &str) -> std::result::Result<RawRecord, String> {
    let r: RawRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if r.confidence > 99 {
        return Err(format!("confidence {} outside 0..=99", r.confidence));
    }
    Ok(r)
}

/// Parse JSONL text. Bad lines are collected; more than half bad aborts.
pub fn ingest_str(source: &str, text: &str) -> Result<IngestedDataset> {
    let mut ds = IngestedDataset {
        source: source.to_string(),
        ..Default::default()
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // serde rejects u8 overflow, so range-check via a loose parse first
        let parsed = match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(o)) => match o.get("confidence").and_then(Value::as_u64) {
                Some(c) if c > 99 => Err(format!("confidence {c} outside 0..=99")),
                _ => parse_line(line),
            },
            Ok(_) => Err("expected a JSON object".to_string()),
            Err(e) => Err(e.to_string()),
        };
        match parsed {
            Ok(r) => {
                ds.records.push(r);
                ds.record_lines.push(i + 1);
            }
            Err(message) => ds.errors.push(LineError { line: i + 1, message }),
        }
    }
    if ds.errors.len() * 2 > ds.total() {
        let first = &ds.errors[0];
        return Err(CmcError::Format(format!(
            "{}: {} of {} lines malformed (first at line {}: {})",
            source,
            ds.errors.len(),
            ds.total(),
            first.line,
            first.message
        )));
    }
    Ok(ds)
}

pub fn ingest_records(path: &Path) -> Result<IngestedDataset> {
    let text = fs::read_to_string(path)?;
    ingest_str(&path.display().to_string(), &text)
}

pub fn records_to_jsonl(records: &[RawRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub model_checksum: Option<String>,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Fails with the missing path when a required artifact is absent.
pub fn require(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CmcError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing artifact {}", path.display()),
        )))
    }
}
