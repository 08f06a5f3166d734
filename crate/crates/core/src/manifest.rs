//! Line-delimited JSON manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, TimedToken, TimedTranscript};

#[derive(Error, Debug)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    NotFound(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ManifestError::NotFound(path.to_path_buf()),
        _ => ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            source: e,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), ManifestError> {
    let io = |e| ManifestError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| ManifestError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A single-speaker utterance: `{id, speaker, tokens: [{text, start}]}` plus
/// the audio path when it is used as mixing material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub tokens: Vec<TimedToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav_path: Option<PathBuf>,
}

impl UtteranceRecord {
    pub fn transcript(&self) -> Result<TimedTranscript, CodecError> {
        TimedTranscript::new(self.speaker.clone(), self.tokens.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![UtteranceRecord {
            id: "u1".into(),
            speaker: "s".into(),
            tokens: vec![TimedToken::new("a", 0.0).unwrap()],
            wav_path: None,
        }];
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<UtteranceRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, recs);
        let missing = read_jsonl::<UtteranceRecord>(&dir.path().join("nope.jsonl"));
        assert!(matches!(missing, Err(ManifestError::NotFound(_))));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"id\":\"u\",\"speaker\":\"s\",\"tokens\":[]}\n\nnot json\n").unwrap();
        match read_jsonl::<UtteranceRecord>(&path) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
