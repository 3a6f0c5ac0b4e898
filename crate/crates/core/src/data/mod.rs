//! Synthetic motion corpus, the on-disk video tensor format, and the
//! temporal/spatial sampling pipeline.

pub mod sampling;
pub mod synth;
pub mod vtr;

use crate::tensor::Tensor;
use std::io;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("data io: {0}")]
    Io(#[from] io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("invalid: {0}")]
    Invalid(String),
}

pub(crate) fn format_err(msg: impl Into<String>) -> DataError {
    DataError::Format(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// One raw video: frames (T, H, W, 3) in [0,1] plus its class.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub id: String,
    pub frames: Tensor<f32>,
    pub label: usize,
}

impl VideoSample {
    pub fn validate(&self) -> Result<(), DataError> {
        let s = self.frames.shape();
        if s.len() != 4 || s[3] != 3 || s[0] == 0 {
            return Err(invalid(format!("frames shape {s:?}, want (T>=1, H, W, 3)")));
        }
        if !self.frames.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(invalid("frame values outside [0,1]"));
        }
        Ok(())
    }
}

/// Row of the corpus index file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Parses the tab-separated `id path label split` index format.
pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>, DataError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(format_err(format!("index line {}: expected 4 fields", lineno + 1)));
        }
        let label = parts[2]
            .parse()
            .map_err(|_| format_err(format!("index line {}: bad label {:?}", lineno + 1, parts[2])))?;
        let split = match parts[3] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(format_err(format!("index line {}: bad split {other:?}", lineno + 1))),
        };
        out.push(IndexEntry {
            id: parts[0].to_string(),
            path: parts[1].to_string(),
            label,
            split,
        });
    }
    if out.is_empty() {
        return Err(format_err("index file has no entries"));
    }
    Ok(out)
}

pub fn load_index(dir: &std::path::Path) -> Result<Vec<IndexEntry>, DataError> {
    let text = std::fs::read_to_string(dir.join("index.tsv"))?;
    parse_index(&text)
}
