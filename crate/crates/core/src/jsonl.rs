//! One-JSON-object-per-line helpers shared by the log and corpus files.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_lines<T: Serialize, W: Write>(out: W, items: &[T]) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Replaces `path` atomically with `items`.
pub fn write_file<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    write_lines(File::create(&tmp)?, items)?;
    std::fs::rename(tmp, path)
}

pub fn append<T: Serialize>(path: &Path, item: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(item)?;
    line.push(b'\n');
    OpenOptions::new().create(true).append(true).open(path)?.write_all(&line)
}

pub fn read_lines<T: DeserializeOwned, R: BufRead>(input: R, label: &str) -> Result<Vec<T>, JsonlError> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: label.to_owned(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(items)
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    read_lines(BufReader::new(File::open(path)?), &path.display().to_string())
}
