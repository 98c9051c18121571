//! File formats, configuration and run orchestration.

mod config;
mod dataset;
mod predictions;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use config::{PolicyConfig, TrainConfig};
pub use dataset::{class_histogram, load_dataset, parse_dataset, synthetic_corpus, write_dataset, UNSPECIFIED_DATASET};
pub use predictions::{load_predictions, PredictionRecord};

use crate::lexicon::LexiconError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, field `{field}`: {message}")]
    Schema { line: usize, field: String, message: String },
    #[error("{path}: line {line}, field `{field}`: {message}")]
    SchemaAt { path: PathBuf, line: usize, field: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error("serialization: {0}")]
    Serialize(String),
}

impl DataError {
    pub(crate) fn schema(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        DataError::Schema { line, field: field.into(), message: message.into() }
    }

    pub(crate) fn with_path(self, path: &Path) -> Self {
        match self {
            DataError::Schema { line, field, message } => {
                DataError::SchemaAt { path: path.to_path_buf(), line, field, message }
            }
            other => other,
        }
    }

    /// Line and field of a schema error.
    pub fn location(&self) -> Option<(usize, &str)> {
        match self {
            DataError::Schema { line, field, .. } | DataError::SchemaAt { line, field, .. } => Some((*line, field)),
            _ => None,
        }
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, DataError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| DataError::Serialize(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), DataError> {
    let path = path.as_ref();
    write_atomic(path, to_jsonl(records)?.as_bytes())
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| DataError::SchemaAt {
            path: path.to_path_buf(),
            line: i + 1,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// A run directory: config snapshot, step reports and checkpoints.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.toml";
    pub const STEPS: &'static str = "steps.jsonl";
    pub const CHECKPOINT: &'static str = "final.ckpt";

    /// Creates `root` and writes the absolutized config snapshot into it.
    pub fn create(root: impl Into<PathBuf>, config: &TrainConfig) -> Result<Self, DataError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| DataError::Io { path: root.clone(), source })?;
        let dir = RunDir { root };
        let snapshot = config.absolutized().to_toml()?;
        let p = dir.path(Self::CONFIG);
        write_atomic(&p, snapshot.as_bytes()).map_err(|source| DataError::Io { path: p, source })?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}
