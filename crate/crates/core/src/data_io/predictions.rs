//! Prediction files: one `{"id", "verdict"}` or `{"id", "completion"}` record per line.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, DataError};
use crate::rationale::{parse_completion, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    /// Raw completion; its parsed verdict is used when `verdict` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
}

impl PredictionRecord {
    pub fn resolved_verdict(&self) -> Option<Verdict> {
        self.verdict.or_else(|| self.completion.as_deref().map(|c| parse_completion(c).verdict))
    }
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<HashMap<String, Verdict>, DataError> {
    let path = path.as_ref();
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    let mut out = HashMap::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let at = |field: &str, message: String| DataError::SchemaAt {
            path: path.to_path_buf(),
            line: i + 1,
            field: field.into(),
            message,
        };
        let v = r.resolved_verdict().ok_or_else(|| at("verdict", "either verdict or completion is required".into()))?;
        if out.insert(r.id.clone(), v).is_some() {
            return Err(at("id", format!("duplicate id {:?}", r.id)));
        }
    }
    Ok(out)
}
