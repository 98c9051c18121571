//! Line-delimited JSON sample files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use super::DataError;
use crate::rationale::{DatasetName, HarmClass, Label, Sample};

const KNOWN_FIELDS: [&str; 9] = [
    "id",
    "embedded_text",
    "label",
    "harm_class",
    "harm_subclass",
    "gold_rationale",
    "counterfactual_pair_id",
    "feature_id",
    "dataset",
];

/// Dataset assigned to records without a `dataset` field.
pub const UNSPECIFIED_DATASET: &str = "unspecified";

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_dataset(&text).map_err(|e| e.with_path(path))
}

/// Parses and validates dataset records. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn parse_dataset(text: &str) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    let mut lines_of: HashMap<String, usize> = HashMap::new();
    let mut line_numbers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let sample = parse_record(raw, line)?;
        if let Some(first) = lines_of.get(&sample.id) {
            return Err(DataError::schema(
                line,
                "id",
                format!("duplicate id {:?} (first seen on line {first})", sample.id),
            ));
        }
        lines_of.insert(sample.id.clone(), line);
        line_numbers.push(line);
        samples.push(sample);
    }
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for (s, line) in samples.iter().zip(&line_numbers) {
        if let Some(other) = &s.counterfactual_pair_id {
            let partner = by_id.get(other.as_str()).ok_or_else(|| {
                DataError::schema(*line, "counterfactual_pair_id", format!("references unknown sample {other:?}"))
            })?;
            if partner.label == s.label {
                return Err(DataError::schema(
                    *line,
                    "counterfactual_pair_id",
                    format!("partner {other:?} has the same label"),
                ));
            }
        }
    }
    Ok(samples)
}

fn parse_record(raw: &str, line: usize) -> Result<Sample, DataError> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| DataError::schema(line, "<record>", format!("invalid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(DataError::schema(line, "<record>", "expected a JSON object"));
    };
    if let Some(unknown) = map.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
        return Err(DataError::schema(line, unknown, "unknown field"));
    }

    let id = required_str(&map, line, "id")?;
    if id.is_empty() {
        return Err(DataError::schema(line, "id", "must be non-empty"));
    }
    let embedded_text = required_str(&map, line, "embedded_text")?;
    let label = match map.get("label") {
        None => return Err(DataError::schema(line, "label", "missing")),
        Some(v) => v
            .as_u64()
            .and_then(|n| Label::from_int(n as i64))
            .ok_or_else(|| DataError::schema(line, "label", format!("expected 0 or 1, got {v}")))?,
    };
    let harm_class = match optional(&map, "harm_class") {
        None => None,
        Some(v) => Some(
            serde_json::from_value::<HarmClass>(v.clone())
                .map_err(|_| DataError::schema(line, "harm_class", format!("unknown harm class {v}")))?,
        ),
    };
    let dataset = match optional(&map, "dataset") {
        None => DatasetName::Other(UNSPECIFIED_DATASET.into()),
        Some(Value::String(s)) => DatasetName::from(s.as_str()),
        Some(v) => return Err(DataError::schema(line, "dataset", format!("expected a string, got {v}"))),
    };
    let feature_id = match optional(&map, "feature_id") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| DataError::schema(line, "feature_id", format!("expected a nonnegative integer, got {v}")))?
            as usize,
    };
    if dataset == DatasetName::Muphi && harm_class.is_some() != (label == Label::Harmful) {
        return Err(DataError::schema(line, "harm_class", "MuPHI records carry a harm class exactly when label is 1"));
    }
    Ok(Sample {
        id,
        embedded_text,
        label,
        harm_class,
        harm_subclass: optional_str(&map, line, "harm_subclass")?,
        gold_rationale: optional_str(&map, line, "gold_rationale")?,
        dataset,
        counterfactual_pair_id: optional_str(&map, line, "counterfactual_pair_id")?,
        feature_id,
    })
}

fn optional<'a>(map: &'a Map<String, Value>, field: &str) -> Option<&'a Value> {
    map.get(field).filter(|v| !v.is_null())
}

fn required_str(map: &Map<String, Value>, line: usize, field: &str) -> Result<String, DataError> {
    match map.get(field) {
        None => Err(DataError::schema(line, field, "missing")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(v) => Err(DataError::schema(line, field, format!("expected a string, got {v}"))),
    }
}

fn optional_str(map: &Map<String, Value>, line: usize, field: &str) -> Result<Option<String>, DataError> {
    match optional(map, field) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(v) => Err(DataError::schema(line, field, format!("expected a string, got {v}"))),
    }
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DataError> {
    super::write_jsonl(path, samples)
}

/// Counts of harmful samples per harm class plus the benign total.
pub fn class_histogram(samples: &[Sample]) -> (BTreeMap<HarmClass, usize>, usize) {
    let mut classes = BTreeMap::new();
    let mut benign = 0;
    for s in samples {
        match (s.label, s.harm_class) {
            (Label::Benign, _) => benign += 1,
            (Label::Harmful, Some(c)) => *classes.entry(c).or_insert(0) += 1,
            (Label::Harmful, None) => {}
        }
    }
    (classes, benign)
}

/// A separable corpus: `feature_id` equals the label and the embedded text
/// is one of two templates. Labels are balanced and shuffled.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Sample> {
    let mut labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::Harmful } else { Label::Benign }).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut s = Sample::new(format!("syn-{i:05}"), label, label.as_int() as usize);
            s.embedded_text = match label {
                Label::Harmful => "they deserve what is coming".into(),
                Label::Benign => "happy birthday to my best friend".into(),
            };
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"id":"a","embedded_text":"hello","label":0}
{"id":"b","embedded_text":"bye","label":1,"dataset":"FHM","feature_id":3}
"#;

    fn err_at(text: &str) -> (usize, String) {
        match parse_dataset(text).unwrap_err() {
            DataError::Schema { line, field, .. } => (line, field),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn two_line_fixture() {
        let s = parse_dataset(TWO).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].dataset, DatasetName::Fhm);
        assert_eq!(s[1].feature_id, 3);
        assert_eq!(s[0].dataset.as_str(), UNSPECIFIED_DATASET);
    }

    #[test]
    fn duplicate_id_reported_at_second_line() {
        let text = format!("{TWO}\n{}", r#"{"id":"a","embedded_text":"x","label":1}"#);
        assert_eq!(err_at(&text), (4, "id".into()));
    }

    #[test]
    fn schema_errors_name_line_and_field() {
        assert_eq!(err_at(r#"{"id":"a","embedded_text":"x","label":2}"#), (1, "label".into()));
        assert_eq!(err_at(r#"{"id":"a","label":1}"#), (1, "embedded_text".into()));
        assert_eq!(err_at(r#"{"id":"a","embedded_text":"x","label":"1"}"#), (1, "label".into()));
        assert_eq!(err_at(r#"{"id":"a","embedded_text":"x","label":1,"colour":3}"#), (1, "colour".into()));
        assert_eq!(err_at("\n\nnot json"), (3, "<record>".into()));
        assert_eq!(err_at(r#"{"id":"a","embedded_text":"x","label":1,"harm_class":"Spam"}"#), (1, "harm_class".into()));
        assert_eq!(err_at(r#"{"id":"a","embedded_text":"x","label":1,"feature_id":-1}"#), (1, "feature_id".into()));
    }

    #[test]
    fn muphi_harm_class_rule() {
        assert_eq!(err_at(r#"{"id":"a","embedded_text":"x","label":1,"dataset":"MuPHI"}"#), (1, "harm_class".into()));
        assert_eq!(
            err_at(r#"{"id":"a","embedded_text":"x","label":0,"dataset":"MuPHI","harm_class":"Fraud"}"#),
            (1, "harm_class".into())
        );
        let ok = parse_dataset(r#"{"id":"a","embedded_text":"x","label":1,"dataset":"MuPHI","harm_class":"Fraud"}"#);
        assert_eq!(ok.unwrap()[0].harm_class, Some(HarmClass::Fraud));
    }

    #[test]
    fn counterfactual_partner_checks() {
        let good = r#"{"id":"a","embedded_text":"x","label":1,"counterfactual_pair_id":"b"}
{"id":"b","embedded_text":"x","label":0,"counterfactual_pair_id":"a"}"#;
        assert_eq!(parse_dataset(good).unwrap().len(), 2);
        let same = good.replace(r#""label":0"#, r#""label":1"#);
        assert_eq!(err_at(&same), (1, "counterfactual_pair_id".into()));
        let dangling = r#"{"id":"a","embedded_text":"x","label":1,"counterfactual_pair_id":"zz"}"#;
        assert_eq!(err_at(dangling), (1, "counterfactual_pair_id".into()));
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut samples = synthetic_corpus(10, 3);
        samples[0].harm_subclass = Some("scam".into());
        write_dataset(&path, &samples).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), samples);
    }

    #[test]
    fn synthetic_corpus_is_balanced_and_separable() {
        let c = synthetic_corpus(201, 0);
        let harmful = c.iter().filter(|s| s.label == Label::Harmful).count();
        assert_eq!(harmful, 101);
        assert!(c.iter().all(|s| s.feature_id == s.label.as_int() as usize));
        assert_eq!(synthetic_corpus(201, 0), c);
    }
}
