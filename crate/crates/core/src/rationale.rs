//! Samples, labels, and the structured-rationale parser.
//!
//! A completion is expected to look like
//!
//! ```text
//! [GROUNDING] <image and text evidence>
//! [INFERENCE] <how the two interact>
//! [VERDICT] HARMFUL | BENIGN ...
//! ```
//!
//! Parsing is total: any string yields a [`ParsedCompletion`], malformed
//! input simply produces [`Verdict::Invalid`].

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const GROUNDING_TAG: &str = "[GROUNDING]";
pub const INFERENCE_TAG: &str = "[INFERENCE]";
pub const VERDICT_TAG: &str = "[VERDICT]";

/// Gold binary label. Serialized as the integers `0` and `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign = 0,
    Harmful = 1,
}

impl Label {
    pub fn from_int(v: i64) -> Option<Self> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Harmful),
            _ => None,
        }
    }

    pub fn as_int(self) -> u8 {
        self as u8
    }

    pub fn opposite(self) -> Self {
        match self {
            Label::Benign => Label::Harmful,
            Label::Harmful => Label::Benign,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_int())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_int(v).ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}")))
    }
}

/// Label extracted from a completion. `Invalid` is the "no parseable outcome" case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Benign,
    Harmful,
    Invalid,
}

impl Verdict {
    pub fn label(self) -> Option<Label> {
        match self {
            Verdict::Benign => Some(Label::Benign),
            Verdict::Harmful => Some(Label::Harmful),
            Verdict::Invalid => None,
        }
    }

    pub fn is_valid(self) -> bool {
        self != Verdict::Invalid
    }

    /// Only `Benign`/`Harmful` can ever equal a gold label.
    pub fn matches(self, gold: Label) -> bool {
        self.label() == Some(gold)
    }
}

impl From<Label> for Verdict {
    fn from(l: Label) -> Self {
        match l {
            Label::Benign => Verdict::Benign,
            Label::Harmful => Verdict::Harmful,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HarmClass {
    HateSpeech,
    PhysicalHarm,
    Porn,
    Fraud,
}

impl HarmClass {
    pub const ALL: [HarmClass; 4] = [HarmClass::HateSpeech, HarmClass::PhysicalHarm, HarmClass::Porn, HarmClass::Fraud];
}

/// Source benchmark of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetName {
    Muphi,
    Fhm,
    HarmC,
    HarmP,
    Other(String),
}

impl DatasetName {
    pub fn as_str(&self) -> &str {
        match self {
            DatasetName::Muphi => "MuPHI",
            DatasetName::Fhm => "FHM",
            DatasetName::HarmC => "Harm-C",
            DatasetName::HarmP => "Harm-P",
            DatasetName::Other(s) => s,
        }
    }
}

impl From<&str> for DatasetName {
    fn from(s: &str) -> Self {
        match s {
            "MuPHI" => DatasetName::Muphi,
            "FHM" => DatasetName::Fhm,
            "Harm-C" | "HarmC" => DatasetName::HarmC,
            "Harm-P" | "HarmP" => DatasetName::HarmP,
            other => DatasetName::Other(other.to_string()),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for DatasetName {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DatasetName {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(DatasetName::from(s.as_str()))
    }
}

/// One image-text instance. At desk scale the image is represented by
/// `feature_id`, an index into the policy's feature tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub embedded_text: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harm_class: Option<HarmClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harm_subclass: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_rationale: Option<String>,
    pub dataset: DatasetName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_pair_id: Option<String>,
    #[serde(default)]
    pub feature_id: usize,
}

impl Sample {
    pub fn new(id: impl Into<String>, label: Label, feature_id: usize) -> Self {
        Sample {
            id: id.into(),
            embedded_text: String::new(),
            label,
            harm_class: None,
            harm_subclass: None,
            gold_rationale: None,
            dataset: DatasetName::Other("synthetic".into()),
            counterfactual_pair_id: None,
            feature_id,
        }
    }
}

/// A completion decomposed into its tagged sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParsedCompletion {
    pub raw: String,
    pub grounding_count: usize,
    pub inference_count: usize,
    pub verdict_count: usize,
    pub grounding_text: Option<String>,
    pub inference_text: Option<String>,
    pub verdict_text: Option<String>,
    pub verdict: Verdict,
    pub word_count: usize,
    pub conflicting_verdicts: bool,
}

impl ParsedCompletion {
    /// Exactly one label was asserted and it parsed.
    pub fn has_single_valid_label(&self) -> bool {
        self.verdict.is_valid() && !self.conflicting_verdicts
    }

    /// Text after `[INFERENCE]` and before `[VERDICT]`; the whole completion
    /// when either tag is missing or they are out of order.
    pub fn rationale_body(&self) -> &str {
        let tags = find_tags(&self.raw);
        let inference = tags.iter().find(|t| t.kind == TagKind::Inference);
        let Some(inference) = inference else {
            return &self.raw;
        };
        match tags.iter().find(|t| t.kind == TagKind::Verdict && t.start >= inference.end) {
            Some(verdict) => &self.raw[inference.end..verdict.start],
            None => &self.raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Grounding,
    Inference,
    Verdict,
}

#[derive(Debug, Clone, Copy)]
struct TagSpan {
    kind: TagKind,
    start: usize,
    end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Tag occurrences in order. A tag glued to a word character on either side
/// (`X[GROUNDING]Y`) is plain text, not a tag.
fn find_tags(text: &str) -> Vec<TagSpan> {
    let mut spans = Vec::new();
    for (kind, tag) in
        [(TagKind::Grounding, GROUNDING_TAG), (TagKind::Inference, INFERENCE_TAG), (TagKind::Verdict, VERDICT_TAG)]
    {
        for (start, _) in text.match_indices(tag) {
            let end = start + tag.len();
            let before_ok = text[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
            let after_ok = text[end..].chars().next().is_none_or(|c| !is_word_char(c));
            if before_ok && after_ok {
                spans.push(TagSpan { kind, start, end });
            }
        }
    }
    spans.sort_by_key(|s| s.start);
    spans
}

fn section_body<'a>(text: &'a str, tags: &[TagSpan], idx: usize) -> &'a str {
    let end = tags.get(idx + 1).map_or(text.len(), |t| t.start);
    &text[tags[idx].end..end]
}

fn label_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\blabel\s*:\s*([01])\b").expect("valid regex"))
}

fn keyword_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(harmful|benign)\b").expect("valid regex"))
}

fn last_label_line(text: &str) -> Option<Verdict> {
    label_line_re().captures_iter(text).last().map(|c| match &c[1] {
        "1" => Verdict::Harmful,
        _ => Verdict::Benign,
    })
}

fn label_lines(text: &str) -> impl Iterator<Item = Verdict> + '_ {
    label_line_re().captures_iter(text).map(|c| match &c[1] {
        "1" => Verdict::Harmful,
        _ => Verdict::Benign,
    })
}

/// Label asserted by a verdict section body.
///
/// An explicit `LABEL: 0|1` form outranks HARMFUL/BENIGN keyword mentions;
/// within a tier the last occurrence wins. Matching is case-insensitive.
pub fn extract_verdict(verdict_text: &str) -> Verdict {
    if let Some(v) = last_label_line(verdict_text) {
        return v;
    }
    match keyword_re().captures_iter(verdict_text).last() {
        Some(c) if c[1].eq_ignore_ascii_case("harmful") => Verdict::Harmful,
        Some(_) => Verdict::Benign,
        None => Verdict::Invalid,
    }
}

/// Number of maximal whitespace-delimited tokens.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn parse_completion(text: &str) -> ParsedCompletion {
    let tags = find_tags(text);
    let count = |k: TagKind| tags.iter().filter(|t| t.kind == k).count();
    let first_body =
        |k: TagKind| tags.iter().position(|t| t.kind == k).map(|i| section_body(text, &tags, i).trim().to_string());

    let last_verdict_idx = tags.iter().rposition(|t| t.kind == TagKind::Verdict);
    let verdict_text = last_verdict_idx.map(|i| section_body(text, &tags, i).trim().to_string());
    let verdict = match &verdict_text {
        Some(body) => extract_verdict(body),
        None => last_label_line(text).unwrap_or(Verdict::Invalid),
    };

    // Every verdict section is one assertion; LABEL lines outside verdict
    // sections are assertions too.
    let mut asserted = Vec::new();
    let mut outside = String::new();
    let mut cursor = 0;
    for (i, tag) in tags.iter().enumerate() {
        if tag.kind == TagKind::Verdict {
            outside.push_str(&text[cursor..tag.start]);
            outside.push('\n');
            let body = section_body(text, &tags, i);
            asserted.push(extract_verdict(body));
            cursor = tag.end + body.len();
        }
    }
    outside.push_str(&text[cursor..]);
    asserted.extend(label_lines(&outside));
    let conflicting_verdicts = asserted.contains(&Verdict::Harmful) && asserted.contains(&Verdict::Benign);

    ParsedCompletion {
        raw: text.to_string(),
        grounding_count: count(TagKind::Grounding),
        inference_count: count(TagKind::Inference),
        verdict_count: count(TagKind::Verdict),
        grounding_text: first_body(TagKind::Grounding),
        inference_text: first_body(TagKind::Inference),
        verdict_text,
        verdict,
        word_count: word_count(text),
        conflicting_verdicts,
    }
}
