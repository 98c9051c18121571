//! Phrase dictionaries behind the evidence indicators and consistency counts.
//!
//! Matching is whole-word and case-insensitive: text and entries are both
//! lowercased and split into maximal runs of word characters, and an entry
//! matches when its words appear consecutively. `"image"` therefore does not
//! match inside `"pilgrimage"`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of tokens before a harm phrase that are searched for a negation marker.
pub const NEGATION_WINDOW: usize = 3;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon-v1.toml");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("failed to read lexicon {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed lexicon file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("lexicon field `{field}`: {message}")]
    Schema { field: &'static str, message: String },
}

/// On-disk shape of a lexicon: a flat table of string lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconFile {
    pub visual_terms: Vec<String>,
    pub textual_terms: Vec<String>,
    pub bridge_terms: Vec<String>,
    pub generic_patterns: Vec<String>,
    pub harm_phrases: Vec<String>,
    pub benign_phrases: Vec<String>,
    pub negation_markers: Vec<String>,
}

/// Lowercased word tokens of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn occurrences<'a>(tokens: &'a [String], phrase: &'a [String]) -> impl Iterator<Item = usize> + 'a {
    let n = phrase.len();
    (0..(tokens.len() + 1).saturating_sub(n)).filter(move |&i| tokens[i..i + n] == *phrase)
}

/// A set of terms, each pre-split into its word sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermSet {
    entries: BTreeSet<String>,
    compiled: Vec<Vec<String>>,
}

impl TermSet {
    fn build(field: &'static str, raw: &[String]) -> Result<Self, LexiconError> {
        if raw.is_empty() {
            return Err(LexiconError::Schema { field, message: "must not be empty".into() });
        }
        let mut entries = BTreeSet::new();
        let mut compiled = Vec::new();
        for e in raw {
            if *e != e.to_lowercase() {
                return Err(LexiconError::Schema { field, message: format!("entry {e:?} is not lowercase") });
            }
            let toks = tokenize(e);
            if toks.is_empty() {
                return Err(LexiconError::Schema { field, message: format!("entry {e:?} contains no words") });
            }
            if entries.insert(e.clone()) {
                compiled.push(toks);
            }
        }
        Ok(TermSet { entries, compiled })
    }

    pub fn entries(&self) -> &BTreeSet<String> {
        &self.entries
    }

    pub fn contains(&self, entry: &str) -> bool {
        self.entries.contains(entry)
    }

    pub fn matches_tokens(&self, tokens: &[String]) -> bool {
        self.compiled.iter().any(|p| occurrences(tokens, p).next().is_some())
    }

    fn count_in(&self, tokens: &[String]) -> usize {
        self.compiled.iter().map(|p| occurrences(tokens, p).count()).sum()
    }
}

/// 1 when any term of the set occurs in `text` as whole words, else 0.
pub fn indicator(text: &str, terms: &TermSet) -> u8 {
    u8::from(terms.matches_tokens(&tokenize(text)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhraseCounts {
    pub harm: usize,
    pub benign: usize,
    pub negated_harm: usize,
}

/// Validated, immutable lexicon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub visual_terms: TermSet,
    pub textual_terms: TermSet,
    pub bridge_terms: TermSet,
    pub generic_patterns: TermSet,
    pub harm_phrases: TermSet,
    pub benign_phrases: TermSet,
    pub negation_markers: TermSet,
}

impl Lexicon {
    pub fn from_file_contents(file: &LexiconFile) -> Result<Self, LexiconError> {
        let lex = Lexicon {
            visual_terms: TermSet::build("visual_terms", &file.visual_terms)?,
            textual_terms: TermSet::build("textual_terms", &file.textual_terms)?,
            bridge_terms: TermSet::build("bridge_terms", &file.bridge_terms)?,
            generic_patterns: TermSet::build("generic_patterns", &file.generic_patterns)?,
            harm_phrases: TermSet::build("harm_phrases", &file.harm_phrases)?,
            benign_phrases: TermSet::build("benign_phrases", &file.benign_phrases)?,
            negation_markers: TermSet::build("negation_markers", &file.negation_markers)?,
        };
        if let Some(shared) = lex.harm_phrases.compiled.iter().find(|p| lex.benign_phrases.compiled.contains(p)) {
            return Err(LexiconError::Schema {
                field: "benign_phrases",
                message: format!("phrase {:?} also appears in harm_phrases", shared.join(" ")),
            });
        }
        Ok(lex)
    }

    pub fn parse(contents: &str) -> Result<Self, LexiconError> {
        let file: LexiconFile = toml::from_str(contents)?;
        Self::from_file_contents(&file)
    }

    /// The versioned lexicon shipped with the crate.
    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn to_file_contents(&self) -> LexiconFile {
        let list = |t: &TermSet| t.entries.iter().cloned().collect();
        LexiconFile {
            visual_terms: list(&self.visual_terms),
            textual_terms: list(&self.textual_terms),
            bridge_terms: list(&self.bridge_terms),
            generic_patterns: list(&self.generic_patterns),
            harm_phrases: list(&self.harm_phrases),
            benign_phrases: list(&self.benign_phrases),
            negation_markers: list(&self.negation_markers),
        }
    }

    /// Harm, benign and negated-harm phrase occurrences in a rationale body.
    ///
    /// A harm phrase with a negation marker among the [`NEGATION_WINDOW`]
    /// tokens before it counts as negated instead of harmful.
    pub fn phrase_counts(&self, rationale_body: &str) -> PhraseCounts {
        let tokens = tokenize(rationale_body);
        let mut counts = PhraseCounts { benign: self.benign_phrases.count_in(&tokens), ..PhraseCounts::default() };
        for phrase in &self.harm_phrases.compiled {
            for at in occurrences(&tokens, phrase) {
                let window = &tokens[at.saturating_sub(NEGATION_WINDOW)..at];
                let negated = self.negation_markers.compiled.iter().any(|m| occurrences(window, m).next().is_some());
                if negated {
                    counts.negated_harm += 1;
                } else {
                    counts.harm += 1;
                }
            }
        }
        counts
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon, LexiconError> {
    let path = path.as_ref();
    let contents = fs::read_to_string(path).map_err(|source| LexiconError::Io { path: path.to_path_buf(), source })?;
    Lexicon::parse(&contents)
}
