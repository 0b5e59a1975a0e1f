//! Source preprocessing: raw C/C++ (or Java) text to fixed-length token ids.
//!
//! The pipeline is [`strip_comments`] → [`normalize`] → [`lex`] →
//! [`Vocabulary::encode`]. [`extract_slices`] is an alternative unit of
//! analysis that cuts line windows around vulnerability-prone constructs.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod api;
mod lex;
mod normalize;
mod slices;
mod strip;
mod vocab;

pub use api::{ApiList, DEFAULT_API_FUNCTIONS};
pub use lex::{lex, lex_with, Language, LexToken, TokenKind};
pub use normalize::{normalize, normalize_with};
pub use slices::{extract_slices, CodeSlice, SliceKind, DEFAULT_CONTEXT};
pub use strip::strip_comments;
pub use vocab::{build_vocab, vocab_text, TokenSequence, Vocabulary, CLS, PAD, RESERVED_TOKENS, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrepError {
    #[error("unterminated block comment starting on line {line}")]
    UnterminatedComment { line: usize },
    #[error("unterminated {what} literal on line {line}")]
    UnterminatedLiteral { what: &'static str, line: usize },
    #[error("unlexable character {ch:?} at byte offset {offset}")]
    Unlexable { offset: usize, ch: char },
    #[error("empty corpus: no tokens to build a vocabulary from")]
    EmptyCorpus,
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid sample: {0}")]
    Sample(String),
}

/// Binary ground truth; `Vulnerable` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Safe = 0,
    Vulnerable = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Safe),
            1 => Some(Label::Vulnerable),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Label::from_index(v as usize).ok_or_else(|| alloc::format!("label must be 0 or 1, got {v}"))
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// One labeled code record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub code: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

impl RawSample {
    pub fn new(id: impl Into<String>, code: impl Into<String>, label: Label) -> Result<Self, PrepError> {
        let s = RawSample {
            id: id.into(),
            code: code.into(),
            label,
            origin: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        if self.id.is_empty() {
            return Err(PrepError::Sample("empty id".into()));
        }
        if self.code.trim().is_empty() {
            return Err(PrepError::Sample(alloc::format!("sample {:?} has no code", self.id)));
        }
        Ok(())
    }
}

/// Knobs for the strip → normalize → lex pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepOptions {
    #[serde(default = "default_rename")]
    pub rename_identifiers: bool,
    #[serde(default)]
    pub language: Language,
    /// Custom known-API names; `None` means the bundled table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_list: Option<Vec<String>>,
}

fn default_rename() -> bool {
    true
}

impl Default for PrepOptions {
    fn default() -> Self {
        PrepOptions {
            rename_identifiers: true,
            language: Language::C,
            api_list: None,
        }
    }
}

impl PrepOptions {
    pub fn api(&self) -> ApiList {
        match &self.api_list {
            Some(names) => ApiList::from_names(names.iter().cloned()),
            None => ApiList::default(),
        }
    }

    /// Runs strip → normalize → lex on one piece of source.
    pub fn tokens(&self, code: &str) -> Result<Vec<LexToken>, PrepError> {
        let api = self.api();
        let stripped = strip_comments(code)?;
        let normalized = normalize_with(&stripped, self.rename_identifiers, &api, self.language)?;
        lex_with(&normalized, self.language)
    }

    /// Vocabulary-level token texts (literals masked) for one piece of source.
    pub fn token_texts(&self, code: &str) -> Result<Vec<String>, PrepError> {
        Ok(self.tokens(code)?.iter().map(|t| String::from(vocab_text(t))).collect())
    }
}
