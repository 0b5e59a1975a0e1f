use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::lex::{LexToken, TokenKind};
use super::{Label, PrepError};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const RESERVED_TOKENS: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

/// Vocabulary-level text of a token: literal payloads are masked.
pub fn vocab_text(tok: &LexToken) -> &str {
    match tok.kind {
        TokenKind::String => "STRLIT",
        TokenKind::Char => "CHARLIT",
        _ => &tok.text,
    }
}

/// Dense token ↔ id mapping with PAD/UNK/CLS at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list (reserved first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, PrepError> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r) {
            return Err(PrepError::Vocabulary(format!(
                "the first entries must be {RESERVED_TOKENS:?}"
            )));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(PrepError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS] ++ ids` truncated to `max_len - 1` mapped tokens, then PAD-filled.
    ///
    /// # Panics
    /// If `max_len < 2`.
    pub fn encode(&self, tokens: &[LexToken], max_len: usize) -> TokenSequence {
        self.encode_texts(tokens.iter().map(vocab_text), max_len)
    }

    /// As [`Vocabulary::encode`], for tokens already in vocabulary-level form.
    pub fn encode_texts<'a, I>(&self, texts: I, max_len: usize) -> TokenSequence
    where
        I: IntoIterator<Item = &'a str>,
    {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(texts.into_iter().take(max_len - 1).map(|t| self.id(t)));
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        TokenSequence {
            ids,
            true_length,
            label: None,
        }
    }
}

/// Ranks tokens by descending frequency (ties lexicographic), keeping at
/// most `max_size - 3` entries seen at least `min_freq` times.
pub fn build_vocab<C, T, S>(corpus: C, max_size: usize, min_freq: usize) -> Result<Vocabulary, PrepError>
where
    C: IntoIterator<Item = T>,
    T: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size <= RESERVED_TOKENS.len() {
        return Err(PrepError::Vocabulary(format!(
            "max_size must exceed {}, got {max_size}",
            RESERVED_TOKENS.len()
        )));
    }
    if min_freq == 0 {
        return Err(PrepError::Vocabulary("min_freq must be positive".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for stream in corpus {
        for tok in stream {
            let tok = tok.as_ref();
            total += 1;
            if RESERVED_TOKENS.contains(&tok) {
                continue;
            }
            match counts.get_mut(tok) {
                Some(c) => *c += 1,
                None => {
                    counts.insert(tok.to_string(), 1);
                }
            }
        }
    }
    if total == 0 {
        return Err(PrepError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    // BTreeMap order is lexicographic and the sort is stable
    ranked.sort_by_key(|(_, c)| core::cmp::Reverse(*c));
    ranked.truncate(max_size - RESERVED_TOKENS.len());
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Fixed-length encoded sample: `CLS` first, PAD only as a suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of non-PAD positions (CLS included).
    pub true_length: usize,
    pub label: Option<Label>,
}

impl TokenSequence {
    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token texts after CLS, up to `true_length`.
    pub fn decode<'v>(&self, vocab: &'v Vocabulary) -> Vec<&'v str> {
        self.ids[1..self.true_length]
            .iter()
            .map(|&id| vocab.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect()
    }

    /// Checks the CLS-prefix / PAD-suffix layout.
    pub fn is_well_formed(&self, max_len: usize) -> bool {
        self.ids.len() == max_len
            && self.true_length >= 1
            && self.true_length <= max_len
            && self.ids[0] == CLS
            && self.ids[1..self.true_length].iter().all(|&i| i != PAD)
            && self.ids[self.true_length..].iter().all(|&i| i == PAD)
    }

    /// A sequence of `len` slots with the same prefix, padded or cut.
    pub fn resized(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.resize(len, PAD);
        TokenSequence {
            ids,
            true_length: self.true_length.min(len),
            label: self.label,
        }
    }
}
