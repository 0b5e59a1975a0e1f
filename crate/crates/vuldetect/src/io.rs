//! JSON-lines files: datasets, vocabularies, split manifests, training logs.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vuldetect_core::codeprep::{ApiList, RawSample, Vocabulary};
use vuldetect_core::data::{Dataset, SplitName, Splits};
use vuldetect_core::distill::{EpochRecord, TrainLog};

use crate::error::{Error, Result};

/// Compact JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Usage(format!("cannot serialize: {e}")))?;
    Ok(v.to_string())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses every non-blank line, returning 1-based line numbers with values.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&canonical_json(&item)?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Loads a labeled dataset, named after the file stem.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let rows: Vec<(usize, RawSample)> = read_jsonl(path)?;
    if rows.is_empty() {
        return Err(Error::Usage(format!("{}: dataset file is empty", path.display())));
    }
    let mut seen = HashSet::new();
    let parse_err = |line, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (line, s) in &rows {
        s.validate().map_err(|e| parse_err(*line, e.to_string()))?;
        if !seen.insert(s.id.as_str()) {
            return Err(parse_err(*line, format!("duplicate sample id {:?}", s.id)));
        }
    }
    let name = path
        .file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset::new(name, rows.into_iter().map(|(_, s)| s).collect())?)
}

pub fn write_samples(path: &Path, samples: &[RawSample]) -> Result<()> {
    write_jsonl(path, samples)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabEntry {
    id: u32,
    token: String,
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_jsonl(
        path,
        vocab.tokens().iter().enumerate().map(|(i, t)| VocabEntry {
            id: i as u32,
            token: t.clone(),
        }),
    )
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let rows: Vec<(usize, VocabEntry)> = read_jsonl(path)?;
    let mut tokens = Vec::with_capacity(rows.len());
    for (line, e) in rows {
        if e.id as usize != tokens.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected id {}, found {}", tokens.len(), e.id),
            });
        }
        tokens.push(e.token);
    }
    Vocabulary::from_tokens(tokens).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: SplitName,
}

pub fn write_manifest(path: &Path, splits: &Splits) -> Result<()> {
    write_jsonl(
        path,
        splits
            .manifest()
            .into_iter()
            .map(|(id, split)| ManifestEntry { id, split }),
    )
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, e)| e).collect())
}

pub fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    write_jsonl(path, &log.epochs)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, e)| e).collect())
}

/// Known-API names from a text file (one per line, `#` comments).
pub fn read_api_list(path: &Path) -> Result<Vec<String>> {
    let list = ApiList::parse(&read_text(path)?);
    if list.is_empty() {
        return Err(Error::Usage(format!("{}: API list has no names", path.display())));
    }
    Ok(list.names().map(String::from).collect())
}
