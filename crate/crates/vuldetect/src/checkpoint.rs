//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VDCK"  u32 version  u64 n  n bytes of canonical JSON metadata
//! repeated until end of file:
//!     u32 name length, name bytes, u32 rank, rank × u64 dims, f64 values
//! ```
//!
//! The metadata records the model configuration, the preprocessing options
//! and the vocabulary, so a checkpoint alone is enough to classify new code.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vuldetect_core::codeprep::{PrepOptions, Vocabulary};
use vuldetect_core::models::{Model, ModelConfig};
use vuldetect_core::tensor::Tensor;

use crate::error::{Error, Result};
use crate::io::canonical_json;

pub const MAGIC: &[u8; 4] = b"VDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    prep: PrepOptions,
    vocab: Vec<String>,
}

/// A trained model bundled with what it takes to encode its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub prep: PrepOptions,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn new(model: Model, prep: PrepOptions, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() != model.config().vocab_size() {
            return Err(Error::checkpoint(
                "vocab",
                format!(
                    "{} tokens for a model with vocab_size {}",
                    vocab.len(),
                    model.config().vocab_size()
                ),
            ));
        }
        Ok(Checkpoint { model, prep, vocab })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = canonical_json(&Meta {
            model: self.model.config().clone(),
            prep: self.prep.clone(),
            vocab: self.vocab.tokens().to_vec(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in self.model.named_params() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::checkpoint("magic", "not a vuldetect checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::checkpoint(
                "version",
                format!("unsupported format version {version}, expected {VERSION}"),
            ));
        }
        let len = r.u64("config length")?;
        let text = r.take(to_usize(len, "config length")?, "config")?;
        let text = std::str::from_utf8(text).map_err(|e| Error::checkpoint("config", e.to_string()))?;
        let meta: Meta = serde_json::from_str(text).map_err(|e| Error::checkpoint("config", e.to_string()))?;

        let mut named = Vec::new();
        while !r.at_end() {
            let field = format!("parameter {}", named.len());
            let n = r.u32(&field)? as usize;
            let name = std::str::from_utf8(r.take(n, &field)?)
                .map_err(|e| Error::checkpoint(&field, e.to_string()))?
                .to_string();
            let rank = r.u32(&name)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(to_usize(r.u64(&name)?, &name)?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::checkpoint(&name, "shape overflows"))?;
            let raw = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::checkpoint(&name, "shape overflows"))?,
                &name,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::checkpoint(&name, e.to_string()))?;
            named.push((name, t));
        }
        let model = Model::from_parts(meta.model, named).map_err(|e| Error::checkpoint("parameters", e.to_string()))?;
        let vocab = Vocabulary::from_tokens(meta.vocab).map_err(|e| Error::checkpoint("vocab", e.to_string()))?;
        Checkpoint::new(model, meta.prep, vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn to_usize(v: u64, field: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::checkpoint(field, format!("value {v} too large")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::checkpoint(
                    field,
                    format!("file truncated: needed {n} bytes at offset {}", self.pos),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}
