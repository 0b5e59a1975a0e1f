//! Sequence classifiers mapping [`TokenSequence`]s to two-class logits: a
//! small GPT-style transformer and a single-layer LSTM baseline.
//!
//! A [`Model`] owns its configuration and a flat list of named parameter
//! tensors. The forward pass is recorded on a caller-supplied [`Tape`] so the
//! same code serves inference and training.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codeprep::{Label, TokenSequence};
use crate::tensor::{kernels, Tape, Tensor, TensorError, Var};

mod lstm;
mod transformer;

/// Standard deviation of embeddings and projection weights at init.
pub const INIT_STD: f64 = 0.02;

/// Rows per internal chunk when running inference over many sequences.
const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn default_classes() -> usize {
    2
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    /// 0 in a config file means "size of the vocabulary in use".
    #[serde(default)]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TransformerConfig {
    /// 4 layers, d_model 128, 4 heads, d_ff 512.
    pub fn teacher(vocab_size: usize, max_len: usize) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            max_len,
            n_classes: 2,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    /// 2 layers, d_model 64, 2 heads, d_ff 256.
    pub fn student(vocab_size: usize, max_len: usize) -> Self {
        TransformerConfig {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 256,
            ..Self::teacher(vocab_size, max_len)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        common_checks(self.vocab_size, self.max_len, self.n_classes, self.dropout_rate)?;
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(ModelError::Config(
                "d_model, n_heads, n_layers and d_ff must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    #[serde(default)]
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub max_len: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LstmConfig {
    pub fn baseline(vocab_size: usize, max_len: usize) -> Self {
        LstmConfig {
            vocab_size,
            d_embed: 64,
            d_hidden: 64,
            max_len,
            n_classes: 2,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        common_checks(self.vocab_size, self.max_len, self.n_classes, self.dropout_rate)?;
        if self.d_embed == 0 || self.d_hidden == 0 {
            return Err(ModelError::Config("d_embed and d_hidden must be positive".into()));
        }
        Ok(())
    }
}

fn common_checks(vocab_size: usize, max_len: usize, n_classes: usize, dropout: f64) -> Result<(), ModelError> {
    if vocab_size < 4 {
        return Err(ModelError::Config(format!(
            "vocab_size {vocab_size} leaves no room past the reserved ids"
        )));
    }
    if max_len < 2 {
        return Err(ModelError::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    if n_classes != 2 {
        return Err(ModelError::Config(format!(
            "only binary classification is supported, got n_classes {n_classes}"
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(ModelError::Config(format!(
            "dropout_rate must be in [0, 1), got {dropout}"
        )));
    }
    Ok(())
}

/// Architecture selector, serialized with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Lstm(LstmConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Lstm(c) => c.validate(),
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.max_len,
            ModelConfig::Lstm(c) => c.max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.vocab_size,
            ModelConfig::Lstm(c) => c.vocab_size,
        }
    }

    pub fn set_vocab_size(&mut self, vocab_size: usize) {
        match self {
            ModelConfig::Transformer(c) => c.vocab_size = vocab_size,
            ModelConfig::Lstm(c) => c.vocab_size = vocab_size,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelConfig::Transformer(c) => c.seed,
            ModelConfig::Lstm(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ModelConfig::Transformer(c) => c.seed = seed,
            ModelConfig::Lstm(c) => c.seed = seed,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        match self {
            ModelConfig::Transformer(c) => c.dropout_rate,
            ModelConfig::Lstm(c) => c.dropout_rate,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Transformer(_) => "transformer",
            ModelConfig::Lstm(_) => "lstm",
        }
    }
}

/// How a parameter is drawn at init.
#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn layout(config: &ModelConfig) -> Vec<ParamSpec> {
    match config {
        ModelConfig::Transformer(c) => transformer::layout(c),
        ModelConfig::Lstm(c) => lstm::layout(c),
    }
}

/// Intermediate values exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub enum Trace {
    /// Per layer, the attention output before the output projection,
    /// `[batch·seq, d_model]` where `seq` is the longest true length.
    Transformer { seq: usize, attention: Vec<Tensor> },
    /// Hidden state after each sample's last true position, `[batch, d_hidden]`.
    Lstm { final_hidden: Tensor },
}

/// Optional per-call dropout source; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// A classifier: configuration plus named parameters in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Fresh parameters drawn from the config's seed: normal weights, zero
    /// biases, unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
        let mut names = Vec::new();
        let mut params = Vec::new();
        for s in layout(&config) {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(s.name);
            params.push(Tensor::new(s.shape, data)?);
        }
        Ok(Model { config, names, params })
    }

    /// Reassembles a model from stored parameters, which must match the
    /// config's layout name-for-name and shape-for-shape.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != named.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (s, (name, t)) in specs.into_iter().zip(named) {
            if s.name != name {
                return Err(ModelError::Config(format!(
                    "expected parameter {:?}, found {name:?}",
                    s.name
                )));
            }
            if s.shape != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    s.shape
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Config(format!("parameter {name:?} has non-finite values")));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Model { config, names, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.params)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Overwrites every parameter with `other`'s; the layouts must agree.
    pub fn copy_params_from(&mut self, other: &Model) -> Result<(), ModelError> {
        let same = self.names == other.names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(ModelError::Config(format!(
                "cannot copy parameters from a {} model with a different layout",
                other.config.kind()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant(p) })
            .collect()
    }

    /// Records the forward pass and returns `[batch, 2]` logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[&TokenSequence],
        dropout: DropoutRng<'_>,
    ) -> Result<Var, ModelError> {
        self.forward_traced(tape, vars, batch, dropout, None)
    }

    fn forward_traced(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[&TokenSequence],
        dropout: DropoutRng<'_>,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Input(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let input = BatchInput::new(batch, self.max_len(), self.config.vocab_size())?;
        match &self.config {
            ModelConfig::Transformer(c) => transformer::forward(c, tape, vars, &input, dropout, trace),
            ModelConfig::Lstm(c) => lstm::forward(c, tape, vars, &input, dropout, trace),
        }
    }

    /// Evaluation-mode logits for any number of sequences.
    pub fn logits(&self, seqs: &[&TokenSequence]) -> Result<Tensor, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut data = Vec::with_capacity(seqs.len() * 2);
        let mut tape = Tape::new();
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            tape.reset();
            let vars = self.bind(&mut tape, false);
            let out = self.forward(&mut tape, &vars, chunk, None)?;
            data.extend_from_slice(tape.value(out));
        }
        Ok(Tensor::new(vec![seqs.len(), 2], data)?)
    }

    /// Label and class probabilities (softmax at T = 1). Ties go to label 0.
    pub fn predict(&self, seq: &TokenSequence) -> Result<(Label, [f64; 2]), ModelError> {
        Ok(self.predict_batch(&[seq])?[0])
    }

    pub fn predict_batch(&self, seqs: &[&TokenSequence]) -> Result<Vec<(Label, [f64; 2])>, ModelError> {
        let probs = kernels::softmax_with_temperature(&self.logits(seqs)?, 1.0)?;
        Ok((0..seqs.len())
            .map(|i| {
                let p = [probs.get2(i, 0), probs.get2(i, 1)];
                (argmax_label(&p), p)
            })
            .collect())
    }

    /// Evaluation-mode forward pass returning internal activations.
    pub fn trace(&self, seqs: &[&TokenSequence]) -> Result<Trace, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let mut recorded = Vec::new();
        self.forward_traced(&mut tape, &vars, seqs, None, Some(&mut recorded))?;
        let tensors: Vec<Tensor> = recorded.iter().map(|&v| tape.to_tensor(v)).collect();
        Ok(match &self.config {
            ModelConfig::Transformer(_) => Trace::Transformer {
                seq: seqs.iter().map(|s| s.true_length).max().unwrap_or(0),
                attention: tensors,
            },
            ModelConfig::Lstm(_) => Trace::Lstm {
                final_hidden: tensors.into_iter().next().expect("lstm records its final state"),
            },
        })
    }
}

/// Class 1 only when strictly more probable; ties go to class 0.
pub fn argmax_label(row: &[f64]) -> Label {
    if row[1] > row[0] {
        Label::Vulnerable
    } else {
        Label::Safe
    }
}

/// A validated batch cut to its longest true length.
pub(crate) struct BatchInput {
    pub batch: usize,
    pub seq: usize,
    /// Row-major `[batch, seq]` token ids.
    pub ids: Vec<usize>,
    pub valid: Vec<usize>,
}

impl BatchInput {
    fn new(batch: &[&TokenSequence], max_len: usize, vocab_size: usize) -> Result<Self, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        for (i, s) in batch.iter().enumerate() {
            if s.ids.len() != max_len {
                return Err(ModelError::Tensor(TensorError::dim(
                    "forward",
                    format!("sequence {i} has length {}, model expects {max_len}", s.ids.len()),
                )));
            }
            if s.true_length == 0 || s.true_length > max_len {
                return Err(ModelError::Input(format!(
                    "sequence {i} has true_length {}",
                    s.true_length
                )));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(ModelError::Tensor(TensorError::Index {
                    op: "embedding",
                    index: bad as usize,
                    bound: vocab_size,
                }));
            }
        }
        // causal attention plus last-position readout make every position
        // past the longest true length irrelevant
        let seq = batch.iter().map(|s| s.true_length).max().unwrap_or(1);
        let ids = batch
            .iter()
            .flat_map(|s| s.ids[..seq].iter().map(|&id| id as usize))
            .collect();
        Ok(BatchInput {
            batch: batch.len(),
            seq,
            ids,
            valid: batch.iter().map(|s| s.true_length).collect(),
        })
    }
}

pub(crate) fn maybe_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut DropoutRng<'_>) -> Result<Var, TensorError> {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(x, rate, &mut **r),
        _ => Ok(x),
    }
}
