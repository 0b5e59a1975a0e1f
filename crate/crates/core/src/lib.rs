//! Core of the `vuldetect` toolkit.
//!
//! Everything in this crate is a pure function of its inputs and only needs
//! `alloc`: a small reverse-mode autodiff tensor library, C/C++ source
//! preprocessing (comment stripping, normalization, lexing, gadget slicing,
//! vocabulary encoding), the transformer and LSTM classifiers, the
//! knowledge-distillation losses and training loop, dataset splitting and
//! metrics. File formats, checkpoints and the command line live in the
//! `vuldetect` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod codeprep;
pub mod data;
pub mod distill;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod tensor;

pub use codeprep::{Label, RawSample, TokenSequence, Vocabulary};
pub use data::{Dataset, SplitSpec};
pub use distill::{DistillConfig, LossBreakdown, TeacherPredictions, TrainConfig, TrainLog};
pub use metrics::EvalReport;
pub use models::{LstmConfig, Model, ModelConfig, TransformerConfig};
pub use tensor::{Adam, AdamConfig, Tape, Tensor, TensorError, Var};
