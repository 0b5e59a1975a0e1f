//! Knowledge distillation: temperature-softened teacher targets, the
//! KL distillation loss, the combined hard/soft objective and the training
//! loops for teachers and students.
//!
//! Teachers are frozen. Their soft targets are computed once per run with
//! [`cache_teacher_predictions`] and looked up by sample id while the
//! student trains.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codeprep::{Label, TokenSequence};
use crate::data::{BatchPlan, DataError, Example};
use crate::metrics::{compute_metrics, EvalReport, MetricsError};
use crate::models::{argmax_label, Model, ModelError};
use crate::tensor::{kernels, Adam, AdamConfig, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistillError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    32
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_temperature() -> f64 {
    3.0
}

fn default_hard_loss_weight() -> f64 {
    1.0
}

/// Optimization settings for hard-label training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        validate_schedule(self.batch_size, self.learning_rate)
    }
}

fn validate_schedule(batch_size: usize, learning_rate: f64) -> Result<(), DistillError> {
    if batch_size == 0 {
        return Err(DistillError::Config("batch_size must be at least 1".into()));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(DistillError::Config(format!(
            "learning_rate must be positive, got {learning_rate}"
        )));
    }
    Ok(())
}

/// Settings for distilling one or more frozen teachers into a student.
///
/// `teachers` names the teacher checkpoints; the training loop itself takes
/// loaded models, one per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub teachers: Vec<String>,
    /// Per-teacher weights; empty means uniform.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teacher_weights: Vec<f64>,
    #[serde(default = "default_hard_loss_weight")]
    pub hard_loss_weight: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Start the student from the first teacher's weights (shapes must match).
    #[serde(default)]
    pub init_from_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: default_temperature(),
            teachers: Vec::new(),
            teacher_weights: Vec::new(),
            hard_loss_weight: default_hard_loss_weight(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            seed: 0,
            init_from_teacher: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(DistillError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.hard_loss_weight.is_finite() && self.hard_loss_weight >= 0.0) {
            return Err(DistillError::Config(format!(
                "hard_loss_weight must be non-negative, got {}",
                self.hard_loss_weight
            )));
        }
        if !self.teacher_weights.is_empty() {
            if self.teacher_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(DistillError::Config("teacher_weights must be non-negative".into()));
            }
            let sum: f64 = self.teacher_weights.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(DistillError::Config(format!("teacher_weights sum to {sum}, not 1")));
            }
            if !self.teachers.is_empty() && self.teachers.len() != self.teacher_weights.len() {
                return Err(DistillError::Config(format!(
                    "{} teacher_weights for {} teachers",
                    self.teacher_weights.len(),
                    self.teachers.len()
                )));
            }
        }
        validate_schedule(self.batch_size, self.learning_rate)
    }

    /// Resolved weights for `k` teachers.
    pub fn weights(&self, k: usize) -> Result<Vec<f64>, DistillError> {
        if k == 0 {
            return Err(DistillError::Config("at least one teacher is required".into()));
        }
        if self.teacher_weights.is_empty() {
            return Ok(vec![1.0 / k as f64; k]);
        }
        if self.teacher_weights.len() != k {
            return Err(DistillError::Config(format!(
                "{} teacher_weights for {k} teachers",
                self.teacher_weights.len()
            )));
        }
        Ok(self.teacher_weights.clone())
    }

    fn schedule(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

/// Per-batch (or per-epoch mean) loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// Teacher class distributions at `temperature`.
pub fn soft_targets(teacher_logits: &Tensor, temperature: f64) -> Result<Tensor, TensorError> {
    kernels::softmax_with_temperature(teacher_logits, temperature)
}

/// `(1/n) Σ_i D_KL(p_i ‖ q_i)` with `q = softmax(student_logits / T)`.
pub fn kd_loss(student_logits: &Tensor, teacher_probs: &Tensor, temperature: f64) -> Result<f64, TensorError> {
    kernels::kl_divergence(
        teacher_probs,
        &kernels::softmax_with_temperature(student_logits, temperature)?,
    )
}

/// Differentiable [`kd_loss`]; the teacher distribution is a constant.
pub fn kd_loss_var(
    tape: &mut Tape,
    student_logits: Var,
    teacher_probs: &Tensor,
    temperature: f64,
) -> Result<Var, TensorError> {
    let q = tape.softmax_with_temperature(student_logits, temperature)?;
    let p = tape.constant(teacher_probs);
    tape.kl_divergence(p, q)
}

/// Loss weights shared by the value and tape forms of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub temperature: f64,
    pub teacher_weights: Vec<f64>,
    pub hard_loss_weight: f64,
}

impl Objective {
    pub fn from_config(config: &DistillConfig, teachers: usize) -> Result<Self, DistillError> {
        config.validate()?;
        Ok(Objective {
            temperature: config.temperature,
            teacher_weights: config.weights(teachers)?,
            hard_loss_weight: config.hard_loss_weight,
        })
    }

    fn combine(&self, ce: f64, kd: f64) -> LossBreakdown {
        let t2 = self.temperature * self.temperature;
        LossBreakdown {
            ce,
            kd,
            total: self.hard_loss_weight * ce + t2 * kd,
        }
    }

    /// Builds `hard_weight·CE + T²·Σ_k w_k·KD_k` on the tape.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        logits: Var,
        labels: &[usize],
        teacher_probs: &[&Tensor],
    ) -> Result<(Var, LossBreakdown), DistillError> {
        if teacher_probs.len() != self.teacher_weights.len() {
            return Err(DistillError::Config(format!(
                "{} teacher distributions for {} weights",
                teacher_probs.len(),
                self.teacher_weights.len()
            )));
        }
        let ce = tape.cross_entropy(logits, labels)?;
        let mut kd: Option<Var> = None;
        for (p, &w) in teacher_probs.iter().zip(&self.teacher_weights) {
            let term = kd_loss_var(tape, logits, p, self.temperature)?;
            let term = tape.scale(term, w)?;
            kd = Some(match kd {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let breakdown = self.combine(tape.scalar_value(ce), kd.map_or(0.0, |v| tape.scalar_value(v)));
        let hard = tape.scale(ce, self.hard_loss_weight)?;
        let total = match kd {
            None => hard,
            Some(kd) => {
                let soft = tape.scale(kd, self.temperature * self.temperature)?;
                tape.add(hard, soft)?
            }
        };
        Ok((total, breakdown))
    }
}

/// Combined objective evaluated on plain tensors.
pub fn total_loss(
    student_logits: &Tensor,
    labels: &[Label],
    teacher_probs: &[&Tensor],
    config: &DistillConfig,
) -> Result<LossBreakdown, DistillError> {
    let objective = Objective::from_config(config, teacher_probs.len())?;
    let labels: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let mut tape = Tape::new();
    let z = tape.constant(student_logits);
    Ok(objective.loss_var(&mut tape, z, &labels, teacher_probs)?.1)
}

/// Soft targets of every teacher for every sample of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPredictions {
    temperature: f64,
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    probs: Vec<Tensor>,
}

impl TeacherPredictions {
    pub fn new(temperature: f64, ids: Vec<String>, probs: Vec<Tensor>) -> Result<Self, DistillError> {
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(DistillError::Usage(format!("duplicate sample id {id:?}")));
            }
        }
        for (k, p) in probs.iter().enumerate() {
            if p.shape() != [ids.len(), 2] {
                return Err(TensorError::Shape {
                    op: "teacher_predictions",
                    lhs: p.shape().to_vec(),
                    rhs: vec![ids.len(), 2],
                }
                .into());
            }
            kernels::check_stochastic("teacher_predictions", p, 1e-9)
                .map_err(|e| DistillError::Usage(format!("teacher {k}: {e}")))?;
        }
        Ok(TeacherPredictions {
            temperature,
            ids,
            index,
            probs,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_teachers(&self) -> usize {
        self.probs.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `[n, 2]` distributions of teacher `k`, rows in sample order.
    pub fn probs(&self, k: usize) -> &Tensor {
        &self.probs[k]
    }

    pub fn get(&self, teacher: usize, id: &str) -> Option<&[f64]> {
        let &i = self.index.get(id)?;
        Some(self.probs.get(teacher)?.row(i))
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// Runs every teacher once (dropout off) over `examples`.
pub fn cache_teacher_predictions(
    teachers: &[&Model],
    examples: &[Example],
    temperature: f64,
) -> Result<TeacherPredictions, DistillError> {
    if teachers.is_empty() {
        return Err(DistillError::Config("at least one teacher is required".into()));
    }
    let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let mut probs = Vec::with_capacity(teachers.len());
    for teacher in teachers {
        let p = if seqs.is_empty() {
            Tensor::zeros(&[0, 2])
        } else {
            soft_targets(&teacher.logits(&seqs)?, temperature)?
        };
        probs.push(p);
    }
    TeacherPredictions::new(temperature, ids, probs)
}

/// Monotonic time source for the `seconds` column of training logs.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that never advances; logs then report zero seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &EpochRecord) -> bool {
        EpochRecord { seconds: 0.0, ..*self } == EpochRecord { seconds: 0.0, ..*other }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based), if any epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn same_outcome(&self, other: &TrainLog) -> bool {
        self.best_epoch == other.best_epoch
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| a.same_outcome(b))
    }
}

/// Scores `model` on labeled examples with dropout off.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<EvalReport, DistillError> {
    if examples.is_empty() {
        return Err(DistillError::Usage("cannot evaluate on an empty set".into()));
    }
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let logits = model.logits(&seqs)?;
    let preds: Vec<Label> = (0..examples.len()).map(|i| argmax_label(logits.row(i))).collect();
    let labels: Vec<Label> = examples.iter().map(|e| e.label).collect();
    Ok(compute_metrics(&preds, &labels)?)
}

/// Trains a model on hard labels only.
pub fn train_teacher(
    model: &mut Model,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<TrainLog, DistillError> {
    config.validate()?;
    let objective = Objective {
        temperature: 1.0,
        teacher_weights: Vec::new(),
        hard_loss_weight: 1.0,
    };
    fit(model, train, val, config, &objective, None, clock)
}

/// Distills frozen `teachers` into `student`.
pub fn okdd_train(
    teachers: &[&Model],
    student: &mut Model,
    train: &[Example],
    val: &[Example],
    config: &DistillConfig,
    clock: &dyn Clock,
) -> Result<TrainLog, DistillError> {
    let objective = Objective::from_config(config, teachers.len())?;
    if !config.teachers.is_empty() && config.teachers.len() != teachers.len() {
        return Err(DistillError::Config(format!(
            "configuration names {} teachers but {} were given",
            config.teachers.len(),
            teachers.len()
        )));
    }
    check_inputs(train, val)?;
    if config.init_from_teacher {
        student
            .copy_params_from(teachers[0])
            .map_err(|e| DistillError::Config(format!("init_from_teacher: {e}")))?;
    }
    let cache = cache_teacher_predictions(teachers, train, config.temperature)?;
    fit(student, train, val, &config.schedule(), &objective, Some(&cache), clock)
}

fn check_inputs(train: &[Example], val: &[Example]) -> Result<(), DistillError> {
    if train.is_empty() {
        return Err(DistillError::Usage("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(DistillError::Usage("validation set is empty".into()));
    }
    Ok(())
}

const DROPOUT_STREAM: u64 = u64::MAX;

fn fit(
    model: &mut Model,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    objective: &Objective,
    cache: Option<&TeacherPredictions>,
    clock: &dyn Clock,
) -> Result<TrainLog, DistillError> {
    check_inputs(train, val)?;
    let rows: Vec<usize> = match cache {
        None => Vec::new(),
        Some(c) => train
            .iter()
            .map(|e| {
                c.position(&e.id)
                    .ok_or_else(|| DistillError::Usage(format!("no teacher prediction for sample {:?}", e.id)))
            })
            .collect::<Result<_, _>>()?,
    };
    let plan = BatchPlan::new(train.len(), config.batch_size, config.seed, true)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    )?;
    let mut dropout = ChaCha8Rng::seed_from_u64(config.seed);
    dropout.set_stream(DROPOUT_STREAM);
    let mut tape = Tape::new();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let start = clock.seconds();

    for epoch in 1..=config.epochs {
        let mut sums = [0.0f64; 3];
        for (b, batch) in plan.epoch(epoch as u64 - 1).iter().enumerate() {
            tape.reset();
            let vars = model.bind(&mut tape, true);
            let seqs: Vec<&TokenSequence> = batch.iter().map(|&i| &train[i].seq).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label.index()).collect();
            let logits = model.forward(&mut tape, &vars, &seqs, Some(&mut dropout))?;
            let targets: Vec<Tensor> = match cache {
                None => Vec::new(),
                Some(c) => (0..c.num_teachers())
                    .map(|k| gather_rows(c.probs(k), batch.iter().map(|&i| rows[i])))
                    .collect(),
            };
            let target_refs: Vec<&Tensor> = targets.iter().collect();
            let (loss, parts) = objective.loss_var(&mut tape, logits, &labels, &target_refs)?;
            if !parts.total.is_finite() {
                return Err(DistillError::NonFinite { epoch, batch: b + 1 });
            }
            tape.backward(loss)?;
            for (p, &v) in model.params_mut().iter_mut().zip(&vars) {
                let g = tape
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()]);
                p.set_grad(g)?;
            }
            adam.step(model.params_mut())?;
            let w = batch.len() as f64;
            sums[0] += parts.ce * w;
            sums[1] += parts.kd * w;
            sums[2] += parts.total * w;
        }
        let n = train.len() as f64;
        let report = evaluate(model, val)?;
        log.epochs.push(EpochRecord {
            epoch,
            ce: sums[0] / n,
            kd: sums[1] / n,
            total: sums[2] / n,
            val_accuracy: report.accuracy,
            val_f1: report.f1,
            seconds: clock.seconds() - start,
        });
        if best.as_ref().is_none_or(|(acc, _)| report.accuracy >= *acc) {
            let snapshot = model
                .params()
                .iter()
                .map(|p| {
                    let mut p = p.clone();
                    p.clear_grad();
                    p
                })
                .collect();
            best = Some((report.accuracy, snapshot));
            log.best_epoch = Some(epoch);
        }
    }
    for p in model.params_mut() {
        p.clear_grad();
    }
    if let Some((_, params)) = best {
        model.params_mut().clone_from_slice(&params);
    }
    Ok(log)
}

fn gather_rows(t: &Tensor, rows: impl Iterator<Item = usize>) -> Tensor {
    let cols = t.shape()[1];
    let mut data = Vec::new();
    for r in rows {
        data.extend_from_slice(t.row(r));
    }
    let n = data.len() / cols;
    Tensor::new(vec![n, cols], data).expect("rows of a valid tensor")
}

#[cfg(test)]
mod tests;
