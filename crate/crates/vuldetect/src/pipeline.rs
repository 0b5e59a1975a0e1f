//! End-to-end runs behind the subcommands. Each run writes its outputs and
//! the [`RunConfig`] that reproduces them into one directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use vuldetect_core::codeprep::{build_vocab, strip_comments, Label, PrepOptions, RawSample, Vocabulary};
use vuldetect_core::data::{
    encode_samples, preprocess_samples, resample_balance, slice_samples, split, token_corpus, Dataset, Example, Splits,
    Unit,
};
use vuldetect_core::distill::{evaluate, okdd_train, train_teacher, Clock, TrainLog};
use vuldetect_core::metrics::EvalReport;
use vuldetect_core::models::Model;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, VocabSettings};
use crate::error::{Error, Result};
use crate::io::{
    canonical_json, load_dataset, read_api_list, read_text, read_vocab, write_log, write_manifest, write_samples,
    write_text, write_vocab,
};
use crate::report::{render_report, Format, NamedReport};

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SPLIT_MANIFEST: &str = "split.jsonl";
pub const TEST_SPLIT: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_CONFIG: &str = "run_config.toml";

/// Wall-clock seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::start()
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Comment-free copies of `samples`, cut into slices when `unit` asks.
fn units(samples: &[RawSample], unit: Unit, prep: &PrepOptions, context: usize) -> Result<Vec<RawSample>> {
    let stripped = samples
        .iter()
        .map(|s| {
            Ok(RawSample {
                code: strip_comments(&s.code).map_err(|e| Error::Usage(format!("sample {:?}: {e}", s.id)))?,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(match unit {
        Unit::Function => stripped,
        Unit::Slice => slice_samples(&stripped, prep, context)?,
    })
}

/// A split dataset turned into per-split classification units.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub train: Vec<RawSample>,
    pub val: Vec<RawSample>,
    pub test: Vec<RawSample>,
}

pub fn prepare(cfg: &RunConfig, dataset: &Dataset) -> Result<Prepared> {
    let splits = split(dataset, &cfg.split)?;
    let train = if cfg.balance {
        resample_balance(&splits.train, cfg.split.seed)?
    } else {
        splits.train.clone()
    };
    let expand = |d: &Dataset| units(d.samples(), cfg.unit, &cfg.prep, cfg.context);
    Ok(Prepared {
        train: expand(&train)?,
        val: expand(&splits.val)?,
        test: expand(&splits.test)?,
        splits,
    })
}

pub struct Encoded {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

fn encode_all(p: &Prepared, prep: &PrepOptions, vocab: &Vocabulary, max_len: usize) -> Result<Encoded> {
    Ok(Encoded {
        train: encode_samples(&p.train, prep, vocab, max_len)?,
        val: encode_samples(&p.val, prep, vocab, max_len)?,
        test: encode_samples(&p.test, prep, vocab, max_len)?,
    })
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub test_report: EvalReport,
    pub config: RunConfig,
}

fn write_run(out: &Path, checkpoint_name: &str, run: &RunOutput, p: &Prepared) -> Result<()> {
    run.checkpoint.save(&out.join(checkpoint_name))?;
    write_log(&out.join(TRAIN_LOG), &run.log)?;
    write_manifest(&out.join(SPLIT_MANIFEST), &p.splits)?;
    write_samples(&out.join(TEST_SPLIT), p.splits.test.samples())?;
    write_vocab(&out.join(VOCAB_FILE), &run.checkpoint.vocab)?;
    write_text(&out.join(METRICS_FILE), &(canonical_json(&run.test_report)? + "\n"))?;
    run.config.save(&out.join(RUN_CONFIG))
}

fn vocabulary(settings: &VocabSettings, train: &[RawSample], prep: &PrepOptions) -> Result<Vocabulary> {
    match &settings.path {
        Some(p) => read_vocab(Path::new(p)),
        None => Ok(build_vocab(
            token_corpus(train, prep)?,
            settings.max_size,
            settings.min_freq,
        )?),
    }
}

/// Trains a model on hard labels.
pub fn train_teacher_run(cfg: &RunConfig, data: &Path, out: &Path, clock: &dyn Clock) -> Result<RunOutput> {
    let mut cfg = cfg.clone();
    cfg.command = "train-teacher".into();
    cfg.data = Some(path_string(data));
    let train_cfg = cfg.train.clone().unwrap_or_default();
    cfg.train = Some(train_cfg.clone());
    let mut model_cfg = cfg.model()?.clone();

    let prepared = prepare(&cfg, &load_dataset(data)?)?;
    let vocab = vocabulary(&cfg.vocab, &prepared.train, &cfg.prep)?;
    if model_cfg.vocab_size() == 0 {
        model_cfg.set_vocab_size(vocab.len());
    } else if model_cfg.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match the {}-token vocabulary",
            model_cfg.vocab_size(),
            vocab.len()
        )));
    }
    cfg.model = Some(model_cfg.clone());
    let enc = encode_all(&prepared, &cfg.prep, &vocab, model_cfg.max_len())?;
    let mut model = Model::new(model_cfg)?;
    let log = train_teacher(&mut model, &enc.train, &enc.val, &train_cfg, clock)?;
    let test_report = evaluate(&model, &enc.test)?;
    let run = RunOutput {
        checkpoint: Checkpoint::new(model, cfg.prep.clone(), vocab)?,
        log,
        test_report,
        config: cfg,
    };
    write_run(out, TEACHER_CHECKPOINT, &run, &prepared)?;
    Ok(run)
}

/// Distills one or more teacher checkpoints into a fresh student.
pub fn distill_run(
    cfg: &RunConfig,
    teachers: &[PathBuf],
    data: &Path,
    out: &Path,
    clock: &dyn Clock,
) -> Result<RunOutput> {
    if teachers.is_empty() {
        return Err(Error::Usage("--teachers needs at least one checkpoint".into()));
    }
    let mut cfg = cfg.clone();
    cfg.command = "distill".into();
    cfg.data = Some(path_string(data));
    let mut dcfg = cfg
        .distill
        .clone()
        .ok_or_else(|| Error::Config("missing [distill] section".into()))?;
    dcfg.teachers = teachers.iter().map(|p| path_string(p)).collect();
    dcfg.validate()?;

    let loaded = teachers
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let first = &loaded[0];
    for (path, t) in teachers.iter().zip(&loaded).skip(1) {
        if t.vocab != first.vocab || t.prep != first.prep || t.model.max_len() != first.model.max_len() {
            return Err(Error::Usage(format!(
                "teacher {} was trained with a different vocabulary, preprocessing or max_len than {}",
                path.display(),
                teachers[0].display()
            )));
        }
    }
    cfg.prep = first.prep.clone();
    let mut student_cfg = cfg.model()?.clone();
    if student_cfg.vocab_size() == 0 {
        student_cfg.set_vocab_size(first.vocab.len());
    }
    if student_cfg.vocab_size() != first.vocab.len() || student_cfg.max_len() != first.model.max_len() {
        return Err(Error::Config(format!(
            "student vocab_size/max_len ({}, {}) must match the teachers' ({}, {})",
            student_cfg.vocab_size(),
            student_cfg.max_len(),
            first.vocab.len(),
            first.model.max_len()
        )));
    }
    cfg.model = Some(student_cfg.clone());
    cfg.distill = Some(dcfg.clone());

    let prepared = prepare(&cfg, &load_dataset(data)?)?;
    let enc = encode_all(&prepared, &cfg.prep, &first.vocab, student_cfg.max_len())?;
    let mut student = Model::new(student_cfg)?;
    let teacher_models: Vec<&Model> = loaded.iter().map(|c| &c.model).collect();
    let log = okdd_train(&teacher_models, &mut student, &enc.train, &enc.val, &dcfg, clock)?;
    let test_report = evaluate(&student, &enc.test)?;
    let run = RunOutput {
        checkpoint: Checkpoint::new(student, cfg.prep.clone(), first.vocab.clone())?,
        log,
        test_report,
        config: cfg,
    };
    write_run(out, STUDENT_CHECKPOINT, &run, &prepared)?;
    Ok(run)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| path_string(p), |s| s.to_string_lossy().into_owned())
}

/// Scores a checkpoint on a labeled dataset and writes the rendered report.
pub fn evaluate_run(checkpoint: &Path, data: &Path, out: &Path, format: Format) -> Result<(NamedReport, String)> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(data)?;
    let samples = units(dataset.samples(), Unit::Function, &ck.prep, 0)?;
    let examples = encode_samples(&samples, &ck.prep, &ck.vocab, ck.model.max_len())?;
    let named = NamedReport {
        model: stem(checkpoint),
        dataset: stem(data),
        report: evaluate(&ck.model, &examples)?,
    };
    let rendered = render_report(std::slice::from_ref(&named), format)?;
    write_text(&out.join(format!("report.{}", format.extension())), &rendered)?;
    write_text(&out.join(METRICS_FILE), &(canonical_json(&named.report)? + "\n"))?;
    let cfg = RunConfig {
        command: "evaluate".into(),
        data: Some(path_string(data)),
        checkpoint: Some(path_string(checkpoint)),
        prep: ck.prep.clone(),
        model: Some(ck.model.config().clone()),
        ..RunConfig::default()
    };
    cfg.save(&out.join(RUN_CONFIG))?;
    Ok((named, rendered))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub probabilities: [f64; 2],
}

/// Classifies one source file.
pub fn predict_run(checkpoint: &Path, code: &Path) -> Result<Prediction> {
    let ck = Checkpoint::load(checkpoint)?;
    let source = read_text(code)?;
    let texts = ck
        .prep
        .token_texts(&source)
        .map_err(|e| Error::Usage(format!("{}: {e}", code.display())))?;
    let seq = ck
        .vocab
        .encode_texts(texts.iter().map(String::as_str), ck.model.max_len());
    let (label, probabilities) = ck.model.predict(&seq)?;
    Ok(Prediction { label, probabilities })
}

fn sidecar_config(output: &Path) -> PathBuf {
    let name = format!("{}.{RUN_CONFIG}", stem(output));
    output.with_file_name(name)
}

/// Options of the `preprocess` subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessArgs {
    pub unit: Unit,
    pub rename_identifiers: bool,
    pub api_list: Option<PathBuf>,
    pub context: usize,
}

/// Strips, optionally slices, and normalizes a dataset file. Returns the
/// number of records written.
pub fn preprocess_run(input: &Path, output: &Path, args: &PreprocessArgs) -> Result<usize> {
    let prep = PrepOptions {
        rename_identifiers: args.rename_identifiers,
        api_list: args.api_list.as_deref().map(read_api_list).transpose()?,
        ..PrepOptions::default()
    };
    let dataset = load_dataset(input)?;
    let samples = units(dataset.samples(), args.unit, &prep, args.context)?;
    let processed = preprocess_samples(&samples, &prep)?;
    write_samples(output, &processed)?;
    let cfg = RunConfig {
        command: "preprocess".into(),
        data: Some(path_string(input)),
        unit: args.unit,
        context: args.context,
        prep,
        ..RunConfig::default()
    };
    cfg.save(&sidecar_config(output))?;
    Ok(processed.len())
}

/// Builds a vocabulary from a (preprocessed) dataset as-is: no renaming.
pub fn build_vocab_run(input: &Path, output: &Path, max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    let prep = PrepOptions {
        rename_identifiers: false,
        ..PrepOptions::default()
    };
    let dataset = load_dataset(input)?;
    let vocab = build_vocab(token_corpus(dataset.samples(), &prep)?, max_size, min_freq)?;
    write_vocab(output, &vocab)?;
    let cfg = RunConfig {
        command: "build-vocab".into(),
        data: Some(path_string(input)),
        prep,
        vocab: VocabSettings {
            max_size,
            min_freq,
            path: None,
        },
        ..RunConfig::default()
    };
    cfg.save(&sidecar_config(output))?;
    Ok(vocab)
}
