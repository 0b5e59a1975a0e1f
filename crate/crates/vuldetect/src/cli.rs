//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use vuldetect_core::codeprep::DEFAULT_CONTEXT;
use vuldetect_core::data::Unit;

use crate::config::{env_seed, RunConfig, SEED_ENV};
use crate::error::{Error, Result};
use crate::io::canonical_json;
use crate::pipeline::{
    build_vocab_run, distill_run, evaluate_run, predict_run, preprocess_run, train_teacher_run, PreprocessArgs,
    RunOutput, WallClock,
};
use crate::report::Format;

#[derive(Debug, Parser)]
#[command(
    name = "vuldetect",
    version,
    about = "Train, distill and apply source-code vulnerability classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UnitArg {
    Function,
    Slice,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Strip comments, optionally cut slices, and normalize a dataset.
    Preprocess {
        #[arg(long, value_name = "F")]
        input: PathBuf,
        #[arg(long, value_name = "F")]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "function")]
        unit: UnitArg,
        #[arg(long)]
        rename_identifiers: bool,
        /// Known-API names, one per line.
        #[arg(long, value_name = "F")]
        api_list: Option<PathBuf>,
        /// Lines of context around each slice anchor.
        #[arg(long, value_name = "N", default_value_t = DEFAULT_CONTEXT)]
        context: usize,
    },
    /// Build a token vocabulary from a dataset.
    BuildVocab {
        #[arg(long, value_name = "F")]
        input: PathBuf,
        #[arg(long, value_name = "F")]
        output: PathBuf,
        #[arg(long, value_name = "N", default_value_t = 10_000)]
        max_size: usize,
        #[arg(long, value_name = "N", default_value_t = 1)]
        min_freq: usize,
    },
    /// Train a model on hard labels.
    TrainTeacher {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        #[arg(long, value_name = "F")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Distill teacher checkpoints into a student.
    Distill {
        #[arg(long, value_name = "F")]
        config: PathBuf,
        #[arg(long, value_name = "F[,F...]", value_delimiter = ',', required = true)]
        teachers: Vec<PathBuf>,
        #[arg(long, value_name = "F")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled dataset.
    Evaluate {
        #[arg(long, value_name = "F")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "F")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
    /// Classify one source file.
    Predict {
        #[arg(long, value_name = "F")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "F")]
        code: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 for usage errors, 2 for failures.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn existing(flag: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("--{flag}: no such file {}", path.display())))
    }
}

fn load_config(path: &Path, stderr: &mut dyn Write) -> Result<RunConfig> {
    existing("config", path)?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = env_seed()? {
        let _ = writeln!(stderr, "{SEED_ENV}={seed} overrides every seed in {}", path.display());
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn summarize(run: &RunOutput, out: &Path, stdout: &mut dyn Write) {
    let r = &run.test_report;
    let best = run.log.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string());
    let _ = writeln!(
        stdout,
        "best epoch {best}; test accuracy {:.4}, f1 {:.4} on {} samples; outputs in {}",
        r.accuracy,
        r.f1,
        r.n,
        out.display()
    );
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match command {
        Command::Preprocess {
            input,
            output,
            unit,
            rename_identifiers,
            api_list,
            context,
        } => {
            existing("input", &input)?;
            if let Some(p) = &api_list {
                existing("api-list", p)?;
            }
            let args = PreprocessArgs {
                unit: match unit {
                    UnitArg::Function => Unit::Function,
                    UnitArg::Slice => Unit::Slice,
                },
                rename_identifiers,
                api_list,
                context,
            };
            let n = preprocess_run(&input, &output, &args)?;
            let _ = writeln!(stdout, "wrote {n} samples to {}", output.display());
        }
        Command::BuildVocab {
            input,
            output,
            max_size,
            min_freq,
        } => {
            existing("input", &input)?;
            let vocab = build_vocab_run(&input, &output, max_size, min_freq)?;
            let _ = writeln!(stdout, "wrote {} tokens to {}", vocab.len(), output.display());
        }
        Command::TrainTeacher { config, data, out } => {
            let cfg = load_config(&config, stderr)?;
            existing("data", &data)?;
            let run = train_teacher_run(&cfg, &data, &out, &WallClock::start())?;
            summarize(&run, &out, stdout);
        }
        Command::Distill {
            config,
            teachers,
            data,
            out,
        } => {
            let cfg = load_config(&config, stderr)?;
            for t in &teachers {
                existing("teachers", t)?;
            }
            existing("data", &data)?;
            let run = distill_run(&cfg, &teachers, &data, &out, &WallClock::start())?;
            summarize(&run, &out, stdout);
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            format,
        } => {
            existing("checkpoint", &checkpoint)?;
            existing("data", &data)?;
            let format = match format {
                FormatArg::Text => Format::Text,
                FormatArg::Json => Format::Json,
            };
            let (_, rendered) = evaluate_run(&checkpoint, &data, &out, format)?;
            let _ = write!(stdout, "{rendered}");
        }
        Command::Predict { checkpoint, code } => {
            existing("checkpoint", &checkpoint)?;
            existing("code", &code)?;
            let p = predict_run(&checkpoint, &code)?;
            let _ = writeln!(stdout, "{}", canonical_json(&p)?);
        }
    }
    Ok(())
}
