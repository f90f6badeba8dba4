//! Subcommand dispatch.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure.
//! Every file a subcommand writes goes under its `--out` directory.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use divtok_core::data::{gen_split, Example, Split, Vocab};
use divtok_core::gradcheck::DEFAULT_STEP;
use divtok_core::model::{Mode, Model};
use divtok_core::train::{evaluate, train, MetricsRecord, TrainError, TrainingState};

use crate::checkpoint::{load_checkpoint, load_training_state, save_checkpoint, save_optimizer};
use crate::config::{parse_config, ConfigError, RunConfig};
use crate::container::FormatError;
use crate::dataset::{read_dataset, write_dataset};
use crate::visualize::{export_attention_maps, VisualizeError};

/// Largest gradient-check error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// File names written under `--out`.
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dtok";
pub const OPTIMIZER_FILE: &str = "checkpoint.dopt";

#[derive(Debug, Parser)]
#[command(name = "divtok", version, about = "Diversity-regularized vision-language tokenization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset split as `<out>/<split>.dtds`.
    GenData(GenDataArgs),
    /// Train a model and write metrics, checkpoint and optimizer state.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Compare backward-pass gradients with finite differences.
    Gradcheck(Common),
    /// Export per-token attention maps for one validation example.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Directory holding `train.dtds` and `validation.dtds`; generated from
    /// the configuration when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Position of the example in the validation split.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] divtok_core::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Visualize(#[from] VisualizeError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Failed(String),
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::defaults(Mode::Image),
    };
    for warning in cfg.warnings() {
        eprintln!("warning: {warning}");
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    }
}

/// The first `count` examples of `split`, read from `<data>/<split>.dtds`
/// when a data directory is given and generated otherwise.
fn load_split(cfg: &RunConfig, data: Option<&Path>, split: Split, count: usize, vocab: &Vocab) -> Result<Vec<Example>, CliError> {
    match data {
        Some(dir) => {
            let path = dir.join(format!("{}.dtds", split_name(split)));
            let ds = read_dataset(&path, vocab)?;
            if ds.mode != cfg.model.mode {
                return Err(CliError::Failed(format!("{} holds {:?} data but the model expects {:?}", path.display(), ds.mode, cfg.model.mode)));
            }
            Ok(ds.examples)
        }
        None => Ok(gen_split(cfg.data.scene, split, cfg.data.seed, count, vocab)?),
    }
}

fn metrics_text(records: &[MetricsRecord]) -> String {
    let mut text = format!("{}\n", MetricsRecord::HEADER);
    for r in records {
        text.push_str(&format!("{r}\n"));
    }
    text
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::defaults(args.mode),
    };
    cfg.set_seed(args.seed);
    if cfg.model.mode != args.mode {
        return Err(CliError::Failed(format!("--mode {:?} disagrees with the configured mode {:?}", args.mode, cfg.model.mode)));
    }
    let vocab = Vocab::grammar();
    let split = args.split.split();
    let examples = gen_split(cfg.data.scene, split, args.seed, args.count, &vocab)?;
    create_dir(&args.out)?;
    let path = args.out.join(format!("{}.dtds", split_name(split)));
    write_dataset(&path, args.mode, &examples)?;
    println!("{}", path.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let vocab = Vocab::grammar();
    let data = args.data.as_deref();
    let train_set = load_split(&cfg, data, Split::Train, cfg.data.train_examples, &vocab)?;
    let val_set = load_split(&cfg, data, Split::Validation, cfg.data.val_examples, &vocab)?;
    let (model, params) = Model::new(cfg.model.clone())?;
    let state = TrainingState::new(params, cfg.model.clone(), cfg.train);
    create_dir(&args.out)?;

    println!("{}", MetricsRecord::HEADER);
    let mut records = Vec::new();
    let outcome = train(&model, state, &train_set, &val_set, &vocab, |r| {
        println!("{r}");
        let _ = io::stdout().flush();
        records.push(*r);
    });
    let (state, result) = match outcome {
        Ok((state, _)) => (state, Ok(())),
        Err(TrainError::Diverged { step, cause, last_good }) => {
            (*last_good, Err(CliError::Failed(format!("training diverged at step {step}: {cause}; saved the last finite state"))))
        }
        Err(e) => return Err(e.into()),
    };
    write_text(&args.out.join(METRICS_FILE), &metrics_text(&records))?;
    save_checkpoint(&args.out.join(CHECKPOINT_FILE), &state.params)?;
    save_optimizer(&args.out.join(OPTIMIZER_FILE), &state)?;
    result
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let vocab = Vocab::grammar();
    let (model, _) = Model::new(cfg.model.clone())?;
    let optimizer = args.checkpoint.with_extension("dopt");
    let (params, step) = if optimizer.exists() {
        let state = load_training_state(&args.checkpoint, &optimizer, cfg.model.clone(), cfg.train)?;
        (state.params, state.step)
    } else {
        (load_checkpoint(&args.checkpoint)?, 0)
    };
    model.check_store(&params)?;
    let val_set = load_split(&cfg, args.data.as_deref(), Split::Validation, cfg.data.val_examples, &vocab)?;
    let report = evaluate(&model, &params, &val_set, &vocab, cfg.train.empty_tau)?;
    let record = MetricsRecord::from_report(step, &report);
    println!("{}\n{record}", MetricsRecord::HEADER);
    create_dir(&args.out)?;
    write_text(&args.out.join(METRICS_FILE), &metrics_text(&[record]))
}

fn run_gradcheck(common: Common) -> Result<(), CliError> {
    let cfg = load_config(&common)?;
    let vocab = Vocab::grammar();
    let (model, params) = Model::new(cfg.model.clone())?;
    let examples = gen_split(cfg.data.scene, Split::Train, cfg.data.seed, 2, &vocab)?;
    let batch: Vec<&Example> = examples.iter().collect();
    let worst = model.gradient_check(&params, &batch, DEFAULT_STEP)?;
    println!("max relative error {worst:.3e} over {} parameters", params.num_elements());
    if worst <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:.0e}")))
    }
}

fn run_visualize(args: VisualizeArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    let vocab = Vocab::grammar();
    let (model, _) = Model::new(cfg.model.clone())?;
    let params = load_checkpoint(&args.checkpoint)?;
    let examples = load_split(&cfg, args.data.as_deref(), Split::Validation, args.index + 1, &vocab)?;
    let example = examples
        .get(args.index)
        .ok_or_else(|| CliError::Failed(format!("no example at index {} ({} available)", args.index, examples.len())))?;
    create_dir(&args.out)?;
    println!("question: {}\nanswer: {}", example.question, example.answer);
    for path in export_attention_maps(&model, &params, example, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(common) => run_gradcheck(common),
        Command::Visualize(args) => run_visualize(args),
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
