//! `auvit`: generate synthetic data, train, evaluate, cross-validate and ensemble.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use auvit::config::RunConfig;
use auvit::gradcheck::run_suite;
use auvit::pipeline::{self, SplitChoice};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "auvit", version, about = "Frame-level action unit detection: CNN embedding + factorized video transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by commands that build a model from scratch.
#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (model initialization, batch order, data split).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Dataset directory written by `gen-data`; without it the configured synthetic set is built in memory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

impl From<Split> for SplitChoice {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitChoice::Train,
            Split::Val => SplitChoice::Val,
            Split::All => SplitChoice::All,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to <out-dir>/dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Train one model; writes history.csv, checkpoints/ and model.ckpt.
    Train(RunArgs),
    /// Score a checkpoint on a split of its dataset.
    Eval {
        #[arg(long, required = true)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Cross-validate, then score the ensemble of fold models on the held-out split.
    Kfold {
        #[command(flatten)]
        run: RunArgs,
        /// Number of folds (overrides `kfold.k`).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write per-frame 0/1 predictions for every video to <out-dir>/predictions.
    Predict {
        #[arg(long, required = true)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Average several checkpoints' probabilities; scores a split and writes predictions.
    Ensemble {
        #[arg(long, required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every differentiable op and of the micro model.
    Gradcheck,
    /// Re-render the report a `kfold` run left in <out-dir>.
    Report {
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out_dir } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.data.seed = seed;
            }
            cfg.validate()?;
            let (root, videos) = pipeline::gen_data(&cfg, &out_dir)?;
            let frames: usize = videos.iter().map(|v| v.len()).sum();
            println!("wrote {} videos ({frames} frames) to {}", videos.len(), root.display());
        }
        Command::Train(args) => {
            let cfg = run_config(&args)?;
            let run = pipeline::train_command(&cfg, args.data.as_deref(), &args.out_dir, &mut progress)?;
            let loss = run.outcome.history.last_loss().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {loss:.6}", run.outcome.history.records.len());
            if let Some(val) = &run.outcome.val {
                println!("held-out macro-F1 {:.4}", val.macro_f1());
            }
            println!("model: {}", run.model_path.display());
            println!("history: {}", run.history_path.display());
        }
        Command::Eval { checkpoint, data, split } => {
            let scores = pipeline::eval_command(&[checkpoint], data.as_deref(), split.into())?;
            println!("{scores}");
        }
        Command::Kfold { run, k } => {
            let mut cfg = run_config(&run)?;
            if let Some(k) = k {
                cfg.kfold_k = k;
                cfg.validate()?;
            }
            let report = pipeline::kfold_command(&cfg, run.data.as_deref(), &run.out_dir, &mut progress)?;
            print!("{}", pipeline::report_command(&run.out_dir)?);
            if report.scores().is_empty() {
                bail!("every fold failed");
            }
        }
        Command::Predict { checkpoint, data, out_dir } => {
            let files = pipeline::predict_command(&[checkpoint], data.as_deref(), &out_dir)?;
            println!("wrote {} prediction files to {}", files.len(), out_dir.join(pipeline::PREDICTION_DIR).display());
        }
        Command::Ensemble { checkpoints, data, split, out_dir } => {
            let scores = pipeline::eval_command(&checkpoints, data.as_deref(), split.into())?;
            let files = pipeline::predict_command(&checkpoints, data.as_deref(), &out_dir)?;
            println!("{scores}");
            println!("{} members; wrote {} prediction files to {}", checkpoints.len(), files.len(), out_dir.join(pipeline::PREDICTION_DIR).display());
        }
        Command::Gradcheck => {
            let results = run_suite(|c| println!("{c}"))?;
            let failed: Vec<&str> = results.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
            println!("all {} checks within tolerance", results.len());
        }
        Command::Report { out_dir } => {
            let text = pipeline::report_command(&out_dir).with_context(|| format!("no k-fold report in {}", out_dir.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
