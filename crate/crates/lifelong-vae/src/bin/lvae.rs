//! Experiment runner CLI. Exit codes: 0 success, 1 runtime failure, 2 usage.

use clap::{Parser, Subcommand, ValueEnum};
use lifelong_vae::cli::{self, ExperimentConfig, ExperimentKind};
use lifelong_vae::data::write_synthetic_idx;
use lifelong_vae::lifelong::Method;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExperimentArg {
    MnistSequential,
    FashionSequential,
    Permuted,
}

impl From<ExperimentArg> for ExperimentKind {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::MnistSequential => ExperimentKind::MnistSequential,
            ExperimentArg::FashionSequential => ExperimentKind::FashionSequential,
            ExperimentArg::Permuted => ExperimentKind::Permuted,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Lifelong,
    Ewc,
    Vanilla,
    Full,
    Upto,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lifelong => Method::Lifelong,
            MethodArg::Ewc => Method::Ewc,
            MethodArg::Vanilla => Method::Vanilla,
            MethodArg::Full => Method::Full,
            MethodArg::Upto => Method::Upto,
        }
    }
}

/// Lifelong generative modeling with a student-teacher VAE.
#[derive(Parser, Debug)]
#[command(name = "lvae", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a sequential experiment and write metrics/summary files.
    Run {
        /// Experiment protocol.
        #[arg(long, value_enum)]
        experiment: ExperimentArg,

        /// Training method.
        #[arg(long, value_enum)]
        method: MethodArg,

        /// Information-gain regularizer weight.
        #[arg(long, default_value_t = 0.01)]
        lambda: f64,

        /// EWC penalty weight.
        #[arg(long, default_value_t = 50.0)]
        gamma: f64,

        #[arg(long, default_value_t = 1e-4)]
        learning_rate: f64,

        #[arg(long, default_value_t = 128)]
        batch_size: usize,

        #[arg(long, default_value_t = 50)]
        max_epochs: usize,

        /// Early-stopping patience in epochs.
        #[arg(long, default_value_t = 10)]
        patience: usize,

        #[arg(long, default_value_t = 7)]
        seed: u64,

        /// Seeded repetitions; metrics report mean and std across them.
        #[arg(long, default_value_t = 1)]
        trials: usize,

        /// Directory with the four IDX files (train/t10k images and labels).
        /// The LVAE_DATA_ROOT environment variable overrides this flag.
        #[arg(long)]
        data_root: Option<PathBuf>,

        #[arg(long)]
        out_dir: PathBuf,

        /// Apply per-class data caps and the reduced hidden width.
        #[arg(long, default_value_t = false)]
        desk_scale: bool,

        /// Feature-extractor checkpoint; trained and saved here if missing.
        #[arg(long)]
        extractor_path: PathBuf,

        /// Also write SVG metric curves.
        #[arg(long, default_value_t = false)]
        emit_plots: bool,
    },

    /// Aggregate metrics files into per-(method, distribution) statistics.
    Summarize {
        /// Metrics files (JSONL) to aggregate.
        #[arg(required = true)]
        files: Vec<PathBuf>,

        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Write a deterministic synthetic corpus as IDX files.
    SynthData {
        #[arg(long)]
        dir: PathBuf,

        #[arg(long, default_value_t = 10)]
        classes: usize,

        #[arg(long, default_value_t = 1000)]
        train_per_class: usize,

        #[arg(long, default_value_t = 200)]
        test_per_class: usize,

        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(args: Args) -> lifelong_vae::Result<()> {
    match args.command {
        Command::Run {
            experiment,
            method,
            lambda,
            gamma,
            learning_rate,
            batch_size,
            max_epochs,
            patience,
            seed,
            trials,
            data_root,
            out_dir,
            desk_scale,
            extractor_path,
            emit_plots,
        } => {
            let data_root = match std::env::var_os("LVAE_DATA_ROOT") {
                Some(v) => {
                    eprintln!("data_root overridden by LVAE_DATA_ROOT");
                    PathBuf::from(v)
                }
                None => data_root.ok_or_else(|| {
                    lifelong_vae::Error::InvalidArgument {
                        name: "data_root",
                        reason: "pass --data-root or set LVAE_DATA_ROOT".into(),
                    }
                })?,
            };
            let config = ExperimentConfig {
                experiment: experiment.into(),
                method: method.into(),
                lambda,
                gamma,
                learning_rate,
                batch_size,
                max_epochs,
                patience,
                seed,
                trials,
                data_root,
                out_dir,
                desk_scale,
                extractor_path,
                emit_plots,
            };
            let out = cli::run(&config)?;
            eprintln!(
                "wrote {} metrics lines to {}",
                out.records.len(),
                out.metrics_path.display()
            );
            eprintln!("summary at {}", out.summary_path.display());
            Ok(())
        }
        Command::Summarize { files, out } => {
            let rows = cli::summarize(&files)?;
            let rendered = serde_json::to_string_pretty(&rows).expect("serializable summary");
            match out {
                Some(path) => std::fs::write(path, rendered)?,
                None => println!("{rendered}"),
            }
            Ok(())
        }
        Command::SynthData {
            dir,
            classes,
            train_per_class,
            test_per_class,
            seed,
        } => {
            write_synthetic_idx(&dir, classes, train_per_class, test_per_class, seed)?;
            eprintln!("wrote synthetic IDX corpus to {}", dir.display());
            Ok(())
        }
    }
}
