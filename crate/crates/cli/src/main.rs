use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qrn::cell::ScanMode;
use qrn::{Precision, QrnError};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "qrn", version, about = "Train and inspect Query-Reduction Networks on bAbI tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub scan: Option<ScanMode>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding the bAbI task files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task: u32,
    #[arg(long, value_enum, default_value_t = Kind::Qa)]
    pub kind: Kind,
    /// Use the out-of-vocabulary dialog test set.
    #[arg(long)]
    pub oov: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Qa,
    Dialog,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a task and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the test error of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print update and reset gate values for test examples.
    Trace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test example index.
        #[arg(long, conflicts_with = "contains")]
        example: Option<usize>,
        /// Trace every test example whose question contains this text.
        #[arg(long)]
        contains: Option<String>,
        /// Full-precision output instead of two decimals.
        #[arg(long)]
        machine: bool,
    },
    /// Time the sequential and parallel recurrence paths.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 50)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
    },
    /// Check model gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Story length of the random example.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write synthetic task files in the bAbI formats.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long, value_enum, default_value_t = Kind::Qa)]
        kind: Kind,
        #[arg(long, default_value_t = 1000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// 1 usage/config/input, 2 I/O and parsing, 3 numeric checks.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<QrnError>() {
        Some(QrnError::Io { .. } | QrnError::Parse { .. } | QrnError::Format(_)) => 2,
        Some(QrnError::Numeric(_) | QrnError::Determinism(_)) => 3,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { common, data, out } => commands::train(&common, &data, &out),
        Command::Eval {
            common,
            data,
            checkpoint,
        } => commands::eval(&common, &data, &checkpoint),
        Command::Trace {
            common,
            data,
            checkpoint,
            example,
            contains,
            machine,
        } => commands::trace(&common, &data, &checkpoint, example, contains.as_deref(), machine),
        Command::Bench {
            common,
            steps,
            hidden,
            batch,
            repeats,
        } => commands::bench(&common, steps, hidden, batch, repeats),
        Command::Gradcheck {
            common,
            steps,
            tolerance,
        } => commands::gradcheck(&common, steps, tolerance),
        Command::Synth {
            out,
            task,
            kind,
            train,
            test,
            seed,
        } => commands::synth(&out, task, kind, train, test, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
