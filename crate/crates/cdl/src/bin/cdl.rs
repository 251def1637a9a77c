//! Thin command-line front end over the library: `train`, `build`, `eval`
//! and `sweep`, sharing a config file / flag / default resolution scheme.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdl::commands::{cmd_build, cmd_eval, cmd_sweep, cmd_train, parse_delta_grid, SweepMode};
use cdl::config::{resolve, Arch, Overrides};
use cdl::error::{CdlError, Result};

#[derive(Parser)]
#[command(name = "cdl", version, about = "Early-exit convolutional classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; unset flags fall back to the config
/// file and then to built-in defaults.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base topology: table1, table2 or custom.
    #[arg(long)]
    arch: Option<String>,
    /// Topology description file (with --arch custom).
    #[arg(long)]
    spec_file: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Runtime confidence threshold.
    #[arg(long)]
    delta: Option<f64>,
    /// Routing threshold used while building the cascade.
    #[arg(long)]
    delta_train: Option<f64>,
    /// Stage admission threshold (accepts inf and -inf).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Cost-model weight of one multiply-accumulate.
    #[arg(long)]
    w_mac: Option<f64>,
    /// Cost-model weight of one compare.
    #[arg(long)]
    w_compare: Option<f64>,
    /// Cost-model weight of one nonlinearity.
    #[arg(long)]
    w_nonlinearity: Option<f64>,
    /// Directory holding the IDX dataset files (default: $CDL_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory for models, logs and CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Overrides> {
        Ok(Overrides {
            arch: self.arch.as_deref().map(str::parse::<Arch>).transpose()?,
            spec_file: self.spec_file.clone(),
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            delta: self.delta,
            train_delta: self.delta_train,
            epsilon: self.epsilon,
            w_mac: self.w_mac,
            w_compare: self.w_compare,
            w_nonlinearity: self.w_nonlinearity,
            data_dir: self.data_dir.clone(),
            out_dir: self.out.clone(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline network and save it with a training log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build the early-exit cascade on top of a trained baseline.
    Build {
        /// Baseline model produced by `train`.
        #[arg(long, default_value = "out/baseline.cdl")]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a cascade on the test set and emit report.csv / exits.csv.
    Eval {
        /// Cascade model produced by `build`.
        #[arg(long, default_value = "out/cascade.cdl")]
        model: PathBuf,
        /// Charge every input the bare baseline cost, skipping the exits.
        #[arg(long)]
        bypass_exits: bool,
        /// Print one line per input with its exit point and cost.
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Sweep the confidence threshold or the stage count.
    Sweep {
        #[arg(long, default_value = "out/cascade.cdl")]
        model: PathBuf,
        /// Either "delta" or "stages".
        #[arg(long)]
        mode: String,
        /// Threshold grid start:end:step for --mode delta.
        #[arg(long, default_value = "0.3:0.9:0.1")]
        deltas: String,
        /// Largest stage count for --mode stages.
        #[arg(long, default_value_t = 2)]
        max: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { common } => {
            let config = resolve(common.config.as_deref(), &common.overrides()?)?;
            cmd_train(&config)?;
        }
        Command::Build { model, common } => {
            let config = resolve(common.config.as_deref(), &common.overrides()?)?;
            cmd_build(&config, model)?;
        }
        Command::Eval {
            model,
            bypass_exits,
            trace,
            common,
        } => {
            let config = resolve(common.config.as_deref(), &common.overrides()?)?;
            cmd_eval(&config, model, *bypass_exits, *trace)?;
        }
        Command::Sweep {
            model,
            mode,
            deltas,
            max,
            common,
        } => {
            let config = resolve(common.config.as_deref(), &common.overrides()?)?;
            let mode = match mode.as_str() {
                "delta" => SweepMode::Delta {
                    deltas: parse_delta_grid(deltas)?,
                },
                "stages" => SweepMode::Stages { max: *max },
                other => {
                    return Err(CdlError::Config(format!(
                        "unknown sweep mode '{other}' (expected delta or stages)"
                    )))
                }
            };
            cmd_sweep(&config, model, &mode)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.exit_code();
            eprintln!("error: {code}: {err}");
            ExitCode::from(code as u8)
        }
    }
}
