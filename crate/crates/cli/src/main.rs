mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lightnn::trainer::{OptimizerKind, RoundingMode};
use lightnn::ModelVariant;

#[derive(Parser)]
#[command(name = "lightnn", version, about = "Train, pack, run and cost multiplication-free networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant and write checkpoint.json, metrics.csv and run.json.
    Train(TrainArgs),
    /// Finalize a checkpoint and write the packed model.
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and confusion counts of a packed model.
    Eval(EvalArgs),
    /// Storage and energy report for a packed model.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        /// Cost table JSON; the built-in relative table when omitted.
        #[arg(long)]
        cost_table: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// json or csv; taken from the output extension when omitted.
        #[arg(long)]
        format: Option<String>,
    },
    /// Header, layer shapes, storage and weight histogram of a packed model.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Error/energy table with Pareto flags over a directory of runs.
    Compare {
        #[arg(long)]
        metrics_dir: PathBuf,
        #[arg(long)]
        cost_table: Option<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// MNIST directory (IDX files) or a CSV file.
    #[arg(long)]
    data: PathBuf,
    /// CSV label column, by header name or zero-based index; last column by default.
    #[arg(long)]
    label_column: Option<String>,
    /// The CSV file starts with a header row.
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Network preset, or `mlp` for CSV data.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    variant: ModelVariant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epoch (zero-based) at which the learning rate drops tenfold.
    #[arg(long, default_value_t = 40)]
    decay_epoch: usize,
    #[arg(long, value_enum, default_value_t = RoundingArg::Stochastic)]
    rounding: RoundingArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Hidden widths of the `mlp` preset, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    hidden: Vec<usize>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RoundingArg {
    Stochastic,
    Nearest,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

impl From<RoundingArg> for RoundingMode {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::Stochastic => RoundingMode::Stochastic,
            RoundingArg::Nearest => RoundingMode::Nearest,
        }
    }
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Run in fixed point with this many bits instead of floating point.
    #[arg(long)]
    fixed_bits: Option<u32>,
    #[arg(long, requires = "fixed_bits")]
    frac_bits: Option<u32>,
    /// Quantize raw weights to the fixed-point format (needed for conventional models).
    #[arg(long, requires = "fixed_bits")]
    quantize_first: bool,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
