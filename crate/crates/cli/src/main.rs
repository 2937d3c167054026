//! `eco`: generate synthetic tasks, train and evaluate prompt ensembles, run
//! parameter-parity sweeps.
//!
//! Exit codes: 0 on success, 1 on user error (bad flags, missing files,
//! invalid configurations), 2 on internal or data errors.

mod commands;
mod parse;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use eco_core::encoder::EncoderConfig;

#[derive(Debug, Parser)]
#[command(name = "eco", version, about = "Prompt-ensemble context optimization for frozen text encoders")]
struct Cli {
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true, env = "ECO_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a teacher-prompt synthetic task: banks, encoder weights, teacher record.
    GenSynth(GenSynthArgs),
    /// Train a D x N context ensemble on a few-shot split.
    Train(TrainArgs),
    /// Print top-1 accuracy (percent) of a checkpoint or prototype file.
    Eval(EvalArgs),
    /// Run the parameter-parity grid over shots and seeds.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Precompute the averaged class features of a checkpoint.
    ExportPrototypes(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Number of classes K (at least 2).
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Encoder dimensions: `toy` with optional `key=value` overrides
    /// (layers, heads, width, output_dim, max_positions, vocab_size).
    #[arg(long, default_value = "toy", value_parser = parse::dim_config)]
    pub dim_config: EncoderConfig,
    /// Standard deviation of the feature noise.
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory receiving train.bank, test.bank, encoder.weights, teacher.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Encoder weights file.
    #[arg(long)]
    pub weights: PathBuf,
    /// Embedding bank to sample the few-shot split from.
    #[arg(long)]
    pub train_bank: PathBuf,
    /// Examples per class.
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Number of prompts D.
    #[arg(long, default_value_t = 4)]
    pub d_prompts: usize,
    /// Context tokens per prompt N.
    #[arg(long, default_value_t = 4)]
    pub n_ctx: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Peak learning rate; the warmup rate is capped at this value.
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    /// Mini-batch size [default: min(32, K x shots)].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Context budget M; when given, D x N must equal it.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss log [default: <out>.loss.csv].
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "prototypes"])))]
pub struct EvalArgs {
    /// Encoder weights file (needed with --checkpoint; checked against
    /// --prototypes when given).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Context checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prototype file to evaluate.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// Test embedding bank.
    #[arg(long)]
    pub test_bank: PathBuf,
    /// Also write the result as a JSON record.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub train_bank: PathBuf,
    #[arg(long)]
    pub test_bank: PathBuf,
    /// Comma-separated DxN cells.
    #[arg(long, default_value = "16x1,8x2,4x4,2x8,1x16", value_parser = parse::grid)]
    pub grid: parse::Grid,
    /// Comma-separated shot counts.
    #[arg(long, default_value = "1,2,4,8,16", value_delimiter = ',')]
    pub shots: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Context budget M every cell must match.
    #[arg(long, default_value_t = 16)]
    pub budget: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    /// Dataset label used in the report.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// JSON report path; the table, series and timing files are written next
    /// to it.
    #[arg(long)]
    pub out_report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "toy", value_parser = parse::dim_config)]
    pub dim_config: EncoderConfig,
    /// Comma-separated seeds, each checked independently.
    #[arg(long, default_value = "1", value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = eco_core::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bank whose class table names the prototypes' classes.
    #[arg(long)]
    pub class_bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.into()).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match &cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::ExportPrototypes(a) => commands::export_prototypes(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
