//! `ecup`: generate / train / eval / predict workflow for entire-chain
//! uplift modeling.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{cmd_eval, cmd_generate, cmd_predict, cmd_train, out_dir, TrainInputs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "ecup", version, about = "Entire-chain uplift modeling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic randomized trial with known treatment effects
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus per-epoch history
    Train(TrainArgs),
    /// Evaluate a checkpoint: AUUC/Qini report, uplift curves, segments
    Eval(EvalArgs),
    /// Write per-row counterfactual predictions and treatment effects
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Named preset: chainbias | neutral
    #[arg(long)]
    preset: String,
    /// Number of rows
    #[arg(long)]
    n: usize,
    /// Number of non-control treatments K
    #[arg(long, default_value_t = 2)]
    treatments: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory (default: $ECUP_OUT_DIR or ./ecup_out)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Schema descriptor JSON
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Training data CSV
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation data CSV (default: a 10% holdout from --data)
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Architecture variant: full | no-tenet | attention-tenet | no-taegate | no-ecenet
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    h_gate: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint JSON from `ecup train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Schema descriptor of the data; its fingerprint must match the
    /// checkpoint (default: the checkpoint's embedded schema)
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Data CSV to evaluate on
    #[arg(long)]
    data: PathBuf,
    /// Also emit a randomized segment-uplift table with this many segments
    #[arg(long)]
    segments: Option<usize>,
    /// Seed for the random segmentation
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Schema descriptor of the data; its fingerprint must match the
    /// checkpoint (default: the checkpoint's embedded schema)
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    // Flags override file values.
    macro_rules! override_opt {
        ($($field:ident),*) => {
            $(if args.$field.is_some() { cfg.$field = args.$field.clone(); })*
        };
    }
    override_opt!(
        schema, variant, d, d_k, heads, h, h_gate, gamma, lambda, lr, batch_size, epochs, seed
    );
    if args.data.is_some() {
        cfg.train_data = args.data.clone();
    }
    if args.valid.is_some() {
        cfg.valid_data = args.valid.clone();
    }
    if args.out.is_some() {
        cfg.out_dir = args.out.clone();
    }
    let schema = cfg
        .schema
        .clone()
        .ok_or_else(|| anyhow::anyhow!("--schema (or `schema` in the config file) is required"))?;
    let data = cfg
        .train_data
        .clone()
        .ok_or_else(|| anyhow::anyhow!("--data (or `train_data` in the config file) is required"))?;
    let inputs = TrainInputs {
        schema,
        data,
        valid: cfg.valid_data.clone(),
        model: cfg.model_config()?,
        train: cfg.train_config()?,
    };
    cmd_train(&inputs, &out_dir(cfg.out_dir.clone()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result: Result<()> = match cli.command {
        Command::Generate(args) => cmd_generate(
            &args.preset,
            args.n,
            args.treatments,
            args.seed,
            &out_dir(args.out),
        ),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => cmd_eval(
            &args.checkpoint,
            args.schema.as_deref(),
            &args.data,
            args.segments,
            args.seed,
            &out_dir(args.out),
        ),
        Command::Predict(args) => cmd_predict(
            &args.checkpoint,
            args.schema.as_deref(),
            &args.data,
            &out_dir(args.out),
        ),
    };
    if let Err(err) = result {
        eprintln!("error: {:#}", err);
        std::process::exit(1);
    }
}
