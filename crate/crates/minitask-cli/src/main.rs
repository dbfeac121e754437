//! `minitask`: generate data, train, sweep, project, and score from one
//! binary. Every subcommand resolves its configuration the same way
//! (profile defaults, then `--config` file, then flags) and leaves a
//! re-runnable snapshot in its run directory.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::{CommonArgs, RunConfig};
use minitask::train::TrainMode;
use minitask::Result;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "minitask",
    version,
    about = "Multitask fine-tuning, adversarial embedding training, and run analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic three-task corpus as TSV splits.
    GenData(GenDataArgs),
    /// Fine-tune the shared encoder and all three task heads.
    TrainMultitask(TrainMultitaskArgs),
    /// Train the semi-supervised adversarial classifier on sentiment data.
    TrainGan(TrainGanArgs),
    /// Run the label-masking sensitivity sweep and significance matrix.
    Sweep(SweepArgs),
    /// Project an embedding dump to 2-D coordinates.
    Tsne(TsneArgs),
    /// Score a saved checkpoint on the TSV splits.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training examples per task.
    #[arg(long)]
    n: Option<usize>,
    /// Dev examples per task.
    #[arg(long)]
    n_dev: Option<usize>,
}

#[derive(Args)]
struct TrainMultitaskArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// baseline, naive-sum, or pcgrad-paired.
    #[arg(long, value_parser = TrainMode::parse)]
    mode: Option<TrainMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Scale the paraphrase gradient by 1/2 before pairing.
    #[arg(long, value_name = "BOOL")]
    halve_paraphrase: Option<bool>,
}

#[derive(Args)]
struct TrainGanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Fraction of training labels to mask before the run.
    #[arg(long)]
    lambda: Option<f64>,
    /// Condition the generator on class labels.
    #[arg(long, value_name = "BOOL")]
    conditional: Option<bool>,
    /// Hidden layers in both adversarial networks.
    #[arg(long)]
    hidden_depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Leave encoder weights fixed during the run.
    #[arg(long, value_name = "BOOL")]
    freeze_encoder: Option<bool>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Masking fractions, ascending (e.g. 0.0,0.5,0.9).
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    lambdas: Option<Vec<f64>>,
    /// Runs per masking fraction.
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker-thread cap for parallel runs.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct TsneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Embedding JSONL dump to project.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint file to score.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => {
            let mut cfg = RunConfig::load("gen-data", &args.common)?;
            if let Some(n) = args.n {
                cfg.data.train_per_task = n;
            }
            if let Some(n) = args.n_dev {
                cfg.data.dev_per_task = n;
            }
            cfg.finalize()?;
            commands::gen_data(&cfg)
        }
        Command::TrainMultitask(args) => {
            let mut cfg = RunConfig::load("train-multitask", &args.common)?;
            if let Some(mode) = args.mode {
                cfg.train.mode = mode;
            }
            if let Some(epochs) = args.epochs {
                cfg.train.epochs = epochs;
            }
            if let Some(batch) = args.batch_size {
                cfg.optimizer.batch_size = batch;
            }
            if let Some(lr) = args.lr {
                cfg.optimizer.lr = lr;
            }
            if let Some(wd) = args.weight_decay {
                cfg.optimizer.weight_decay = wd;
            }
            if let Some(halve) = args.halve_paraphrase {
                cfg.train.halve_paraphrase = halve;
            }
            cfg.finalize()?;
            commands::train_multitask(&cfg)
        }
        Command::TrainGan(args) => {
            let mut cfg = RunConfig::load("train-gan", &args.common)?;
            if let Some(lambda) = args.lambda {
                cfg.gan.lambda = lambda;
            }
            if let Some(conditional) = args.conditional {
                cfg.gan.conditional = conditional;
            }
            if let Some(depth) = args.hidden_depth {
                cfg.gan.hidden_depth = depth;
            }
            if let Some(epochs) = args.epochs {
                cfg.gan.epochs = epochs;
            }
            if let Some(batch) = args.batch_size {
                cfg.optimizer.batch_size = batch;
            }
            if let Some(freeze) = args.freeze_encoder {
                cfg.gan.freeze_encoder = freeze;
            }
            cfg.finalize()?;
            commands::train_adversarial(&cfg)
        }
        Command::Sweep(args) => {
            let mut cfg = RunConfig::load("sweep", &args.common)?;
            if let Some(lambdas) = args.lambdas {
                cfg.sweep.lambdas = lambdas;
            }
            if let Some(seeds) = args.seeds {
                cfg.sweep.seeds = seeds;
            }
            if let Some(jobs) = args.jobs {
                cfg.sweep.jobs = jobs;
            }
            if let Some(epochs) = args.epochs {
                cfg.gan.epochs = epochs;
            }
            if let Some(batch) = args.batch_size {
                cfg.optimizer.batch_size = batch;
            }
            cfg.finalize()?;
            commands::sweep(&cfg)
        }
        Command::Tsne(args) => {
            let mut cfg = RunConfig::load("tsne", &args.common)?;
            if let Some(input) = args.input {
                cfg.tsne.input = input;
            }
            if let Some(perplexity) = args.perplexity {
                cfg.tsne.perplexity = perplexity;
            }
            if let Some(iters) = args.iters {
                cfg.tsne.iters = iters;
            }
            cfg.finalize()?;
            commands::project(&cfg)
        }
        Command::Eval(args) => {
            let mut cfg = RunConfig::load("eval", &args.common)?;
            if let Some(checkpoint) = args.checkpoint {
                cfg.eval.checkpoint = checkpoint;
            }
            cfg.finalize()?;
            commands::eval(&cfg)
        }
    }
}
