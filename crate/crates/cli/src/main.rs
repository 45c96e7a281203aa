//! `zloss`: build vocabularies, train and evaluate n-gram language models,
//! check loss gradients and benchmark output layers.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 numerical failure.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zloss_core::ErrorClass;

#[derive(Parser, Debug)]
#[command(name = "zloss", version, about = "Z-loss language modelling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Count words in a corpus and write a vocabulary file.
    BuildVocab(BuildVocabArgs),
    /// Train a model; writes config, log, checkpoint and final report to --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or the constant-frequency baseline, on a corpus.
    Eval(EvalArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Time output heads for several class counts and print CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<String>,
    /// Named parameter set applied before the config file (fig1).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train: Option<String>,
    /// Vocabulary file to write.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub max_vocab: Option<String>,
    #[arg(long)]
    pub min_count: Option<String>,
    /// Also write the encoded training set as a binary n-gram cache.
    #[arg(long)]
    pub cache_out: Option<String>,
    #[arg(long)]
    pub context: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub a: Option<String>,
    #[arg(long)]
    pub b: Option<String>,
    #[arg(long)]
    pub context: Option<String>,
    #[arg(long)]
    pub emb_dim: Option<String>,
    /// Comma-separated hidden layer sizes.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub init_scale: Option<String>,
    /// Give the output layer a bias through a constant hidden feature.
    #[arg(long)]
    pub bias: bool,
    #[arg(long)]
    pub clusters: Option<String>,
    #[arg(long)]
    pub refactor_period: Option<String>,
    #[arg(long)]
    pub cond_limit: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub train: Option<String>,
    #[arg(long)]
    pub valid: Option<String>,
    #[arg(long)]
    pub test: Option<String>,
    /// Existing vocabulary; built from --train when absent.
    #[arg(long)]
    pub vocab: Option<String>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub eta: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub kset: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub factor: Option<String>,
    #[arg(long)]
    pub plateau_metric: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    #[arg(long)]
    pub shuffle: Option<String>,
    #[arg(long)]
    pub max_vocab: Option<String>,
    #[arg(long)]
    pub min_count: Option<String>,
    /// Grid over one setting, e.g. `a=0.05,0.1,0.2,0.4`; one run directory per value.
    #[arg(long)]
    pub sweep: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long)]
    pub kset: Option<String>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<String>,
    /// Evaluate a baseline instead of a checkpoint (constant).
    #[arg(long)]
    pub baseline: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Loss kind, comma-separated kinds, or `all`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub trials: Option<String>,
    /// Fixed Z-loss parameters; cycled over a small grid when absent.
    #[arg(long)]
    pub a: Option<String>,
    #[arg(long)]
    pub b: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Reference arithmetic for the differences: dd or f64.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dlist: Option<String>,
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub a: Option<String>,
    #[arg(long)]
    pub b: Option<String>,
    #[arg(long)]
    pub eta: Option<String>,
    #[arg(long)]
    pub repeats: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub epoch_examples: Option<String>,
    /// Skip the whole-model timing.
    #[arg(long)]
    pub output_only: bool,
    /// CSV file; stdout when absent.
    #[arg(long)]
    pub out: Option<String>,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
