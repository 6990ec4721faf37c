//! Command-line harness around the core library: dataset generation,
//! generator pretraining, adapter training, evaluation, axis sweeps, the
//! order-variance protocol, and the cost/parameter analytics.
//!
//! Every run writes its resolved configuration and a metadata sidecar next
//! to its outputs; CSV bodies are deterministic so identical inputs give
//! byte-identical files.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod output;
pub mod runspec;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "mharag",
    version = env!("CARGO_PKG_VERSION"),
    about = "Soft-prompt compression of retrieved exemplars for a small frozen generator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and certify its difficulty oracles.
    Gen(commands::gen::GenCli),
    /// Pretrain the small generator on synthetic text and save theta.
    Pretrain(commands::pretrain::PretrainCli),
    /// Train adapter weights phi against a frozen generator.
    Train(commands::train::TrainCli),
    /// Score a method on a dataset split, with its inference cost.
    Eval(commands::eval::EvalCli),
    /// Vary one axis (k, heads, c, lr) across methods and seeds.
    Sweep(commands::sweep::SweepCli),
    /// Measure score spread under exemplar-order shuffles.
    OrderVariance(commands::order_variance::OrderVarianceCli),
    /// Tabulate the inference cost model; no dataset needed.
    Flops(commands::flops::FlopsCli),
    /// Print trainable-parameter counts across generator widths.
    Params(commands::params::ParamsCli),
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(args) => commands::gen::run(args).map(|_| ()),
        Command::Pretrain(args) => commands::pretrain::run(args).map(|_| ()),
        Command::Train(args) => commands::train::run(args).map(|_| ()),
        Command::Eval(args) => commands::eval::run(args).map(|_| ()),
        Command::Sweep(args) => commands::sweep::run(args).map(|_| ()),
        Command::OrderVariance(args) => commands::order_variance::run(args).map(|_| ()),
        Command::Flops(args) => commands::flops::run(args).map(|_| ()),
        Command::Params(args) => commands::params::run(args).map(|_| ()),
    }
}
