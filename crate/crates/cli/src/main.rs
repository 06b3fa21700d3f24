use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use shiftpar_core::{Error, ModelPreset};

mod bench;
mod simulate;
mod verify;

/// Tensor, sequence and shift parallel inference over simulated workers.
#[derive(Debug, Parser)]
#[command(name = "shiftpar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a configuration against the single-device reference.
    Verify(verify::VerifyArgs),
    /// Print worker groups, head assignments and the shift head order.
    Topology(TopologyArgs),
    /// Count compute and communication over configuration sweeps.
    Bench(bench::BenchArgs),
    /// Run serving policies over a request trace.
    Simulate(simulate::SimulateArgs),
    /// Write initial weights to a directory.
    Weights(WeightsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Gqa,
    Hex,
}

impl From<Preset> for ModelPreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Tiny => ModelPreset::Tiny,
            Preset::Gqa => ModelPreset::Gqa,
            Preset::Hex => ModelPreset::Hex,
        }
    }
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long, default_value_t = 1)]
    sp: usize,
    #[arg(long, default_value_t = 1)]
    tp: usize,
    /// Model preset; defaults to the first of tiny, gqa, hex that supports
    /// the layout.
    #[arg(long, value_enum)]
    model: Option<Preset>,
    /// Override the preset's KV head count.
    #[arg(long)]
    kv_heads: Option<usize>,
}

#[derive(Debug, Args)]
struct TopologyArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct WeightsArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    model: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Failed,
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Verify(args) => verify::run(&args),
        Command::Topology(args) => {
            let (_, topo) = verify::resolve(&args.config)?;
            print!("{}", topo.dump());
            Ok(Status::Ok)
        }
        Command::Bench(args) => bench::run(&args).map(|()| Status::Ok),
        Command::Simulate(args) => simulate::run(&args).map(|()| Status::Ok),
        Command::Weights(args) => {
            let mc = ModelPreset::from(args.model).config();
            let w = shiftpar_core::Weights::init(&mc, args.seed)?;
            w.save(&args.out)?;
            println!("wrote {} weights (seed {}) to {}", ModelPreset::from(args.model), args.seed, args.out.display());
            Ok(Status::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_) | Error::Unsupported(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
