//! `posrank`: generate synthetic logs, train and evaluate the CTR variants,
//! benchmark serving latency and allocate slots.
//!
//! Exit codes: 0 success, 1 usage/config, 2 numeric, 3 undefined metric, 4 I/O.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use posrank::model::Variant;
use posrank::Error;

#[derive(Parser)]
#[command(name = "posrank", version, about = "Position-aware CTR models on a synthetic click world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Debug)]
struct Common {
    /// Plain `key = value` config with `[section]` headers.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// One of the eight variant tags, e.g. DPIN or DIN+PosInWide.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a world and write train/test logs plus behavior history.
    Generate(Common),
    /// Train one variant on a generated dataset.
    Train(Common),
    /// AUC and PAUC of a checkpoint on the regular and randomized test sets.
    Evaluate(Common),
    /// Serving latency against candidate count.
    Benchmark(Common),
    /// Greedy eCPM slot allocation, with the exhaustive optimum for reference.
    Allocate(Common),
    /// Finite-difference gradient check of every variant.
    Gradcheck(Common),
    /// Train and evaluate all variants on one generated world.
    #[command(name = "reproduce-table1")]
    ReproduceTable1(Common),
}

fn execute(command: Command) -> posrank::Result<String> {
    let (Command::Generate(c)
    | Command::Train(c)
    | Command::Evaluate(c)
    | Command::Benchmark(c)
    | Command::Allocate(c)
    | Command::Gradcheck(c)
    | Command::ReproduceTable1(c)) = &command;
    let variant = c.variant.as_deref().map(str::parse::<Variant>).transpose()?;
    let flags = run::Overrides { seed: c.seed, variant, out: c.out.clone(), force: c.force };
    let cfg = run::RunConfig::load(&c.config, flags)?;
    match command {
        Command::Generate(_) => run::generate(&cfg),
        Command::Train(_) => run::train(&cfg),
        Command::Evaluate(_) => run::evaluate(&cfg),
        Command::Benchmark(_) => run::benchmark(&cfg),
        Command::Allocate(_) => run::allocate(&cfg),
        Command::Gradcheck(_) => {
            let (report, ok) = run::gradcheck(&cfg)?;
            if ok {
                Ok(report)
            } else {
                print!("{report}");
                Err(Error::numeric(format!("gradient check failed (max relative error >= {})", posrank::pipeline::GRADCHECK_TOLERANCE)))
            }
        }
        Command::ReproduceTable1(_) => run::reproduce_table1(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("posrank: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
