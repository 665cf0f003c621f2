use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedasync::commands::{self, SimMode};
use fedasync::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "fedasync",
    version,
    about = "Asynchronous federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; beats the config's [output].dir.
    #[arg(short, long, env = "FEDASYNC_OUT")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf), CliError> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| cfg.resolve(&cfg.output.dir));
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Staleness-weighted asynchronous training on the simulated device clock.
    SimulateAsync(Common),
    /// Synchronous FedAvg baseline on the same clock.
    SimulateSync(Common),
    /// Single-machine SGD with the same budget.
    SimulateCentralized(Common),
    /// Parameter server for real client processes.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Overrides [net].bind.
        #[arg(long)]
        bind: Option<String>,
    },
    /// One training client; connects to the server.
    Client {
        #[command(flatten)]
        common: Common,
        /// Which shard of the partition this process trains on.
        #[arg(long)]
        index: usize,
        /// Overrides [net].server.
        #[arg(long)]
        server: Option<String>,
    },
    /// Teacher -> TAs -> student distillation chain.
    Distill(Common),
    /// Finite-difference check of every model's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(short, long, env = "FEDASYNC_OUT")]
        out: Option<PathBuf>,
    },
    /// Async runs over the [sweep] grid of a and beta.
    Sweep(Common),
    /// Convergence probe over the [probe] grid of budgets.
    Probe(Common),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SimulateAsync(c) => sim(&c, SimMode::Async),
        Command::SimulateSync(c) => sim(&c, SimMode::Sync),
        Command::SimulateCentralized(c) => sim(&c, SimMode::Centralized),
        Command::Serve { common, bind } => {
            let (cfg, out) = common.load()?;
            commands::serve(&cfg, bind.as_deref(), &out).map(drop)
        }
        Command::Client {
            common,
            index,
            server,
        } => {
            let (cfg, _) = common.load()?;
            commands::client(&cfg, index, server.as_deref()).map(drop)
        }
        Command::Distill(c) => {
            let (cfg, out) = c.load()?;
            let outcome = commands::distill(&cfg, &out)?;
            for s in &outcome.stages {
                println!(
                    "{:<8} accuracy {:.4}  cumulative {:.3} s",
                    s.role.name(),
                    s.eval_accuracy,
                    s.cumulative_seconds
                );
            }
            Ok(())
        }
        Command::Gradcheck {
            draws,
            seed,
            tolerance,
            out,
        } => commands::gradcheck(draws, seed, tolerance, out.as_deref()).map(drop),
        Command::Sweep(c) => {
            let (cfg, out) = c.load()?;
            commands::sweep(&cfg, &out).map(drop)
        }
        Command::Probe(c) => {
            let (cfg, out) = c.load()?;
            commands::probe(&cfg, &out).map(drop)
        }
    }
}

fn sim(c: &Common, mode: SimMode) -> Result<(), CliError> {
    let (cfg, out) = c.load()?;
    let trace = commands::simulate(&cfg, mode, &out)?;
    print!("{}", trace.summary_text());
    println!("artifacts = {}", Path::new(&out).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
