//! `bspde`: batch runner for the numerical experiments.
//!
//! `run` executes a JSON experiment config and writes `record.json`,
//! `table.csv` and `table.md` (plus kind-specific artifacts) to the output
//! directory; `report` merges records into one convergence table; `replay`
//! re-executes a record and checks that every result is bit-identical.

mod config;
mod error;
mod experiments;
mod record;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use error::{io_err, CliError};
use record::{first_difference, merge, RunRecord};

#[derive(Parser)]
#[command(
    name = "bspde",
    version,
    about = "Finite element and neural-control experiments for backward stochastic parabolic equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "BSPDE_THREADS")]
        threads: Option<usize>,
        /// Record that the run must be bit-reproducible. All reductions are
        /// ordered, so results never depend on the thread count.
        #[arg(long)]
        reproducible: bool,
    },
    /// Merge records of one kind into a comparison table.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Print CSV instead of markdown.
        #[arg(long)]
        csv: bool,
    },
    /// Re-execute a record and compare every result bit for bit.
    Replay {
        record: PathBuf,
        #[arg(long, env = "BSPDE_THREADS")]
        threads: Option<usize>,
    },
}

fn init_threads(threads: Option<usize>) -> anyhow::Result<usize> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::InvalidArgument("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(rayon::current_num_threads())
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(io_err(path))
}

fn run(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    reproducible: bool,
) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config).map_err(io_err(config))?;
    let mut cfg = ExperimentConfig::from_json(&text)
        .with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let dir = out
        .or_else(|| cfg.output_dir().cloned())
        .unwrap_or_else(|| PathBuf::from(format!("bspde-runs/{}-{}", cfg.kind(), cfg.seed())));
    let threads = init_threads(threads)?;
    let outcome = experiments::execute(&cfg, threads, reproducible)?;
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let rec = &outcome.record;
    write(&dir, "record.json", rec.to_json().as_bytes())?;
    write(&dir, "table.csv", rec.table.to_csv().as_bytes())?;
    write(&dir, "table.md", rec.table.to_markdown().as_bytes())?;
    for (name, bytes) in &outcome.artifacts {
        write(&dir, name, bytes)?;
    }
    print!("{}", rec.table.to_markdown());
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn report(paths: &[PathBuf], csv: bool) -> anyhow::Result<()> {
    let records = paths
        .iter()
        .map(|p| RunRecord::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let table = merge(&records)?;
    print!(
        "{}",
        if csv {
            table.to_csv()
        } else {
            table.to_markdown()
        }
    );
    Ok(())
}

fn replay(path: &Path, threads: Option<usize>) -> anyhow::Result<()> {
    let recorded = RunRecord::load(path)?;
    let threads = init_threads(threads)?;
    let outcome = experiments::execute(&recorded.config, threads, recorded.reproducible)?;
    if let Some((field, a, b)) =
        first_difference(&recorded.comparable(), &outcome.record.comparable(), "")
    {
        return Err(CliError::Mismatch {
            field,
            recorded: a,
            replayed: b,
        }
        .into());
    }
    println!("replay identical ({} threads)", threads);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            threads,
            reproducible,
        } => run(&config, out, seed, threads, reproducible),
        Command::Report { records, csv } => report(&records, csv),
        Command::Replay { record, threads } => replay(&record, threads),
    }
}
