use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flextender::harness::{audit, compare, read_trace, run, Scenario};

#[derive(Parser)]
#[command(name = "flextender", version, about = "FlexTender consensus simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario with one seed.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON-lines trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the metrics summary here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run a scenario in FlexTender and EOV mode over seeds 0..K.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Re-check the invariants over a recorded trace.
    Audit {
        #[arg(long)]
        trace: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_LIVENESS: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn write(path: &Path, text: &str) -> Result<(), ExitCode> {
    fs::write(path, text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLEXTENDER_LOG", "warn")).init();
    match try_main(Cli::parse()) {
        Ok(code) | Err(code) => code,
    }
}

fn try_main(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.cmd {
        Cmd::Run { scenario, seed, trace, metrics } => {
            let s = load(&scenario)?;
            log::info!("running {} with seed {seed}", scenario.display());
            let out = run(&s, seed);
            if let Some(p) = &trace {
                write(p, &out.trace_text())?;
            }
            if let Some(p) = &metrics {
                write(p, &out.metrics_json())?;
            }
            let report = out.audit();
            print!("{report}");
            println!(
                "heights={} committed_txs={} throughput={:.1} removals(veto={}, timeout={}) abort_rate={:.3}",
                out.metrics.heights,
                out.metrics.committed_txs,
                out.metrics.throughput,
                out.metrics.removals.veto,
                out.metrics.removals.timeout,
                out.metrics.abort_rate
            );
            if !report.invariant_failures().is_empty() {
                return Ok(ExitCode::from(EXIT_INVARIANT));
            }
            if !out.completed() {
                return Ok(ExitCode::from(EXIT_LIVENESS));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare { scenario, seeds } => {
            let s = load(&scenario)?;
            let c = compare(&s, seeds);
            for (name, m) in [("flextender", &c.flextender), ("eov", &c.eov)] {
                println!(
                    "{name}: runs={} completed={} throughput={:.1} abort_rate={:.3} removals={}",
                    m.runs, m.completed, m.mean_throughput, m.mean_abort_rate, m.removals
                );
            }
            println!("throughput ratio (flextender/eov): {:.3}", c.throughput_ratio());
            if c.flextender.completed < c.flextender.runs || c.eov.completed < c.eov.runs {
                return Ok(ExitCode::from(EXIT_LIVENESS));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Audit { trace } => {
            let file = fs::File::open(&trace).map_err(|e| {
                eprintln!("{}: {e}", trace.display());
                ExitCode::from(EXIT_CONFIG)
            })?;
            let report = read_trace(BufReader::new(file)).and_then(|t| audit(&t)).map_err(|e| {
                eprintln!("{}: {e}", trace.display());
                ExitCode::from(EXIT_INVARIANT)
            })?;
            print!("{report}");
            if !report.invariant_failures().is_empty() {
                return Ok(ExitCode::from(EXIT_INVARIANT));
            }
            if !report.terminated() {
                return Ok(ExitCode::from(EXIT_LIVENESS));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
