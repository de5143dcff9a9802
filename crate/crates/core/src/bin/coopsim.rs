use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coopsim::harness::{replay, run_sweep_to, write_summary, CoopMode, ExperimentConfig};
use coopsim::netmodel::load_scenario;
use coopsim::Error;

#[derive(Parser)]
#[command(name = "coopsim", version, about = "Cooperative lane-change intersection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a CHAV-share sweep and write CSV/JSONL outputs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated CHAV percentages.
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90,100")]
        percent: Vec<u32>,
        #[arg(long, default_value_t = 10)]
        reps: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// on, off or both
        #[arg(long, default_value = "both")]
        coop: CoopMode,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        dt: Option<f64>,
        /// Demand period in seconds (default: the scenario generator's).
        #[arg(long)]
        duration: Option<f64>,
        /// Scale demand to 1920 vehicles and 306 VRUs per hour.
        #[arg(long)]
        full: bool,
    },
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Re-derive the summary table from an event log.
    Replay {
        #[arg(long)]
        events: PathBuf,
    },
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Io { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            scenario,
            percent,
            reps,
            seed,
            coop,
            out,
            dt,
            duration,
            full,
        } => {
            let mut config = ExperimentConfig::new(load_scenario(&scenario)?);
            if full {
                config = config.full();
            }
            config.chav_percentages = percent;
            config.repetitions = reps;
            config.seed = seed;
            config.coop = coop;
            if let Some(dt) = dt {
                config.sim.dt = dt;
            }
            if let Some(d) = duration {
                config.sim.duration = d;
            }
            let result = run_sweep_to(&config, &out)?;
            println!("{} runs written to {}", result.runs.len(), out.display());
        }
        Command::Validate { scenario } => {
            let s = load_scenario(&scenario)?;
            println!("{}: ok ({} lanes, {} demand entries)", s.name, s.lanes.len(), s.expanded_demand().len());
        }
        Command::Replay { events } => {
            let rows = replay(&events)?;
            write_summary(std::io::stdout().lock(), &rows).map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are validation errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
