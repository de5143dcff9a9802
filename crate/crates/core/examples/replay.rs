//! Re-derive the summary table from an event log, without re-simulating.
//!
//! `cargo run --release --example replay -- out/events.jsonl`
//! Without an argument a short run is simulated first.

use std::path::PathBuf;

use coopsim::harness::{replay, run_sweep_to, write_summary, CoopMode, ExperimentConfig};
use coopsim::netmodel::Scenario;

fn main() -> coopsim::Result<()> {
    let events = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = std::env::temp_dir().join("coopsim-replay-example");
            let mut scenario = Scenario::default_intersection();
            if let Some(g) = &mut scenario.generator {
                g.duration = 300.0;
            }
            let mut config = ExperimentConfig::new(scenario);
            config.chav_percentages = vec![100];
            config.repetitions = 1;
            config.coop = CoopMode::Both;
            run_sweep_to(&config, &dir)?;
            dir.join("events.jsonl")
        }
    };
    let rows = replay(&events)?;
    write_summary(std::io::stdout().lock(), &rows).map_err(|e| coopsim::Error::io("<stdout>", e))
}
