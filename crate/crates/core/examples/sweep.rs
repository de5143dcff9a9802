//! A small CHAV-share sweep with both modes, written to a directory.
//!
//! `cargo run --release --example sweep -- [out-dir]`

use std::path::PathBuf;

use coopsim::harness::{baseline_means, metric_cooperating_vehicles, run_sweep_to, CoopMode, ExperimentConfig};
use coopsim::netmodel::Scenario;

fn main() -> coopsim::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("out/example-sweep"), PathBuf::from);
    let mut scenario = Scenario::default_intersection();
    if let Some(g) = &mut scenario.generator {
        g.duration = 900.0;
    }
    let mut config = ExperimentConfig::new(scenario);
    config.chav_percentages = vec![0, 50, 100];
    config.repetitions = 2;
    config.coop = CoopMode::Both;

    let result = run_sweep_to(&config, &out)?;
    println!("{} runs, outputs in {}", result.runs.len(), out.display());
    for row in metric_cooperating_vehicles(&result) {
        println!("{:>3}% CHAV: {:>3} cooperating vehicles", row.percentage, row.total);
    }
    for (p, m) in baseline_means(&result) {
        println!("{p:>3}% CHAV: baseline mean crossing {m:.2} s");
    }
    Ok(())
}
