//! Sweep-level checks on a shortened demand period.

use std::collections::BTreeSet;
use std::fs;
use std::process::Command;

use coopsim::harness::{run_sweep, run_sweep_to, write_summary, CoopMode, ExperimentConfig, Mode, SweepResult};
use coopsim::netmodel::Scenario;

fn short_config() -> ExperimentConfig {
    let mut s = Scenario::default_intersection();
    if let Some(g) = &mut s.generator {
        g.duration = 600.0;
    }
    let mut c = ExperimentConfig::new(s);
    c.chav_percentages = vec![0, 60, 100];
    c.repetitions = 1;
    c.seed = 11;
    c.coop = CoopMode::Both;
    c
}

fn sweep() -> SweepResult {
    run_sweep(&short_config()).expect("sweep runs")
}

#[test]
fn zero_percent_runs_are_identical() {
    let r = sweep();
    let zero: Vec<_> = r.runs.iter().filter(|x| x.percentage == 0).collect();
    assert_eq!(zero.len(), 2);
    assert_eq!(zero[0].events_digest, zero[1].events_digest);
    assert_eq!(zero[0].summary, zero[1].summary);
}

#[test]
fn baseline_runs_never_negotiate() {
    let r = sweep();
    for run in r.runs.iter().filter(|x| x.mode == Mode::Baseline) {
        assert!(run.negotiations.is_empty());
        assert_eq!(run.summary.recommendations, 0);
    }
}

#[test]
fn every_vehicle_entering_the_zone_is_recorded() {
    let r = sweep();
    for run in &r.runs {
        assert_eq!(run.crossings.len(), run.entered_zone, "{}", run.label());
        assert_eq!(run.summary.negative_gaps, 0);
        assert_eq!(run.summary.chav_red_crossings, 0);
    }
}

#[test]
fn paired_variations_match_the_id_intersection() {
    let r = sweep();
    for pct in [0, 60, 100] {
        let ids = |mode: Mode| -> BTreeSet<String> {
            r.runs
                .iter()
                .filter(|x| x.percentage == pct && x.mode == mode)
                .flat_map(|x| x.crossings.iter().map(|c| c.vehicle_id.clone()))
                .collect()
        };
        let common: BTreeSet<String> = ids(Mode::Baseline).intersection(&ids(Mode::Cooperative)).cloned().collect();
        let paired: BTreeSet<String> = r
            .variations
            .iter()
            .filter(|v| v.percentage == pct)
            .map(|v| v.vehicle_id.clone())
            .collect();
        assert_eq!(paired, common);
    }
}

#[test]
fn late_subscribers_are_never_recommended() {
    let r = sweep();
    for run in &r.runs {
        for n in &run.negotiations {
            assert!(!run.late_subscriptions.contains(&n.chav1));
            assert!(!run.late_subscriptions.contains(&n.chav2));
        }
    }
}

#[test]
fn outputs_are_reproducible_and_replayable() {
    let config = short_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_sweep_to(&config, a.path()).unwrap();
    run_sweep_to(&config, b.path()).unwrap();
    for name in ["events.jsonl", "negotiations.jsonl", "crossings.csv", "variations.csv", "cooperations.csv", "summary.csv", "boxplots.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
    assert!(!a.path().join(".events").exists());

    let rows = coopsim::harness::replay(&a.path().join("events.jsonl")).unwrap();
    let mut replayed = Vec::new();
    write_summary(&mut replayed, &rows).unwrap();
    assert_eq!(String::from_utf8(replayed).unwrap(), fs::read_to_string(a.path().join("summary.csv")).unwrap());
}

fn coopsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coopsim"))
}

fn scenario_file(dir: &std::path::Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = scenario_file(dir.path(), coopsim::netmodel::DEFAULT_SCENARIO_TOML);
    let ok = coopsim().args(["validate", "--scenario"]).arg(&good).status().unwrap();
    assert_eq!(ok.code(), Some(0));

    let missing = coopsim().args(["validate", "--scenario", "/nonexistent/scenario.toml"]).status().unwrap();
    assert_eq!(missing.code(), Some(2));

    let broken = coopsim::netmodel::DEFAULT_SCENARIO_TOML.replace("cycle_length = 90.0", "cycle_length = 80.0");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, broken).unwrap();
    let invalid = coopsim().args(["validate", "--scenario"]).arg(&bad).status().unwrap();
    assert_eq!(invalid.code(), Some(1));

    let pct = coopsim()
        .args(["run", "--percent", "150", "--reps", "1", "--scenario"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(pct.code(), Some(1));

    let usage = coopsim().args(["run", "--coop", "sometimes"]).status().unwrap();
    assert_eq!(usage.code(), Some(1));
}

#[test]
fn cli_run_and_replay_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let scenario = scenario_file(dir.path(), coopsim::netmodel::DEFAULT_SCENARIO_TOML);
    let status = coopsim()
        .args(["run", "--percent", "0,100", "--reps", "1", "--seed", "3", "--coop", "both", "--duration", "300", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let replayed = coopsim().args(["replay", "--events"]).arg(out.join("events.jsonl")).output().unwrap();
    assert_eq!(replayed.status.code(), Some(0));
    assert_eq!(String::from_utf8(replayed.stdout).unwrap(), fs::read_to_string(out.join("summary.csv")).unwrap());
}
