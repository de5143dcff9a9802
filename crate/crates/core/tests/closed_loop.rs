//! Closed-loop runs of the cooperative lane change on an otherwise empty
//! intersection: `c1` is stuck behind the parked car on W2, `c2` drives on W1.

mod common;

use common::*;
use coopsim::bus::{Endpoint, EvaluationMessage, Payload, PayloadKind};
use coopsim::events::Event;
use coopsim::game::{Combination, Decision, RejectReason};
use coopsim::sim::Simulation;

const SEED: u64 = CLC_SEED;
const OBSTACLE_REAR: f64 = 335.0;

fn run_for(sim: &mut Simulation, ticks: usize, mut each: impl FnMut(&Simulation)) {
    for _ in 0..ticks {
        sim.step();
        each(sim);
    }
}

fn evaluation_from(sim: &Simulation, id: &str) -> Vec<String> {
    sim.log
        .iter()
        .filter_map(|r| match &r.event {
            Event::MessageSent { message } if message.sender == Endpoint::Vehicle(id.into()) => match &message.payload {
                Payload::Evaluation(e) => Some(serde_json::to_string::<EvaluationMessage>(e).unwrap()),
                _ => None,
            },
            _ => None,
        })
        .collect()
}

#[test]
fn clear_target_lane_executes_and_merges_before_the_obstacle() {
    let mut sim = simulation(clc_scenario(vec![]), SEED);
    let mut merged_at = None;
    run_for(&mut sim, 400, |sim| {
        if let Some(v) = sim.world.vehicle("c1") {
            if v.lane == "W1" && merged_at.is_none() {
                merged_at = Some(v.pos);
            }
        }
    });
    let d = decisions(&sim.log);
    let execute = Decision::Execute(Combination::new(0, 0));
    assert_eq!(d, vec![("c1".into(), execute), ("c2".into(), execute)]);
    let pos = merged_at.expect("c1 changed lanes");
    assert!(pos < OBSTACLE_REAR, "merged at {pos}");
    assert!(sim.log.iter().any(|r| matches!(&r.event,
        Event::LaneChange { id, to, cooperative: true, .. } if id == "c1" && to == "W1")));
}

#[test]
fn helper_slows_down_during_execution() {
    let mut sim = simulation(clc_scenario(vec![]), SEED);
    let mut min_speed = f64::INFINITY;
    run_for(&mut sim, 150, |sim| {
        if let Some(v) = sim.world.vehicle("c2") {
            if sim.world.t > 9.0 {
                min_speed = min_speed.min(v.speed);
            }
        }
    });
    assert!(min_speed < 12.0, "c2 kept {min_speed} m/s");
}

#[test]
fn fast_vehicle_on_target_lane_rejects() {
    let mut sim = simulation(clc_scenario(vec![fast_intruder()]), SEED);
    let mut coop_change = false;
    run_for(&mut sim, 400, |_| {});
    for r in &sim.log {
        if let Event::LaneChange { id, cooperative: true, .. } = &r.event {
            coop_change |= id == "c1";
        }
    }
    let d = decisions(&sim.log);
    assert_eq!(d.len(), 2);
    assert!(d.iter().all(|(_, x)| *x == Decision::Reject(RejectReason::EquilibriumDiffersFromR)), "{d:?}");
    assert!(!coop_change);
}

#[test]
fn lost_evaluation_aborts_both_sides() {
    let mut sim = simulation(clc_scenario(vec![]), SEED);
    sim.bus
        .as_mut()
        .unwrap()
        .force_drop(Endpoint::Vehicle("c2".into()), PayloadKind::Evaluation);
    run_for(&mut sim, 400, |_| {});
    let d = decisions(&sim.log);
    assert!(!d.is_empty());
    assert!(d.iter().all(|(_, x)| *x == Decision::Reject(RejectReason::ProtocolAbort)), "{d:?}");
    assert!(sim.log.iter().any(|r| matches!(&r.event, Event::MessageDropped { .. })));
    assert!(!sim.log.iter().any(|r| matches!(&r.event, Event::LaneChange { cooperative: true, .. })));
}

#[test]
fn evaluation_ignores_the_partners_payoff_parameters() {
    let mut reference = simulation(clc_scenario(vec![]), SEED);
    run_for(&mut reference, 200, |_| {});

    let mut altered = simulation(clc_scenario(vec![]), SEED);
    for _ in 0..200 {
        altered.step();
        if let Some(a) = altered.agents.iter_mut().find(|a| a.id == "c1") {
            a.coop_factor = 0.0;
            a.params.w_safety = 0.9;
            a.params.w_efficiency = 0.1;
            a.params.coop_bonus = 2.0;
        }
    }
    let (ours, theirs) = (evaluation_from(&reference, "c2"), evaluation_from(&altered, "c2"));
    assert!(!ours.is_empty());
    assert_eq!(ours, theirs);
    // The altered vehicle's own half does change.
    assert_ne!(evaluation_from(&reference, "c1"), evaluation_from(&altered, "c1"));
}

#[test]
fn identical_seeds_give_identical_logs() {
    let mut a = simulation(clc_scenario(vec![fast_intruder()]), SEED);
    let mut b = simulation(clc_scenario(vec![fast_intruder()]), SEED);
    run_for(&mut a, 300, |_| {});
    run_for(&mut b, 300, |_| {});
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
}
