//! The cooperative lane change end to end: a CHAV stuck behind a parked car
//! on W2, a helper on W1, the TMS, the bus and both agents in the loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use coopsim::events::Event;
use coopsim::netmodel::{ControllerKind, DemandEntry, EntityKind, Movement, Scenario};
use coopsim::sim::{SimConfig, Simulation};

fn chav(id: &str, lane: &str, pos: f64) -> DemandEntry {
    let mut d = DemandEntry::vehicle(id, 0.0, EntityKind::Car, lane);
    d.movement = Some(Movement::Straight);
    d.pos = Some(pos);
    d.speed = Some(13.0);
    d.controller = Some(ControllerKind::Chav);
    d.coop_factor = Some(1.0);
    d
}

fn main() {
    let mut s = Scenario::default_intersection();
    s.generator = None;
    s.demand = vec![chav("c1", "W2", 150.0), chav("c2", "W1", 135.0)];
    let config = SimConfig {
        seed: 5,
        duration: 60.0,
        ..SimConfig::default()
    };
    let mut sim = Simulation::new(Arc::new(s), config, &BTreeMap::new());

    let mut seen = 0;
    for _ in 0..300 {
        sim.step();
        for r in &sim.log[seen..] {
            match &r.event {
                Event::Subscription { id, distance_to_stop_line, deadline_met } => {
                    println!("{:>5.1}s {id} subscribed {distance_to_stop_line:.0} m before the line (deadline met: {deadline_met})", r.t)
                }
                Event::PhaseChange { id, from, to } => println!("{:>5.1}s {id}: {from:?} -> {to:?}", r.t),
                Event::Decision { id, decision, .. } => println!("{:>5.1}s {id} decides {decision:?}", r.t),
                Event::LaneChange { id, from, to, cooperative } => {
                    let pos = sim.world.vehicle(id).map_or(f64::NAN, |v| v.pos);
                    println!("{:>5.1}s {id} changes {from} -> {to} at {pos:.1} m (cooperative: {cooperative})", r.t)
                }
                _ => {}
            }
        }
        seen = sim.log.len();
    }
    if let Some(tms) = &sim.tms {
        for m in &tms.monitor_log {
            println!("TMS saw recommendation {} predict {:?}", m.rec_id, m.predicted);
        }
    }
}
