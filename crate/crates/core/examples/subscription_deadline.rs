//! Two CHAVs subscribe at different distances from the stop line; only the
//! early one qualifies for cooperation.

use std::collections::BTreeMap;
use std::sync::Arc;

use coopsim::events::Event;
use coopsim::netmodel::{ControllerKind, DemandEntry, EntityKind, Movement, Scenario};
use coopsim::sim::{SimConfig, Simulation};

fn chav(id: &str, lane: &str, pos: f64, time: f64) -> DemandEntry {
    let mut d = DemandEntry::vehicle(id, time, EntityKind::Car, lane);
    d.movement = Some(Movement::Straight);
    d.pos = Some(pos);
    d.speed = Some(13.0);
    d.controller = Some(ControllerKind::Chav);
    d
}

fn main() {
    let mut s = Scenario::default_intersection();
    s.generator = None;
    // "late" appears only 120 m before its stop line, inside the deadline.
    s.demand = vec![chav("early", "E1", 100.0, 0.0), chav("late", "N1", 280.0, 0.0)];
    let config = SimConfig {
        seed: 1,
        duration: 30.0,
        ..SimConfig::default()
    };
    let mut sim = Simulation::new(Arc::new(s), config, &BTreeMap::new());
    for _ in 0..150 {
        sim.step();
    }
    for r in &sim.log {
        if let Event::Subscription { id, distance_to_stop_line, deadline_met } = &r.event {
            println!("{id:>5}: handled {distance_to_stop_line:>5.1} m before the stop line, eligible: {deadline_met}");
        }
    }
    for id in ["early", "late"] {
        if let Some(a) = sim.agent(id) {
            println!("{id:>5}: phase {:?}, deadline met {:?}", a.phase, a.deadline_met);
        }
    }
}
