#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use coopsim::dynamics::{draw_speed_factor, entity_rng, DriverParams};
use coopsim::events::{Event, LogRecord};
use coopsim::game::Decision;
use coopsim::netmodel::{ControllerKind, DemandEntry, EntityKind, Movement, Scenario};
use coopsim::sim::{SimConfig, Simulation};

/// The default intersection with its obstacles but no generated traffic.
pub fn quiet_scenario() -> Scenario {
    let mut s = Scenario::default_intersection();
    s.generator = None;
    s.demand.clear();
    s
}

pub fn car(id: &str, lane: &str, pos: f64, speed: f64, controller: ControllerKind, fc: Option<f64>) -> DemandEntry {
    let mut d = DemandEntry::vehicle(id, 0.0, EntityKind::Car, lane);
    d.movement = Some(Movement::Straight);
    d.pos = Some(pos);
    d.speed = Some(speed);
    d.controller = Some(controller);
    d.coop_factor = fc;
    d
}

/// Obstructed CHAV `c1` on W2 with helper `c2` on W1, both cooperative.
pub fn clc_scenario(extra: Vec<DemandEntry>) -> Scenario {
    let mut s = quiet_scenario();
    s.demand = vec![
        car("c1", "W2", 150.0, 13.0, ControllerKind::Chav, Some(1.0)),
        car("c2", "W1", 135.0, 13.0, ControllerKind::Chav, Some(1.0)),
    ];
    s.demand.extend(extra);
    s
}

pub fn simulation(s: Scenario, seed: u64) -> Simulation {
    let config = SimConfig {
        seed,
        duration: 120.0,
        ..SimConfig::default()
    };
    Simulation::new(Arc::new(s), config, &BTreeMap::new())
}

pub fn decisions(log: &[LogRecord]) -> Vec<(String, Decision)> {
    log.iter()
        .filter_map(|r| match &r.event {
            Event::Decision { id, decision, .. } => Some((id.clone(), *decision)),
            _ => None,
        })
        .collect()
}

/// Seed used for the closed-loop lane-change runs.
pub const CLC_SEED: u64 = 5;

/// An HV id whose drawn speed factor puts it near the top of the HV range.
pub fn fast_hv_id() -> String {
    (0..1000)
        .map(|i| format!("fast{i}"))
        .find(|id| draw_speed_factor(0.1, &mut entity_rng(CLC_SEED, id, "speed_factor")) > 1.15)
        .expect("some id draws a high factor")
}

/// A fast HV closing in on `c2` from 44 m behind just before the
/// recommendation goes out.
pub fn fast_intruder() -> DemandEntry {
    let t0 = 8.0;
    let mut h = car(&fast_hv_id(), "W1", 135.0 + 13.88 * t0 - 44.0, DriverParams::hv().v_max * 1.15, ControllerKind::Hv, None);
    h.time = t0;
    h
}
