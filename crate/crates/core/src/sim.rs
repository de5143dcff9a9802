//! The tick loop.
//!
//! Each tick runs, in order: message delivery, the TMS cycle, every CHAV agent
//! in spawn order (their actuation is applied immediately), and finally the
//! physics step. A baseline run skips everything but physics.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{ChavAgent, Command, PayoffParams};
use crate::bus::{Bus, BusConfig, CooperationRecommendation, Endpoint};
use crate::dynamics::{entity_rng, LaneChangeConfig, SafetyStats, SpawnRequest, VehicleKind, World, ZoneRecord};
use crate::events::{Event, LogRecord};
use crate::netmodel::{ControllerKind, EntityKind, Scenario};
use crate::tms::{MonitorEntry, Tms, TmsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    /// Demand is admitted until this time; afterwards the network drains.
    pub duration: f64,
    /// Upper bound on the drain phase.
    pub drain_limit: f64,
    pub seed: u64,
    pub cooperation: bool,
    pub payoff: PayoffParams,
    pub tms: TmsConfig,
    pub bus: BusConfig,
    pub lane_change: LaneChangeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1,
            duration: 3600.0,
            drain_limit: 600.0,
            seed: 1,
            cooperation: true,
            payoff: PayoffParams::default(),
            tms: TmsConfig::default(),
            bus: BusConfig::default(),
            lane_change: LaneChangeConfig::default(),
        }
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub crossings: Vec<ZoneRecord>,
    pub log: Vec<LogRecord>,
    pub safety: SafetyStats,
    pub recommendations: Vec<CooperationRecommendation>,
    pub monitor_log: Vec<MonitorEntry>,
    pub entered_zone: usize,
}

#[derive(Debug)]
pub struct Simulation {
    pub config: SimConfig,
    pub world: World,
    pub bus: Option<Bus>,
    pub tms: Option<Tms>,
    pub agents: Vec<ChavAgent>,
    pub log: Vec<LogRecord>,
    coop_factors: BTreeMap<String, f64>,
}

/// Cooperative factor of a vehicle: the demand override if present, otherwise
/// a uniform draw from the vehicle's own stream.
pub fn coop_factor(seed: u64, id: &str, explicit: Option<f64>) -> f64 {
    explicit.unwrap_or_else(|| entity_rng(seed, id, "coop_factor").random::<f64>())
}

impl Simulation {
    /// Build a run. `controllers` maps passenger-car ids to their controller;
    /// explicit controllers in the demand take precedence, unknown cars are HVs.
    pub fn new(scenario: Arc<Scenario>, config: SimConfig, controllers: &BTreeMap<String, ControllerKind>) -> Self {
        let mut world = World::new(Arc::clone(&scenario), config.seed, config.dt);
        world.lane_change = config.lane_change;
        let mut coop_factors = BTreeMap::new();
        let mut requests = Vec::new();
        for d in scenario.expanded_demand() {
            let vehicle_kind = match d.kind {
                EntityKind::Truck => VehicleKind::Truck,
                EntityKind::Car => match d.controller.or_else(|| controllers.get(&d.id).copied()) {
                    Some(ControllerKind::Chav) => VehicleKind::Chav,
                    _ => VehicleKind::Hv,
                },
                EntityKind::Cyclist | EntityKind::Pedestrian => VehicleKind::Hv,
            };
            if vehicle_kind == VehicleKind::Chav {
                coop_factors.insert(d.id.clone(), coop_factor(config.seed, &d.id, d.coop_factor));
            }
            requests.push(SpawnRequest {
                id: d.id,
                time: d.time,
                kind: d.kind,
                origin: d.origin,
                vehicle_kind,
                movement: d.movement,
                pos: d.pos,
                speed: d.speed,
            });
        }
        world.enqueue(requests);
        let (bus, tms) = if config.cooperation {
            (
                Some(Bus::new(config.bus, config.seed, config.dt)),
                Some(Tms::new(Arc::clone(&scenario), config.tms)),
            )
        } else {
            (None, None)
        };
        Simulation {
            config,
            world,
            bus,
            tms,
            agents: Vec::new(),
            log: Vec::new(),
            coop_factors,
        }
    }

    pub fn agent(&self, id: &str) -> Option<&ChavAgent> {
        self.agents.iter().find(|a| a.id == id)
    }

    fn record(&mut self, tick: u64, t: f64, events: impl IntoIterator<Item = Event>) {
        self.log.extend(events.into_iter().map(|event| LogRecord { tick, t, event }));
    }

    pub fn step(&mut self) {
        let (tick, t) = (self.world.tick, self.world.t);
        if let (Some(bus), Some(tms)) = (self.bus.as_mut(), self.tms.as_mut()) {
            let mut staged = Vec::new();
            bus.deliver(tick, &self.world);
            staged.extend(bus.drain_events());

            let inbox = bus.take_inbox(&Endpoint::Tms);
            tms.step(inbox, &self.world, bus);
            staged.extend(tms.drain_events());
            staged.extend(bus.drain_events());

            for agent in &mut self.agents {
                let inbox = bus.take_inbox(&Endpoint::Vehicle(agent.id.clone()));
                let mut agent_events = Vec::new();
                let commands = agent.step(inbox, &self.world, bus, &mut agent_events);
                staged.extend(agent_events);
                staged.extend(bus.drain_events());
                for c in commands {
                    let applied = match c {
                        Command::RequestLaneChange { target, deadline } => {
                            self.world.request_lane_change(&agent.id, &target, deadline)
                        }
                        Command::SlowDown { target, duration } => self.world.slow_down(&agent.id, target, duration),
                    };
                    debug_assert!(applied.is_ok());
                }
            }
            self.record(tick, t, staged);
        }

        self.world.step();
        let world_events = self.world.drain_events();
        if self.bus.is_some() {
            for e in &world_events {
                match e {
                    Event::Spawn { id, kind: VehicleKind::Chav, .. } => {
                        let fc = self.coop_factors.get(id).copied().unwrap_or(0.0);
                        self.agents.push(ChavAgent::new(id.clone(), fc, self.config.payoff));
                    }
                    Event::Removal { id } => {
                        if let Some(i) = self.agents.iter().position(|a| &a.id == id) {
                            self.agents.remove(i);
                            if let Some(bus) = self.bus.as_mut() {
                                bus.unregister(id);
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        let (tick, t) = (self.world.tick, self.world.t);
        self.record(tick, t, world_events);
    }

    fn moving_vehicles(&self) -> usize {
        self.world.vehicles.iter().filter(|v| v.kind != VehicleKind::Obstacle).count()
    }

    /// Run the demand period, then drain the network without new arrivals.
    pub fn run(mut self) -> RunOutput {
        while self.world.t < self.config.duration - 1e-9 {
            self.step();
        }
        self.world.clear_pending();
        let limit = self.config.duration + self.config.drain_limit;
        while self.moving_vehicles() > 0 && self.world.t < limit - 1e-9 {
            self.step();
        }
        let entered_zone = self
            .log
            .iter()
            .filter(|r| matches!(r.event, Event::ZoneEnter { .. }))
            .count();
        let (recommendations, monitor_log) = match self.tms {
            Some(tms) => (tms.recommendations, tms.monitor_log),
            None => (Vec::new(), Vec::new()),
        };
        RunOutput {
            crossings: self.world.completed,
            log: self.log,
            safety: self.world.safety,
            recommendations,
            monitor_log,
            entered_zone,
        }
    }
}
