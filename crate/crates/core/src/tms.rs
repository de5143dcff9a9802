//! Intersection-side traffic management system.
//!
//! The TMS senses its surroundings, answers subscriptions, spots vehicles
//! about to be blocked by a static obstacle and recommends cooperative lane
//! changes. It never actuates a vehicle: its only outputs are messages and
//! log entries.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bus::{
    Bus, CooperationRecommendation, Endpoint, EvaluationMessage, ManeuverKind, Message, Payload, Recipient,
    SubscriptionRequest, SubscriptionResponse, Track, TrackKind, TrackUpdate,
};
use crate::dynamics::{VehicleKind, World};
use crate::events::Event;
use crate::game::{decide, merge_evaluations, Combination, Decision, Lateral, Longitudinal, PayoffMatrix, Role, Strategy};
use crate::netmodel::{EntityKind, Movement, Scenario, SignalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmsConfig {
    pub sensing_range: f64,
    /// Subscriptions completed at least this far before the stop line qualify.
    pub deadline_distance: f64,
    /// Candidate 1 must be within this distance behind the obstacle.
    pub lookahead: f64,
    /// Admissible offset of candidate 2 relative to candidate 1.
    pub window: (f64, f64),
    pub course_horizon: f64,
    /// A subscriber neither sensed nor heard from for this long is dropped.
    pub silence_timeout: f64,
    /// Negotiations not observed to completion within this many ticks are
    /// closed as partial.
    pub monitor_timeout_ticks: u64,
}

impl Default for TmsConfig {
    fn default() -> Self {
        TmsConfig {
            sensing_range: 150.0,
            deadline_distance: 150.0,
            lookahead: 100.0,
            window: (-30.0, 10.0),
            course_horizon: 60.0,
            silence_timeout: 2.0,
            monitor_timeout_ticks: 20,
        }
    }
}

/// Strategy sets per maneuver and role.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyCatalogue {
    pub entries: BTreeMap<(ManeuverKind, Role), Vec<Strategy>>,
}

impl Default for StrategyCatalogue {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(
            (ManeuverKind::CooperativeLaneChange, Role::First),
            vec![
                Strategy::new("S1.1", Longitudinal::Continue, Lateral::LaneChange),
                Strategy::new("S1.2", Longitudinal::Decelerate, Lateral::Continue),
            ],
        );
        entries.insert(
            (ManeuverKind::CooperativeLaneChange, Role::Second),
            vec![
                Strategy::new("S2.1", Longitudinal::Decelerate, Lateral::Continue),
                Strategy::new("S2.2", Longitudinal::Continue, Lateral::Continue),
            ],
        );
        StrategyCatalogue { entries }
    }
}

impl StrategyCatalogue {
    /// The empty recommendation matrix for `kind`, if both roles are catalogued.
    pub fn matrix(&self, kind: ManeuverKind) -> Option<PayoffMatrix> {
        let rows = self.entries.get(&(kind, Role::First))?;
        let cols = self.entries.get(&(kind, Role::Second))?;
        Some(PayoffMatrix::empty(rows.clone(), cols.clone()))
    }
}

/// The globally preferred cell: lane change supported by a gap-creating
/// deceleration.
pub fn recommended_combination(m: &PayoffMatrix) -> Option<Combination> {
    let row = m.rows.iter().position(|s| s.lateral == Lateral::LaneChange)?;
    let col = m.cols.iter().position(|s| s.longitudinal == Longitudinal::Decelerate)?;
    Some(Combination::new(row, col))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionRecord {
    pub intention: Movement,
    pub destination_lane: String,
    pub subscribed_at: f64,
    pub distance_to_stop_line: f64,
    pub deadline_met: bool,
    pub last_contact: f64,
    pub sensed_once: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SituationalOverview {
    pub t: f64,
    pub tracks: Vec<Track>,
    pub subscriptions: BTreeMap<String, SubscriptionRecord>,
    pub signals: BTreeMap<String, SignalState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub chav1: String,
    pub chav2: String,
    pub obstacle: Track,
    pub target_lane: String,
    pub offset: f64,
}

/// What the TMS saw of one negotiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorEntry {
    pub rec_id: u64,
    pub e1: Option<PayoffMatrix>,
    pub e2: Option<PayoffMatrix>,
    pub matrix: Option<PayoffMatrix>,
    pub predicted: Option<Decision>,
    pub partial: bool,
}

#[derive(Debug, Clone)]
struct Active {
    rec: CooperationRecommendation,
    issued_tick: u64,
    e1: Option<EvaluationMessage>,
    e2: Option<EvaluationMessage>,
}

/// Ground-truth picture of everything within `range` of the stop lines.
/// Static obstacles are always included.
pub fn sense(world: &World, range: f64) -> Vec<Track> {
    let mut tracks = Vec::new();
    for v in &world.vehicles {
        let Ok(lane) = world.scenario.lane(&v.lane) else { continue };
        let kind = match v.kind {
            VehicleKind::Obstacle => TrackKind::Obstacle,
            VehicleKind::Truck => TrackKind::Truck,
            VehicleKind::Chav | VehicleKind::Hv => TrackKind::Car,
        };
        if kind == TrackKind::Obstacle || (v.pos - lane.stop_line_pos).abs() <= range {
            tracks.push(Track {
                id: v.id.clone(),
                kind,
                lane: v.lane.clone(),
                pos: v.pos,
                speed: v.speed,
                length: v.params.length,
            });
        }
    }
    for u in &world.vrus {
        tracks.push(Track {
            id: u.id.clone(),
            kind: if u.kind == EntityKind::Cyclist {
                TrackKind::Cyclist
            } else {
                TrackKind::Pedestrian
            },
            lane: u.path.clone(),
            pos: u.arc_pos,
            speed: u.speed,
            length: 0.0,
        });
    }
    tracks
}

/// Obstructed subscribers paired with a helper on an adjacent lane. Pure in
/// its inputs; each vehicle appears in at most one pair.
pub fn detect_conflicts(overview: &SituationalOverview, scenario: &Scenario, config: &TmsConfig) -> Vec<CandidatePair> {
    let eligible = |id: &str| overview.subscriptions.get(id).is_some_and(|s| s.deadline_met);
    let mut used: BTreeSet<&str> = BTreeSet::new();
    let mut pairs = Vec::new();
    for obstacle in overview.tracks.iter().filter(|t| t.kind == TrackKind::Obstacle) {
        let Ok(lane) = scenario.lane(&obstacle.lane) else { continue };
        let rear = obstacle.pos - obstacle.length;
        let mut firsts: Vec<&Track> = overview
            .tracks
            .iter()
            .filter(|t| {
                t.kind == TrackKind::Car
                    && t.lane == obstacle.lane
                    && t.pos < rear
                    && rear - t.pos <= config.lookahead
                    && eligible(&t.id)
            })
            .collect();
        firsts.sort_by(|a, b| b.pos.total_cmp(&a.pos).then(a.id.cmp(&b.id)));
        for c1 in firsts {
            if used.contains(c1.id.as_str()) {
                continue;
            }
            // Nothing but the obstacle may stand between candidate 1 and it.
            let blocked_by_other = overview
                .tracks
                .iter()
                .any(|t| t.lane == c1.lane && t.pos > c1.pos && t.pos < obstacle.pos && t.id != obstacle.id);
            if blocked_by_other {
                continue;
            }
            let best = [&lane.adjacent_left, &lane.adjacent_right]
                .into_iter()
                .flatten()
                .flat_map(|adj| {
                    overview.tracks.iter().filter(move |t| {
                        t.kind == TrackKind::Car && &t.lane == adj
                    })
                })
                .filter(|t| !used.contains(t.id.as_str()) && eligible(&t.id))
                .map(|t| (t, t.pos - c1.pos))
                .filter(|(_, off)| *off >= config.window.0 && *off <= config.window.1)
                .min_by(|(a, x), (b, y)| x.abs().total_cmp(&y.abs()).then(a.id.cmp(&b.id)));
            if let Some((c2, offset)) = best {
                used.insert(&c1.id);
                used.insert(&c2.id);
                pairs.push(CandidatePair {
                    chav1: c1.id.clone(),
                    chav2: c2.id.clone(),
                    obstacle: obstacle.clone(),
                    target_lane: c2.lane.clone(),
                    offset,
                });
            }
        }
    }
    pairs
}

#[derive(Debug)]
pub struct Tms {
    pub config: TmsConfig,
    pub catalogue: StrategyCatalogue,
    pub overview: SituationalOverview,
    pub recommendations: Vec<CooperationRecommendation>,
    pub monitor_log: Vec<MonitorEntry>,
    scenario: Arc<Scenario>,
    digest: String,
    active: BTreeMap<u64, Active>,
    busy: BTreeSet<String>,
    tried: BTreeSet<(String, String)>,
    engaged: BTreeSet<String>,
    next_rec_id: u64,
    exit_speeds: BTreeMap<String, (f64, u64)>,
    events: Vec<Event>,
}

impl Tms {
    pub fn new(scenario: Arc<Scenario>, config: TmsConfig) -> Self {
        let digest = map_digest(&scenario);
        Tms {
            config,
            catalogue: StrategyCatalogue::default(),
            overview: SituationalOverview::default(),
            recommendations: Vec::new(),
            monitor_log: Vec::new(),
            scenario,
            digest,
            active: BTreeMap::new(),
            busy: BTreeSet::new(),
            tried: BTreeSet::new(),
            engaged: BTreeSet::new(),
            next_rec_id: 0,
            exit_speeds: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    /// Running mean of reported exit speeds per lane.
    pub fn exit_speed(&self, lane: &str) -> Option<f64> {
        self.exit_speeds.get(lane).map(|(sum, n)| sum / *n as f64)
    }

    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    /// One TMS cycle: handle delivered messages, refresh the overview, detect
    /// conflicts and send recommendations.
    pub fn step(&mut self, inbox: Vec<Message>, world: &World, bus: &mut Bus) {
        let t = world.t;
        self.overview.t = t;
        self.overview.signals = self
            .scenario
            .signal_plan
            .groups
            .iter()
            .map(|g| (g.id.clone(), world.signal(&g.id)))
            .collect();
        self.overview.tracks = sense(world, self.config.sensing_range);

        for msg in inbox {
            match msg.payload {
                Payload::SubscriptionRequest(req) => self.handle_subscription(req, world, bus),
                Payload::Evaluation(e) => self.observe(e),
                Payload::TrackUpdate(u) => self.handle_track_update(u, t),
                _ => {}
            }
        }

        let sensed: BTreeSet<&str> = self.overview.tracks.iter().map(|t| t.id.as_str()).collect();
        let silence = self.config.silence_timeout;
        self.overview.subscriptions.retain(|id, s| {
            if sensed.contains(id.as_str()) {
                s.sensed_once = true;
                s.last_contact = t;
            }
            !(s.sensed_once && t - s.last_contact > silence)
        });

        let tick = bus.tick();
        let stale: Vec<u64> = self
            .active
            .iter()
            .filter(|(_, a)| tick.saturating_sub(a.issued_tick) > self.config.monitor_timeout_ticks)
            .map(|(r, _)| *r)
            .collect();
        for rec_id in stale {
            let a = self.active.remove(&rec_id).expect("listed");
            self.close(a, None, None);
        }

        self.recommend(world, bus);
    }

    fn handle_subscription(&mut self, req: SubscriptionRequest, world: &World, bus: &mut Bus) {
        let Some(v) = world.vehicle(&req.vehicle_id) else { return };
        let Ok(distance) = self.scenario.distance_to_stop_line(&v.lane, v.pos) else { return };
        let t = world.t;
        let first = !self.overview.subscriptions.contains_key(&req.vehicle_id);
        let record = self.overview.subscriptions.entry(req.vehicle_id.clone()).or_insert_with(|| SubscriptionRecord {
            intention: req.intention,
            destination_lane: req.destination_lane.clone(),
            subscribed_at: t,
            distance_to_stop_line: distance,
            deadline_met: distance >= self.config.deadline_distance,
            last_contact: t,
            sensed_once: false,
        });
        record.last_contact = t;
        let deadline_met = record.deadline_met;
        if first {
            self.events.push(Event::Subscription {
                id: req.vehicle_id.clone(),
                distance_to_stop_line: distance,
                deadline_met,
            });
        }
        let response = SubscriptionResponse {
            vehicle_id: req.vehicle_id.clone(),
            deadline_met,
            signal_phase: self.overview.signals.clone(),
            signal_course: self.scenario.signal_plan.course(t, self.config.course_horizon),
            digital_map: self.digest.clone(),
            static_obstacles: self.overview.tracks.iter().filter(|t| t.kind == TrackKind::Obstacle).cloned().collect(),
            dynamic_objects: self.overview.tracks.iter().filter(|t| t.kind != TrackKind::Obstacle).cloned().collect(),
        };
        bus.send(
            Endpoint::Tms,
            Recipient::Vehicle(req.vehicle_id),
            Payload::SubscriptionResponse(response),
            world,
        );
    }

    fn handle_track_update(&mut self, u: TrackUpdate, t: f64) {
        let e = self.exit_speeds.entry(u.lane.clone()).or_insert((0.0, 0));
        e.0 += u.speed;
        e.1 += 1;
        if let Some(s) = self.overview.subscriptions.get_mut(&u.vehicle_id) {
            s.last_contact = t;
        }
    }

    fn observe(&mut self, e: EvaluationMessage) {
        let rec_id = e.rec_id;
        let Some(a) = self.active.get_mut(&rec_id) else { return };
        match e.role {
            Role::First => a.e1 = Some(e),
            Role::Second => a.e2 = Some(e),
        }
        if a.e1.is_none() || a.e2.is_none() {
            return;
        }
        let a = self.active.remove(&rec_id).expect("present");
        let (e1, e2) = (a.e1.as_ref().expect("set"), a.e2.as_ref().expect("set"));
        let merged = merge_evaluations(&e1.half, &e2.half).ok();
        let predicted = merged.as_ref().and_then(|d| decide(d, a.rec.recommended).ok());
        self.close(a, merged, predicted);
    }

    fn close(&mut self, a: Active, matrix: Option<PayoffMatrix>, predicted: Option<Decision>) {
        self.busy.remove(&a.rec.chav1);
        self.busy.remove(&a.rec.chav2);
        if predicted.is_some_and(|d| d.is_execute()) {
            self.engaged.insert(a.rec.chav1.clone());
            self.engaged.insert(a.rec.chav2.clone());
        }
        self.monitor_log.push(MonitorEntry {
            rec_id: a.rec.rec_id,
            partial: predicted.is_none(),
            e1: a.e1.map(|e| e.half),
            e2: a.e2.map(|e| e.half),
            matrix,
            predicted,
        });
    }

    fn recommend(&mut self, world: &World, bus: &mut Bus) {
        let kind = ManeuverKind::CooperativeLaneChange;
        let pairs = detect_conflicts(&self.overview, &self.scenario, &self.config);
        for pair in pairs {
            let key = (pair.chav1.clone(), pair.chav2.clone());
            let excluded = |id: &String| self.busy.contains(id) || self.engaged.contains(id);
            if self.tried.contains(&key) || excluded(&pair.chav1) || excluded(&pair.chav2) {
                continue;
            }
            let Some(matrix) = self.catalogue.matrix(kind) else {
                self.events.push(Event::SafetyViolation {
                    id: pair.chav1.clone(),
                    detail: "no catalogue entry for cooperative lane change".into(),
                });
                continue;
            };
            let Some(recommended) = recommended_combination(&matrix) else { continue };
            self.next_rec_id += 1;
            let rec = CooperationRecommendation {
                rec_id: self.next_rec_id,
                chav1: pair.chav1.clone(),
                chav2: pair.chav2.clone(),
                maneuver: kind,
                matrix,
                recommended,
                target_lane: pair.target_lane.clone(),
                obstacle: pair.obstacle.clone(),
                issued_at: world.t,
            };
            self.tried.insert(key);
            self.busy.insert(pair.chav1.clone());
            self.busy.insert(pair.chav2.clone());
            for id in [&pair.chav1, &pair.chav2] {
                bus.send(
                    Endpoint::Tms,
                    Recipient::Vehicle(id.clone()),
                    Payload::CooperationRecommendation(rec.clone()),
                    world,
                );
            }
            self.active.insert(
                rec.rec_id,
                Active {
                    rec: rec.clone(),
                    issued_tick: bus.tick(),
                    e1: None,
                    e2: None,
                },
            );
            self.recommendations.push(rec);
        }
    }
}

/// Hex SHA-256 of the canonical scenario text.
pub fn map_digest(scenario: &Scenario) -> String {
    let text = scenario.to_toml().unwrap_or_default();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
