//! Discrete-time microscopic motion.
//!
//! Longitudinal control is a Krauss-style safe-speed model with dawdling.
//! Lanes are updated front to back so every follower reacts to its leader's
//! already-advanced state; together with a displacement cap this makes
//! rear-end collisions impossible by construction.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::events::Event;
use crate::netmodel::{signal_state, Approach, EntityKind, Movement, Scenario, SignalState};
use crate::{Error, Result};

pub const KMH: f64 = 1.0 / 3.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    pub v_max: f64,
    pub speed_deviation: f64,
    pub imperfection: f64,
    pub reaction_time: f64,
    pub accel: f64,
    pub decel: f64,
    pub min_gap: f64,
    pub length: f64,
}

impl DriverParams {
    pub fn chav() -> Self {
        DriverParams {
            v_max: 50.0 * KMH,
            speed_deviation: 0.0,
            imperfection: 0.1,
            reaction_time: 0.6,
            accel: 2.6,
            decel: 4.5,
            min_gap: 2.5,
            length: 5.0,
        }
    }

    pub fn hv() -> Self {
        DriverParams {
            v_max: 60.0 * KMH,
            speed_deviation: 0.1,
            imperfection: 0.5,
            reaction_time: 1.0,
            ..DriverParams::chav()
        }
    }

    /// Trucks always run the human driver model.
    pub fn truck() -> Self {
        DriverParams {
            v_max: 50.0 * KMH,
            accel: 1.3,
            length: 12.0,
            ..DriverParams::hv()
        }
    }

    pub fn obstacle() -> Self {
        DriverParams {
            v_max: 0.0,
            speed_deviation: 0.0,
            imperfection: 0.0,
            ..DriverParams::chav()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.v_max >= 0.0
            && self.accel > 0.0
            && self.decel > 0.0
            && self.min_gap >= 0.0
            && (0.0..=1.0).contains(&self.imperfection)
            && self.reaction_time > 0.0
            && self.length > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation("driver parameters", format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Chav,
    Hv,
    Truck,
    Obstacle,
}

impl VehicleKind {
    pub fn params(self) -> DriverParams {
        match self {
            VehicleKind::Chav => DriverParams::chav(),
            VehicleKind::Hv => DriverParams::hv(),
            VehicleKind::Truck => DriverParams::truck(),
            VehicleKind::Obstacle => DriverParams::obstacle(),
        }
    }
}

/// A commanded speed ceiling ramping linearly from `from` to `to`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowDown {
    pub from: f64,
    pub to: f64,
    pub steps: u32,
    pub done: u32,
}

impl SlowDown {
    pub fn new(from: f64, to: f64, duration: f64, dt: f64) -> Self {
        let steps = ((duration / dt).round() as u32).max(1);
        SlowDown { from, to, steps, done: 0 }
    }

    /// Ceiling for the next step, or `None` once the ramp is over.
    pub fn next_ceiling(&self) -> Option<f64> {
        (self.done < self.steps).then(|| {
            let k = f64::from(self.done + 1) / f64::from(self.steps);
            self.from + (self.to - self.from) * k
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingLaneChange {
    pub target: String,
    pub deadline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: String,
    pub kind: VehicleKind,
    pub approach: Approach,
    pub lane: String,
    pub pos: f64,
    pub speed: f64,
    pub speed_factor: f64,
    pub params: DriverParams,
    pub destination: Movement,
    pub slow_down: Option<SlowDown>,
    pub pending_lane_change: Option<PendingLaneChange>,
    pub spawned_at: f64,
    pub zone_enter: Option<f64>,
    /// Spawn order; ties on position are broken by it.
    pub seq: u64,
}

impl VehicleState {
    pub fn desired_speed(&self) -> f64 {
        self.speed_factor * self.params.v_max
    }

    pub fn rear(&self) -> f64 {
        self.pos - self.params.length
    }

    pub fn is_obstacle(&self) -> bool {
        self.kind == VehicleKind::Obstacle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VruState {
    pub id: String,
    pub kind: EntityKind,
    pub path: String,
    pub arc_pos: f64,
    pub speed: f64,
}

/// Something a vehicle must not run into: a vehicle, a static obstacle, a
/// stop line or an occupied conflict area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveLeader {
    /// Free space ahead, already net of any standstill distance.
    pub gap: f64,
    pub speed: f64,
}

impl EffectiveLeader {
    pub fn stationary(gap: f64) -> Self {
        EffectiveLeader { gap, speed: 0.0 }
    }
}

/// Highest speed from which the follower can still stop behind a leader that
/// brakes at `decel`.
pub fn safe_speed(gap: f64, v_leader: f64, decel: f64, tau: f64) -> f64 {
    let bt = decel * tau;
    (-bt + (bt * bt + v_leader * v_leader + 2.0 * decel * gap).sqrt()).max(0.0)
}

/// Next speed of `v` given its effective leaders and an optional commanded
/// ceiling. Dawdling subtracts up to `σ·a·Δt`.
pub fn follow_step<R: Rng>(
    v: &VehicleState,
    leaders: &[EffectiveLeader],
    ceiling: Option<f64>,
    dt: f64,
    rng: &mut R,
) -> f64 {
    let p = &v.params;
    let mut v_des = v.desired_speed().min(v.speed + p.accel * dt);
    for l in leaders {
        v_des = v_des.min(safe_speed(l.gap.max(0.0), l.speed, p.decel, p.reaction_time));
    }
    if let Some(c) = ceiling {
        v_des = v_des.min(c.max(0.0));
    }
    let u: f64 = rng.random();
    (v_des - p.imperfection * p.accel * dt * u).max(0.0)
}

/// Deterministic per-entity generator, independent of spawn order.
pub fn entity_rng(seed: u64, id: &str, salt: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.update([0u8]);
    h.update(salt.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// `Normal(1, δ)` clipped to `[1 − 2δ, 1 + 2δ]`; exactly 1 for `δ = 0`.
pub fn draw_speed_factor<R: Rng>(deviation: f64, rng: &mut R) -> f64 {
    if deviation <= 0.0 {
        return 1.0;
    }
    let n = Normal::new(1.0, deviation).expect("positive deviation");
    n.sample(rng).clamp(1.0 - 2.0 * deviation, 1.0 + 2.0 * deviation)
}

/// A vehicle or VRU waiting to enter the world.
#[derive(Debug, Clone, PartialEq)]
pub struct SpawnRequest {
    pub id: String,
    pub time: f64,
    pub kind: EntityKind,
    pub origin: String,
    pub vehicle_kind: VehicleKind,
    pub movement: Option<Movement>,
    pub pos: Option<f64>,
    pub speed: Option<f64>,
}

/// A completed pass through the measurement zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRecord {
    pub id: String,
    pub kind: VehicleKind,
    pub approach: Approach,
    pub t_enter: f64,
    pub t_exit: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyStats {
    pub negative_gaps: u64,
    pub chav_red_crossings: u64,
    pub other_red_crossings: u64,
    pub ticks_checked: u64,
}

/// Gap-acceptance tuning for uncoordinated lane changes around obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeConfig {
    /// A vehicle this close behind a static obstacle looks for a gap.
    pub blocked_lookahead: f64,
}

impl Default for LaneChangeConfig {
    fn default() -> Self {
        LaneChangeConfig {
            blocked_lookahead: 30.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub t: f64,
    pub tick: u64,
    pub dt: f64,
    pub scenario: Arc<Scenario>,
    pub vehicles: Vec<VehicleState>,
    pub vrus: Vec<VruState>,
    pub lane_change: LaneChangeConfig,
    pub safety: SafetyStats,
    pub completed: Vec<ZoneRecord>,
    pub removed: Vec<String>,
    /// Events of the current tick; drained by the caller.
    pub events: Vec<Event>,
    seed: u64,
    rng: ChaCha8Rng,
    pending: VecDeque<SpawnRequest>,
    signal_states: BTreeMap<String, SignalState>,
    next_seq: u64,
}

impl World {
    /// A world at `t = 0` holding only the scenario's static obstacles.
    pub fn new(scenario: Arc<Scenario>, seed: u64, dt: f64) -> Self {
        let mut w = World {
            t: 0.0,
            tick: 0,
            dt,
            vehicles: Vec::new(),
            vrus: Vec::new(),
            lane_change: LaneChangeConfig::default(),
            safety: SafetyStats::default(),
            completed: Vec::new(),
            removed: Vec::new(),
            events: Vec::new(),
            seed,
            rng: entity_rng(seed, "world", "dawdle"),
            pending: VecDeque::new(),
            signal_states: BTreeMap::new(),
            next_seq: 0,
            scenario,
        };
        for o in w.scenario.static_obstacles.clone() {
            let lane = w.scenario.lane(&o.lane).expect("validated").clone();
            let seq = w.bump_seq();
            w.vehicles.push(VehicleState {
                id: o.id.clone(),
                kind: VehicleKind::Obstacle,
                approach: lane.approach,
                lane: lane.id.clone(),
                pos: o.pos,
                speed: 0.0,
                speed_factor: 1.0,
                params: DriverParams::obstacle(),
                destination: Movement::Straight,
                slow_down: None,
                pending_lane_change: None,
                spawned_at: 0.0,
                zone_enter: None,
                seq,
            });
        }
        w
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn bump_seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    pub fn enqueue(&mut self, requests: impl IntoIterator<Item = SpawnRequest>) {
        self.pending.extend(requests);
    }

    /// Forget all demand that has not entered yet.
    pub fn clear_pending(&mut self) {
        self.pending.clear();
    }

    pub fn pending_spawns(&self) -> usize {
        self.pending.len()
    }

    pub fn vehicle(&self, id: &str) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    fn index_of(&self, id: &str) -> Result<usize> {
        self.vehicles
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| Error::UnknownVehicle(id.to_string()))
    }

    pub fn signal(&self, group: &str) -> SignalState {
        signal_state(&self.scenario.signal_plan, group, self.t).unwrap_or(SignalState::Red)
    }

    /// Indices of the vehicles on `lane`, front first.
    pub fn lane_order(&self, lane: &str) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.vehicles.len())
            .filter(|&i| self.vehicles[i].lane == lane)
            .collect();
        idx.sort_by(|&a, &b| {
            let (va, vb) = (&self.vehicles[a], &self.vehicles[b]);
            vb.pos.total_cmp(&va.pos).then(va.seq.cmp(&vb.seq))
        });
        idx
    }

    /// Nearest vehicle on `lane` whose front is ahead of `pos` (excluding `skip`),
    /// and nearest at or behind it.
    fn neighbours(&self, lane: &str, pos: f64, skip: Option<usize>) -> (Option<usize>, Option<usize>) {
        let mut ahead: Option<usize> = None;
        let mut behind: Option<usize> = None;
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.lane != lane || Some(i) == skip {
                continue;
            }
            if v.pos > pos {
                if ahead.is_none_or(|a| v.pos < self.vehicles[a].pos) {
                    ahead = Some(i);
                }
            } else if behind.is_none_or(|b| v.pos > self.vehicles[b].pos) {
                behind = Some(i);
            }
        }
        (ahead, behind)
    }

    /// Bumper-to-bumper gaps a vehicle of `length` at `pos` would have on `lane`.
    pub fn gaps_on_lane(&self, lane: &str, pos: f64, length: f64, skip: Option<usize>) -> (f64, f64, Option<usize>, Option<usize>) {
        let (ahead, behind) = self.neighbours(lane, pos, skip);
        let front = ahead.map_or(f64::INFINITY, |a| self.vehicles[a].rear() - pos);
        let back = behind.map_or(f64::INFINITY, |b| pos - length - self.vehicles[b].pos);
        (front, back, ahead, behind)
    }

    /// Move `id` sideways onto an adjacent lane at the same position.
    pub fn execute_lane_change(&mut self, id: &str, target: &str) -> Result<()> {
        let i = self.index_of(id)?;
        let v = &self.vehicles[i];
        let lane = self.scenario.lane(&v.lane)?;
        let adjacent = lane.adjacent_left.as_deref() == Some(target) || lane.adjacent_right.as_deref() == Some(target);
        if !adjacent || v.is_obstacle() {
            return Err(Error::InvalidTarget(format!("{id}: {} -> {target}", v.lane)));
        }
        let (front, back, _, _) = self.gaps_on_lane(target, v.pos, v.params.length, Some(i));
        if front < v.params.min_gap || back < v.params.min_gap {
            return Err(Error::GapRejected(format!("{id}: front {front:.2} m, back {back:.2} m")));
        }
        let from = std::mem::replace(&mut self.vehicles[i].lane, target.to_string());
        self.events.push(Event::LaneChange {
            id: id.to_string(),
            from,
            to: target.to_string(),
            cooperative: self.vehicles[i].pending_lane_change.is_some(),
        });
        self.vehicles[i].pending_lane_change = None;
        Ok(())
    }

    /// Keep trying [`World::execute_lane_change`] every tick until `deadline`.
    pub fn request_lane_change(&mut self, id: &str, target: &str, deadline: f64) -> Result<()> {
        let i = self.index_of(id)?;
        self.vehicles[i].pending_lane_change = Some(PendingLaneChange {
            target: target.to_string(),
            deadline,
        });
        Ok(())
    }

    /// Ramp the commanded ceiling of `id` to `target` over `duration` seconds.
    pub fn slow_down(&mut self, id: &str, target: f64, duration: f64) -> Result<()> {
        let i = self.index_of(id)?;
        let v = &mut self.vehicles[i];
        v.slow_down = Some(SlowDown::new(v.speed, target.max(0.0), duration, self.dt));
        Ok(())
    }

    /// Advance the world by one tick of `dt`.
    pub fn step(&mut self) {
        let dt = self.dt;
        let t0 = self.t;
        self.update_signals();

        let old_pos: Vec<f64> = self.vehicles.iter().map(|v| v.pos).collect();
        self.longitudinal(dt);
        self.check_red_crossings(&old_pos);
        self.apply_lane_changes();
        self.move_vrus(dt);

        self.t = t0 + dt;
        self.tick += 1;
        // Keep t a clean multiple of dt.
        self.t = (self.tick as f64 * dt * 1e9).round() / 1e9;

        self.track_zone(&old_pos);
        self.remove_finished();
        self.spawn_due();
        self.check_gaps();
    }

    fn update_signals(&mut self) {
        let plan = &self.scenario.signal_plan;
        for g in &plan.groups {
            let s = signal_state(plan, &g.id, self.t).expect("group exists");
            if self.signal_states.get(&g.id) != Some(&s) {
                self.signal_states.insert(g.id.clone(), s);
                self.events.push(Event::SignalChange {
                    group: g.id.clone(),
                    state: s,
                });
            }
        }
    }

    fn vru_blocks(&self, paths: &[String]) -> bool {
        self.vrus.iter().any(|u| {
            paths.contains(&u.path)
                && self
                    .scenario
                    .path(&u.path)
                    .is_some_and(|p| u.arc_pos >= p.crossing_start && u.arc_pos <= p.crossing_end)
        })
    }

    fn longitudinal(&mut self, dt: f64) {
        let scenario = Arc::clone(&self.scenario);
        for lane in &scenario.lanes {
            let order = self.lane_order(&lane.id);
            let signal = self.signal(&lane.signal_group);
            let mut prev: Option<usize> = None;
            for &i in &order {
                if self.vehicles[i].is_obstacle() {
                    prev = Some(i);
                    continue;
                }
                let v = &self.vehicles[i];
                let mut leaders = Vec::with_capacity(3);
                let mut hard_gap = f64::INFINITY;
                if let Some(p) = prev {
                    let l = &self.vehicles[p];
                    let gap = l.rear() - v.pos;
                    leaders.push(EffectiveLeader {
                        gap: gap - v.params.min_gap,
                        speed: l.speed,
                    });
                    hard_gap = hard_gap.min(gap + l.speed * dt);
                }
                let to_line = lane.stop_line_pos - v.pos;
                if to_line >= 0.0 {
                    let stop = match signal {
                        SignalState::Red => true,
                        SignalState::Yellow => to_line >= v.speed * v.speed / (2.0 * v.params.decel),
                        SignalState::Green => false,
                    };
                    if stop {
                        leaders.push(EffectiveLeader::stationary(to_line));
                        hard_gap = hard_gap.min(to_line);
                    }
                }
                for area in scenario.conflict_areas.iter().filter(|a| a.lane == lane.id) {
                    if v.pos <= area.start
                        && area.yielding_movements.contains(&v.destination)
                        && self.vru_blocks(&area.vru_paths)
                    {
                        let gap = area.start - v.pos;
                        leaders.push(EffectiveLeader::stationary(gap));
                        hard_gap = hard_gap.min(gap);
                    }
                }

                let ceiling = v.slow_down.and_then(|s| s.next_ceiling());
                let mut speed = follow_step(v, &leaders, ceiling, dt, &mut self.rng);
                if speed * dt > hard_gap {
                    speed = (hard_gap / dt).max(0.0);
                }
                let v = &mut self.vehicles[i];
                if let Some(s) = &mut v.slow_down {
                    s.done += 1;
                    if s.done >= s.steps {
                        v.slow_down = None;
                    }
                }
                v.speed = speed;
                v.pos += speed * dt;
                prev = Some(i);
            }
        }
    }

    fn check_red_crossings(&mut self, old_pos: &[f64]) {
        for (i, v) in self.vehicles.iter().enumerate() {
            let Ok(lane) = self.scenario.lane(&v.lane) else { continue };
            let crossed = old_pos.get(i).is_some_and(|&o| o <= lane.stop_line_pos) && v.pos > lane.stop_line_pos;
            if crossed && self.signal(&lane.signal_group) == SignalState::Red {
                if v.kind == VehicleKind::Chav {
                    self.safety.chav_red_crossings += 1;
                } else {
                    self.safety.other_red_crossings += 1;
                }
                self.events.push(Event::SafetyViolation {
                    id: v.id.clone(),
                    detail: "red light crossing".into(),
                });
            }
        }
    }

    fn apply_lane_changes(&mut self) {
        for i in 0..self.vehicles.len() {
            let Some(pending) = self.vehicles[i].pending_lane_change.clone() else { continue };
            let id = self.vehicles[i].id.clone();
            if self.t > pending.deadline {
                self.vehicles[i].pending_lane_change = None;
                self.events.push(Event::LaneChangeAbandoned {
                    id,
                    target: pending.target,
                });
                continue;
            }
            let _ = self.execute_lane_change(&id, &pending.target);
        }

        for i in 0..self.vehicles.len() {
            if let Some(target) = self.default_lane_change_target(i) {
                let v = &mut self.vehicles[i];
                let from = std::mem::replace(&mut v.lane, target.clone());
                self.events.push(Event::LaneChange {
                    id: v.id.clone(),
                    from,
                    to: target,
                    cooperative: false,
                });
            }
        }
    }

    /// Uncoordinated lane change of a vehicle stuck behind a static obstacle,
    /// accepted only if the new follower keeps its own safe distance.
    fn default_lane_change_target(&self, i: usize) -> Option<String> {
        let v = &self.vehicles[i];
        if v.is_obstacle() || v.pending_lane_change.is_some() {
            return None;
        }
        let (ahead, _) = self.neighbours(&v.lane, v.pos, Some(i));
        let a = ahead?;
        let obstacle = &self.vehicles[a];
        if !obstacle.is_obstacle() || obstacle.rear() - v.pos > self.lane_change.blocked_lookahead {
            return None;
        }
        let lane = self.scenario.lane(&v.lane).ok()?;
        for target in [&lane.adjacent_left, &lane.adjacent_right].into_iter().flatten() {
            let (front, back, _, behind) = self.gaps_on_lane(target, v.pos, v.params.length, Some(i));
            let back_needed = behind.map_or(0.0, |b| {
                let f = &self.vehicles[b];
                let closing = (f.speed * f.speed - v.speed * v.speed).max(0.0) / (2.0 * f.params.decel);
                f.params.min_gap + f.speed * f.params.reaction_time + closing
            });
            if front >= v.params.min_gap && back >= back_needed.max(v.params.min_gap) {
                return Some(target.clone());
            }
        }
        None
    }

    fn move_vrus(&mut self, dt: f64) {
        let scenario = Arc::clone(&self.scenario);
        let t = self.t;
        for u in &mut self.vrus {
            let Some(path) = scenario.path(&u.path) else { continue };
            let next = u.arc_pos + u.speed * dt;
            let green = signal_state(&scenario.signal_plan, &path.signal_group, t).ok() == Some(SignalState::Green);
            u.arc_pos = if u.arc_pos <= path.crossing_start && next > path.crossing_start && !green {
                path.crossing_start
            } else {
                next
            };
        }
    }

    fn track_zone(&mut self, old_pos: &[f64]) {
        let t = self.t;
        for (i, v) in self.vehicles.iter_mut().enumerate() {
            if v.kind == VehicleKind::Obstacle {
                continue;
            }
            let lane = self.scenario.lane(&v.lane).expect("vehicle lane exists");
            let (enter, exit) = self.scenario.zone_bounds(lane);
            let old = old_pos[i];
            if v.zone_enter.is_none() && old < enter && v.pos >= enter {
                v.zone_enter = Some(t);
                self.events.push(Event::ZoneEnter {
                    id: v.id.clone(),
                    kind: v.kind,
                    approach: v.approach,
                });
            }
            if old < exit && v.pos >= exit {
                if let Some(t_enter) = v.zone_enter {
                    self.completed.push(ZoneRecord {
                        id: v.id.clone(),
                        kind: v.kind,
                        approach: v.approach,
                        t_enter,
                        t_exit: t,
                    });
                    self.events.push(Event::ZoneExit { id: v.id.clone() });
                }
            }
        }
    }

    fn remove_finished(&mut self) {
        let scenario = Arc::clone(&self.scenario);
        let mut keep = Vec::with_capacity(self.vehicles.len());
        for v in self.vehicles.drain(..) {
            let end = scenario.lane(&v.lane).map(|l| l.length).unwrap_or(f64::INFINITY);
            if v.pos >= end {
                self.events.push(Event::Removal { id: v.id.clone() });
                self.removed.push(v.id);
            } else {
                keep.push(v);
            }
        }
        self.vehicles = keep;

        let mut keep = Vec::with_capacity(self.vrus.len());
        for u in self.vrus.drain(..) {
            let end = scenario.path(&u.path).map(|p| p.length).unwrap_or(0.0);
            if u.arc_pos >= end {
                self.events.push(Event::Removal { id: u.id.clone() });
            } else {
                keep.push(u);
            }
        }
        self.vrus = keep;
    }

    fn spawn_due(&mut self) {
        let mut blocked: Vec<String> = Vec::new();
        let mut still = VecDeque::with_capacity(self.pending.len());
        while let Some(req) = self.pending.pop_front() {
            if req.time > self.t + 1e-9 || blocked.contains(&req.origin) {
                still.push_back(req);
                continue;
            }
            if req.kind.is_vru() {
                self.spawn_vru(&req);
            } else if !self.try_spawn_vehicle(&req) {
                blocked.push(req.origin.clone());
                still.push_back(req);
            }
        }
        self.pending = still;
    }

    fn spawn_vru(&mut self, req: &SpawnRequest) {
        let speed = match req.kind {
            EntityKind::Cyclist => 4.5,
            _ => 1.3,
        };
        self.vrus.push(VruState {
            id: req.id.clone(),
            kind: req.kind,
            path: req.origin.clone(),
            arc_pos: 0.0,
            speed,
        });
        self.events.push(Event::VruSpawn {
            id: req.id.clone(),
            kind: req.kind,
            path: req.origin.clone(),
        });
    }

    fn try_spawn_vehicle(&mut self, req: &SpawnRequest) -> bool {
        let Ok(lane) = self.scenario.lane(&req.origin).cloned() else {
            return true;
        };
        let params = req.vehicle_kind.params();
        let pos = req.pos.unwrap_or(0.0);
        let (front, back, ahead, _) = self.gaps_on_lane(&lane.id, pos, params.length, None);
        if front < params.min_gap || back < params.min_gap {
            return false;
        }
        let mut rng = entity_rng(self.seed, &req.id, "speed_factor");
        let speed_factor = draw_speed_factor(params.speed_deviation, &mut rng);
        let mut speed = req.speed.unwrap_or(speed_factor * params.v_max);
        if let Some(a) = ahead {
            let l = &self.vehicles[a];
            speed = speed
                .min(safe_speed(front - params.min_gap, l.speed, params.decel, params.reaction_time))
                .min(front / self.dt);
        }
        let seq = self.bump_seq();
        let (enter, _) = self.scenario.zone_bounds(&lane);
        let v = VehicleState {
            id: req.id.clone(),
            kind: req.vehicle_kind,
            approach: lane.approach,
            lane: lane.id.clone(),
            pos,
            speed,
            speed_factor,
            params,
            destination: req
                .movement
                .unwrap_or_else(|| lane.movements.first().copied().unwrap_or(Movement::Straight)),
            slow_down: None,
            pending_lane_change: None,
            spawned_at: self.t,
            zone_enter: (pos >= enter).then_some(self.t),
            seq,
        };
        self.events.push(Event::Spawn {
            id: v.id.clone(),
            kind: v.kind,
            lane: v.lane.clone(),
            pos,
            speed,
        });
        if v.zone_enter.is_some() {
            self.events.push(Event::ZoneEnter {
                id: v.id.clone(),
                kind: v.kind,
                approach: v.approach,
            });
        }
        self.vehicles.push(v);
        true
    }

    fn check_gaps(&mut self) {
        self.safety.ticks_checked += 1;
        let scenario = Arc::clone(&self.scenario);
        for lane in &scenario.lanes {
            let order = self.lane_order(&lane.id);
            for w in order.windows(2) {
                let (a, b) = (&self.vehicles[w[0]], &self.vehicles[w[1]]);
                let gap = a.rear() - b.pos;
                if gap < -1e-9 {
                    self.safety.negative_gaps += 1;
                    self.events.push(Event::SafetyViolation {
                        id: b.id.clone(),
                        detail: format!("gap {gap:.3} m behind {}", a.id),
                    });
                }
            }
        }
    }

    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }
}

impl crate::bus::Locate for World {
    fn locate(&self, endpoint: &crate::bus::Endpoint) -> Option<crate::bus::Location> {
        use crate::bus::{Endpoint, Location};
        match endpoint {
            Endpoint::Tms => Some(Location::Reference),
            Endpoint::Vehicle(id) => {
                let v = self.vehicle(id)?;
                let lane = self.scenario.lane(&v.lane).ok()?;
                Some(Location::Approach {
                    approach: v.approach,
                    offset: v.pos - lane.stop_line_pos,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{DemandEntry, Scenario};

    fn bare_scenario() -> Scenario {
        let mut s = Scenario::default_intersection();
        s.generator = None;
        s.demand.clear();
        s.static_obstacles.clear();
        s
    }

    fn car(id: &str, lane: &str, pos: f64, speed: f64, kind: VehicleKind) -> SpawnRequest {
        SpawnRequest {
            id: id.into(),
            time: 0.0,
            kind: EntityKind::Car,
            origin: lane.into(),
            vehicle_kind: kind,
            movement: Some(Movement::Straight),
            pos: Some(pos),
            speed: Some(speed),
        }
    }

    fn world_with(s: Scenario, reqs: Vec<SpawnRequest>) -> World {
        let mut w = World::new(Arc::new(s), 7, 0.1);
        w.enqueue(reqs);
        w.spawn_due();
        w
    }

    #[test]
    fn safe_speed_closed_form() {
        assert_eq!(safe_speed(0.0, 0.0, 4.5, 1.0), 0.0);
        let v = safe_speed(20.0, 10.0, 4.5, 1.0);
        assert!((v - 12.827_723_451).abs() < 1e-6, "{v}");
        assert!(safe_speed(1e6, 10.0, 4.5, 1.0) > 10.0);
    }

    #[test]
    fn free_acceleration_from_standstill() {
        let mut v = world_with(bare_scenario(), vec![car("a", "W1", 0.0, 0.0, VehicleKind::Chav)]).vehicles[0].clone();
        v.params.imperfection = 0.0;
        let mut rng = entity_rng(1, "x", "y");
        let next = follow_step(&v, &[EffectiveLeader::stationary(100.0)], None, 0.1, &mut rng);
        assert!((next - 0.26).abs() < 1e-12);
    }

    #[test]
    fn red_light_at_the_line_forces_stop() {
        let v = world_with(bare_scenario(), vec![car("a", "W1", 0.0, 12.0, VehicleKind::Hv)]).vehicles[0].clone();
        let mut rng = entity_rng(1, "x", "y");
        let next = follow_step(&v, &[EffectiveLeader::stationary(0.0)], None, 0.1, &mut rng);
        assert_eq!(next, 0.0);
    }

    #[test]
    fn slow_down_ramp_has_thirty_steps() {
        let mut s = SlowDown::new(13.9, 10.9, 3.0, 0.1);
        let mut ceilings = vec![];
        while let Some(c) = s.next_ceiling() {
            ceilings.push(c);
            s.done += 1;
        }
        assert_eq!(ceilings.len(), 30);
        for (k, c) in ceilings.iter().enumerate() {
            assert!((c - (13.9 - 0.1 * (k as f64 + 1.0))).abs() < 1e-9);
        }
        let hard = SlowDown::new(10.0, 0.0, 0.0, 0.1);
        assert_eq!(hard.next_ceiling(), Some(0.0));
        assert_eq!(hard.steps, 1);
    }

    #[test]
    fn slow_down_to_current_speed_is_a_no_op_ceiling() {
        let s = SlowDown::new(12.0, 12.0, 3.0, 0.1);
        assert_eq!(s.next_ceiling(), Some(12.0));
    }

    #[test]
    fn empty_world_only_advances_time() {
        let mut w = World::new(Arc::new(bare_scenario()), 1, 0.1);
        for _ in 0..10 {
            w.step();
        }
        assert!((w.t - 1.0).abs() < 1e-12);
        assert!(w.vehicles.is_empty());
    }

    #[test]
    fn lane_change_into_empty_lane() {
        let mut w = world_with(bare_scenario(), vec![car("a", "W1", 100.0, 10.0, VehicleKind::Chav)]);
        w.execute_lane_change("a", "W2").unwrap();
        assert_eq!(w.vehicles[0].lane, "W2");
    }

    #[test]
    fn lane_change_rejections() {
        let mut w = world_with(
            bare_scenario(),
            vec![
                car("a", "W1", 100.0, 10.0, VehicleKind::Chav),
                car("b", "W2", 96.0, 10.0, VehicleKind::Chav),
            ],
        );
        assert!(matches!(w.execute_lane_change("a", "W2"), Err(Error::GapRejected(_))));
        assert!(matches!(w.execute_lane_change("a", "W3"), Err(Error::InvalidTarget(_))));
        assert!(matches!(w.execute_lane_change("a", "E1"), Err(Error::InvalidTarget(_))));
        assert_eq!(w.vehicles[0].lane, "W1");
    }

    #[test]
    fn single_vehicle_integrates_speed() {
        let mut s = bare_scenario();
        // Permanent green for the west group.
        for g in &mut s.signal_plan.groups {
            if g.id == "EW" {
                g.intervals = vec![
                    crate::netmodel::SignalInterval { state: SignalState::Green, duration: 89.0 },
                    crate::netmodel::SignalInterval { state: SignalState::Red, duration: 1.0 },
                ];
            }
        }
        let mut w = world_with(s, vec![car("a", "W1", 0.0, 13.0, VehicleKind::Chav)]);
        let mut expected = w.vehicles[0].pos;
        for _ in 0..100 {
            w.step();
            expected += w.vehicles[0].speed * 0.1;
            assert!((w.vehicles[0].pos - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn chav_trace_behind_obstacle_is_stable() {
        let mut s = bare_scenario();
        s.static_obstacles.push(crate::netmodel::StaticObstacle {
            id: "obs".into(),
            lane: "W1".into(),
            pos: 235.0,
        });
        let mut w = world_with(s, vec![car("a", "W1", 200.0, 50.0 * KMH, VehicleKind::Chav)]);
        w.lane_change.blocked_lookahead = 0.0;
        let mut trace = vec![];
        for _ in 0..60 {
            w.step();
            trace.push(w.vehicle("a").unwrap().speed);
        }
        // Stops behind the obstacle and never touches it.
        let a = w.vehicle("a").unwrap();
        assert!(a.speed < 0.05);
        assert!(235.0 - 5.0 - a.pos >= 0.0);
        assert!(trace.iter().all(|v| *v <= 50.0 * KMH + 1e-12));
        // Regression guard for bit-level determinism of the trace.
        let again = {
            let mut s = bare_scenario();
            s.static_obstacles.push(crate::netmodel::StaticObstacle {
                id: "obs".into(),
                lane: "W1".into(),
                pos: 235.0,
            });
            let mut w = world_with(s, vec![car("a", "W1", 200.0, 50.0 * KMH, VehicleKind::Chav)]);
            w.lane_change.blocked_lookahead = 0.0;
            (0..60)
                .map(|_| {
                    w.step();
                    w.vehicle("a").unwrap().speed
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(trace, again);
    }

    #[test]
    fn spawn_rejection_retries() {
        let mut w = World::new(Arc::new(bare_scenario()), 1, 0.1);
        w.enqueue(vec![car("a", "W1", 0.0, 0.0, VehicleKind::Hv), car("b", "W1", 0.0, 5.0, VehicleKind::Hv)]);
        w.step();
        assert_eq!(w.vehicles.len(), 1);
        assert_eq!(w.pending_spawns(), 1);
        for _ in 0..100 {
            w.step();
        }
        assert_eq!(w.vehicles.len(), 2);
    }

    #[test]
    fn speed_factor_clipping() {
        let mut rng = entity_rng(3, "v", "f");
        assert_eq!(draw_speed_factor(0.0, &mut rng), 1.0);
        for _ in 0..1000 {
            let f = draw_speed_factor(0.1, &mut rng);
            assert!((0.8..=1.2).contains(&f));
        }
    }

    #[test]
    fn demand_entry_helper_defaults() {
        let d = DemandEntry::vehicle("x", 1.0, EntityKind::Car, "W1");
        assert!(d.pos.is_none() && d.controller.is_none());
    }

    proptest::proptest! {
        #[test]
        fn safe_speed_is_monotone(g in 0.0f64..200.0, dg in 0.0f64..50.0, v in 0.0f64..20.0, dv in 0.0f64..5.0) {
            proptest::prop_assert!(safe_speed(g + dg, v, 4.5, 1.0) >= safe_speed(g, v, 4.5, 1.0));
            proptest::prop_assert!(safe_speed(g, v + dv, 4.5, 1.0) >= safe_speed(g, v, 4.5, 1.0));
        }
    }
}
