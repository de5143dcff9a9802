//! Per-vehicle controllers for connected automated vehicles.
//!
//! A CHAV walks through `Approaching → Subscribed → Negotiating → Committed →
//! Executing → Exiting`; a rejected negotiation returns it to `Subscribed`.
//! Human-driven vehicles have no agent at all: they only follow the default
//! dynamics.

use serde::{Deserialize, Serialize};

use crate::bus::{
    Bus, CooperationRecommendation, Endpoint, EvaluationMessage, Locate, Message, Payload, Recipient, SubscriptionRequest,
    TrackUpdate,
};
use crate::dynamics::{DriverParams, VehicleState, World};
use crate::events::Event;
use crate::game::{decide, merge_evaluations, Combination, Decision, Lateral, Longitudinal, PayoffMatrix, RejectReason, Role};
use crate::netmodel::{Approach, Movement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approaching,
    Subscribed,
    Negotiating(u64),
    Committed(Combination),
    Executing,
    Exiting,
}

/// Tuning of the reference payoff evaluation and of execution timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoffParams {
    pub w_safety: f64,
    pub w_efficiency: f64,
    pub coop_bonus: f64,
    pub g_min: f64,
    pub g_norm: f64,
    pub t_norm: f64,
    pub horizon: f64,
    pub coop_speed_drop: f64,
    pub coop_duration: f64,
    pub exec_timeout: f64,
    pub update_every: u64,
    pub eval_timeout_ticks: u64,
    pub sensing_range: f64,
}

impl Default for PayoffParams {
    fn default() -> Self {
        PayoffParams {
            w_safety: 0.6,
            w_efficiency: 0.4,
            coop_bonus: 0.5,
            g_min: 2.5,
            g_norm: 10.0,
            t_norm: 10.0,
            horizon: 5.0,
            coop_speed_drop: 3.0,
            coop_duration: 3.0,
            exec_timeout: 8.0,
            update_every: 10,
            eval_timeout_ticks: 5,
            sensing_range: 100.0,
        }
    }
}

/// Actuation requested by an agent; applied to the world by the tick loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    RequestLaneChange { target: String, deadline: f64 },
    SlowDown { target: f64, duration: f64 },
}

/// A vehicle as seen by an agent's own sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensed {
    pub id: String,
    pub lane: String,
    pub pos: f64,
    pub speed: f64,
    pub length: f64,
    pub is_static: bool,
}

/// Everything an evaluation may look at: the ego vehicle and its own sensor
/// picture. Partner payoffs are not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalView {
    pub ego: Sensed,
    pub ego_params: DriverParams,
    pub ego_desired: f64,
    pub others: Vec<Sensed>,
}

impl LocalView {
    pub fn sense(world: &World, ego: &VehicleState, range: f64) -> LocalView {
        let others = world
            .vehicles
            .iter()
            .filter(|v| v.id != ego.id && v.approach == ego.approach && (v.pos - ego.pos).abs() <= range)
            .map(sensed)
            .collect();
        LocalView {
            ego: sensed(ego),
            ego_params: ego.params,
            ego_desired: ego.desired_speed(),
            others,
        }
    }
}

fn sensed(v: &VehicleState) -> Sensed {
    Sensed {
        id: v.id.clone(),
        lane: v.lane.clone(),
        pos: v.pos,
        speed: v.speed,
        length: v.params.length,
        is_static: v.is_obstacle(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Behaviour {
    Constant,
    Continue { desired: f64, accel: f64 },
    Merge { desired: f64, accel: f64, min_gap: f64 },
    BrakeTo { stop: f64 },
    Ramp { target: f64, rate: f64 },
}

#[derive(Debug, Clone)]
struct Body {
    lane: String,
    pos: f64,
    speed: f64,
    length: f64,
    is_static: bool,
    behaviour: Behaviour,
}

impl Body {
    fn rear(&self) -> f64 {
        self.pos - self.length
    }
}

/// Outcome of a constant-behaviour rollout for the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub min_gap: f64,
    pub time_to_pass: f64,
}

/// The non-cooperative fallback: the first row that keeps the lane, and the
/// first column that keeps both lane and speed.
pub fn default_combination(m: &PayoffMatrix) -> Combination {
    let row = m.rows.iter().position(|s| s.lateral == Lateral::Continue).unwrap_or(0);
    let col = m
        .cols
        .iter()
        .position(|s| s.lateral == Lateral::Continue && s.longitudinal == Longitudinal::Continue)
        .unwrap_or(0);
    Combination::new(row, col)
}

/// Predict what happens to the ego vehicle if both candidates follow `combo`
/// and everybody else keeps their speed.
pub fn rollout(view: &LocalView, role: Role, rec: &CooperationRecommendation, combo: Combination, p: &PayoffParams) -> Prediction {
    let chav = DriverParams::chav();
    let obstacle = &rec.obstacle;
    let row = &rec.matrix.rows[combo.row];
    let col = &rec.matrix.cols[combo.col];

    let first_behaviour = |desired: f64, accel: f64| {
        if row.lateral == Lateral::LaneChange {
            Behaviour::Merge {
                desired,
                accel,
                min_gap: chav.min_gap,
            }
        } else if row.longitudinal == Longitudinal::Decelerate {
            Behaviour::BrakeTo {
                stop: obstacle.pos - obstacle.length - chav.min_gap,
            }
        } else {
            Behaviour::Continue { desired, accel }
        }
    };
    let second_behaviour = |desired: f64, accel: f64, speed: f64| {
        if col.longitudinal == Longitudinal::Decelerate {
            Behaviour::Ramp {
                target: (speed - p.coop_speed_drop).max(0.0),
                rate: p.coop_speed_drop / p.coop_duration,
            }
        } else {
            Behaviour::Continue { desired, accel }
        }
    };

    let partner_id = rec.partner_of(role);
    let mut bodies: Vec<Body> = Vec::with_capacity(view.others.len() + 2);
    let ego_behaviour = match role {
        Role::First => first_behaviour(view.ego_desired, view.ego_params.accel),
        Role::Second => second_behaviour(view.ego_desired, view.ego_params.accel, view.ego.speed),
    };
    bodies.push(body(&view.ego, ego_behaviour));
    let mut obstacle_seen = false;
    for o in &view.others {
        let behaviour = if o.id == partner_id {
            match role {
                Role::First => second_behaviour(chav.v_max, chav.accel, o.speed),
                Role::Second => first_behaviour(chav.v_max, chav.accel),
            }
        } else {
            Behaviour::Constant
        };
        obstacle_seen |= o.id == obstacle.id;
        bodies.push(body(o, behaviour));
    }
    if !obstacle_seen {
        bodies.push(Body {
            lane: obstacle.lane.clone(),
            pos: obstacle.pos,
            speed: 0.0,
            length: obstacle.length,
            is_static: true,
            behaviour: Behaviour::Constant,
        });
    }

    let dt = 0.1;
    let steps = (p.horizon / dt).round() as usize;
    let target_lane = rec.target_lane.as_str();
    let pass_at = obstacle.pos + 10.0;
    let mut min_gap = ego_gap(&bodies);
    let mut passed: Option<f64> = None;
    for k in 1..=steps {
        for i in 0..bodies.len() {
            let b = &bodies[i];
            let speed = match b.behaviour {
                Behaviour::Constant => b.speed,
                Behaviour::Continue { desired, accel } | Behaviour::Merge { desired, accel, .. } => (b.speed + accel * dt).min(desired.max(b.speed)),
                Behaviour::BrakeTo { stop } => {
                    let room = stop - b.pos;
                    if room <= 0.0 {
                        0.0
                    } else {
                        (b.speed - b.speed * b.speed / (2.0 * room) * dt).max(0.0)
                    }
                }
                Behaviour::Ramp { target, rate } => (b.speed - rate * dt).max(target),
            };
            bodies[i].speed = speed;
            bodies[i].pos += speed * dt;
        }
        for i in 0..bodies.len() {
            if let Behaviour::Merge { desired, accel, min_gap } = bodies[i].behaviour {
                let (front, back) = lane_gaps(&bodies, i, target_lane);
                if front >= min_gap && back >= min_gap {
                    bodies[i].lane = target_lane.to_string();
                    bodies[i].behaviour = Behaviour::Continue { desired, accel };
                }
            }
        }
        min_gap = min_gap.min(ego_gap(&bodies));
        if passed.is_none() && bodies[0].pos >= pass_at {
            passed = Some(k as f64 * dt);
        }
    }

    let ego = &bodies[0];
    let blocked = bodies
        .iter()
        .any(|b| b.is_static && b.lane == ego.lane && b.pos > ego.pos);
    if blocked {
        // Whoever stays behind a static obstacle ends up stopped at standstill distance.
        min_gap = min_gap.min(view.ego_params.min_gap);
    }
    let time_to_pass = passed.unwrap_or_else(|| {
        if blocked {
            p.horizon + p.t_norm
        } else {
            p.horizon + (pass_at - ego.pos).max(0.0) / ego.speed.max(1.0)
        }
    });
    Prediction { min_gap, time_to_pass }
}

fn body(s: &Sensed, behaviour: Behaviour) -> Body {
    Body {
        lane: s.lane.clone(),
        pos: s.pos,
        speed: s.speed,
        length: s.length,
        is_static: s.is_static,
        behaviour: if s.is_static { Behaviour::Constant } else { behaviour },
    }
}

/// Front and back gap body `i` would have on `lane`.
fn lane_gaps(bodies: &[Body], i: usize, lane: &str) -> (f64, f64) {
    let me = &bodies[i];
    let mut front = f64::INFINITY;
    let mut back = f64::INFINITY;
    for (j, b) in bodies.iter().enumerate() {
        if j == i || b.lane != lane {
            continue;
        }
        if b.pos >= me.pos {
            front = front.min(b.rear() - me.pos);
        } else {
            back = back.min(me.rear() - b.pos);
        }
    }
    (front, back)
}

fn ego_gap(bodies: &[Body]) -> f64 {
    let (f, b) = lane_gaps(bodies, 0, &bodies[0].lane);
    f.min(b)
}

/// Own payoff of `combo`. Reads only the ego's sensor picture, the
/// recommendation and the ego's own parameters.
pub fn evaluate_combination(
    view: &LocalView,
    role: Role,
    rec: &CooperationRecommendation,
    combo: Combination,
    coop_factor: f64,
    p: &PayoffParams,
) -> f64 {
    let pred = rollout(view, role, rec, combo, p);
    let base = rollout(view, role, rec, default_combination(&rec.matrix), p);
    let safety = ((pred.min_gap - p.g_min) / p.g_norm).clamp(-1.0, 1.0);
    let efficiency = ((base.time_to_pass - pred.time_to_pass) / p.t_norm).clamp(-1.0, 1.0);
    let bonus = if role == Role::Second && combo.col == rec.recommended.col {
        coop_factor * p.coop_bonus
    } else {
        0.0
    };
    p.w_safety * safety + p.w_efficiency * efficiency + bonus
}

/// Fill `role`'s half of the recommendation matrix.
pub fn evaluate_half(view: &LocalView, role: Role, rec: &CooperationRecommendation, coop_factor: f64, p: &PayoffParams) -> PayoffMatrix {
    let mut half = rec.matrix.clone();
    let cells: Vec<Combination> = half.combinations().collect();
    for c in cells {
        let v = evaluate_combination(view, role, rec, c, coop_factor, p);
        half.set(c, role, v).expect("cell of the matrix");
    }
    half.half(role)
}

/// Exit approach reached by `movement` from `approach`, used as destination.
pub fn exit_approach(approach: Approach, movement: Movement) -> Approach {
    use Approach::*;
    match (approach, movement) {
        (W, Movement::Straight) | (N, Movement::Left) | (S, Movement::Right) => E,
        (E, Movement::Straight) | (S, Movement::Left) | (N, Movement::Right) => W,
        (N, Movement::Straight) | (E, Movement::Left) | (W, Movement::Right) => S,
        (S, Movement::Straight) | (W, Movement::Left) | (E, Movement::Right) => N,
    }
}


#[derive(Debug, Clone)]
struct Negotiation {
    rec: CooperationRecommendation,
    role: Role,
    own: PayoffMatrix,
    submitted_tick: u64,
}

#[derive(Debug, Clone)]
pub struct ChavAgent {
    pub id: String,
    pub phase: Phase,
    pub coop_factor: f64,
    pub params: PayoffParams,
    /// Fixed by the first subscription response.
    pub deadline_met: Option<bool>,
    request_tick: Option<u64>,
    negotiation: Option<Negotiation>,
    last_update_tick: Option<u64>,
}

/// Retry a subscription request that got no answer after this many ticks.
const SUBSCRIBE_RETRY_TICKS: u64 = 10;

impl ChavAgent {
    pub fn new(id: impl Into<String>, coop_factor: f64, params: PayoffParams) -> Self {
        ChavAgent {
            id: id.into(),
            phase: Phase::Approaching,
            coop_factor: coop_factor.clamp(0.0, 1.0),
            params,
            deadline_met: None,
            request_tick: None,
            negotiation: None,
            last_update_tick: None,
        }
    }

    fn endpoint(&self) -> Endpoint {
        Endpoint::Vehicle(self.id.clone())
    }

    fn set_phase(&mut self, to: Phase, events: &mut Vec<Event>) {
        if to != self.phase {
            events.push(Event::PhaseChange {
                id: self.id.clone(),
                from: self.phase,
                to,
            });
            self.phase = to;
        }
    }

    /// One protocol step. Returns actuation for the world.
    pub fn step(&mut self, inbox: Vec<Message>, world: &World, bus: &mut Bus, events: &mut Vec<Event>) -> Vec<Command> {
        let Some(me) = world.vehicle(&self.id) else {
            return Vec::new();
        };
        let tick = bus.tick();
        let mut commands = Vec::new();

        for msg in inbox {
            match msg.payload {
                Payload::SubscriptionResponse(r) if r.vehicle_id == self.id => {
                    if self.deadline_met.is_none() {
                        self.deadline_met = Some(r.deadline_met);
                    }
                    bus.register(&self.id);
                    if self.phase == Phase::Approaching {
                        self.set_phase(Phase::Subscribed, events);
                    }
                }
                Payload::CooperationRecommendation(rec) => self.on_recommendation(rec, me, world, bus, events),
                Payload::Evaluation(e) => self.on_partner_evaluation(&e, me, &mut commands, events),
                _ => {}
            }
        }

        let timed_out = self
            .negotiation
            .as_ref()
            .is_some_and(|n| tick.saturating_sub(n.submitted_tick) > self.params.eval_timeout_ticks);
        if timed_out {
            let n = self.negotiation.take().expect("checked");
            self.conclude(&n, None, Decision::Reject(RejectReason::ProtocolAbort), events);
        }

        let lane = world.scenario.lane(&me.lane).expect("vehicle lane exists");
        let offset = me.pos - lane.stop_line_pos;
        let in_range = world
            .locate(&self.endpoint())
            .zip(world.locate(&Endpoint::Tms))
            .is_some_and(|(a, b)| a.distance(b) <= bus.config.range);

        if self.phase == Phase::Approaching && in_range && offset < 0.0 {
            let due = self.request_tick.is_none_or(|t| tick >= t + SUBSCRIBE_RETRY_TICKS);
            if due {
                self.request_tick = Some(tick);
                let req = SubscriptionRequest {
                    vehicle_id: self.id.clone(),
                    intention: me.destination,
                    destination_lane: format!("exit_{}", exit_approach(me.approach, me.destination).as_str()),
                };
                bus.send(self.endpoint(), Recipient::Tms, Payload::SubscriptionRequest(req), world);
            }
        }

        if offset > 0.0 && self.negotiation.is_none() && self.phase != Phase::Exiting {
            self.set_phase(Phase::Exiting, events);
        }

        if self.phase == Phase::Exiting && self.deadline_met.is_some() && in_range {
            let due = self.last_update_tick.is_none_or(|t| tick >= t + self.params.update_every);
            if due {
                self.last_update_tick = Some(tick);
                let upd = TrackUpdate {
                    vehicle_id: self.id.clone(),
                    lane: me.lane.clone(),
                    pos: me.pos,
                    speed: me.speed,
                };
                bus.send(self.endpoint(), Recipient::Tms, Payload::TrackUpdate(upd), world);
            }
        }
        commands
    }

    fn on_recommendation(&mut self, rec: CooperationRecommendation, me: &VehicleState, world: &World, bus: &mut Bus, events: &mut Vec<Event>) {
        let Some(role) = rec.role_of(&self.id) else { return };
        if self.phase != Phase::Subscribed || self.deadline_met != Some(true) {
            return;
        }
        let view = LocalView::sense(world, me, self.params.sensing_range);
        let own = evaluate_half(&view, role, &rec, self.coop_factor, &self.params);
        let eval = EvaluationMessage {
            rec_id: rec.rec_id,
            sender: self.id.clone(),
            role,
            produced_tick: bus.tick(),
            half: own.clone(),
        };
        let n = Negotiation {
            rec,
            role,
            own,
            submitted_tick: bus.tick(),
        };
        match bus.submit_evaluation(eval, world) {
            Ok(()) => {
                self.set_phase(Phase::Negotiating(n.rec.rec_id), events);
                self.negotiation = Some(n);
            }
            Err(_) => self.conclude(&n, None, Decision::Reject(RejectReason::ProtocolAbort), events),
        }
    }

    fn on_partner_evaluation(&mut self, e: &EvaluationMessage, me: &VehicleState, commands: &mut Vec<Command>, events: &mut Vec<Event>) {
        let matches = self
            .negotiation
            .as_ref()
            .is_some_and(|n| e.rec_id == n.rec.rec_id && e.role == n.role.partner());
        if !matches {
            return;
        }
        let n = self.negotiation.take().expect("checked");
        let outcome = merge_evaluations(&n.own, &e.half)
            .and_then(|d| decide(&d, n.rec.recommended).map(|decision| (d, decision)));
        match outcome {
            Ok((d, decision)) => {
                self.conclude(&n, Some(d), decision, events);
                if let Decision::Execute(c) = decision {
                    self.set_phase(Phase::Committed(c), events);
                    commands.extend(self.execute(&n.rec, n.role, c, me));
                    self.set_phase(Phase::Executing, events);
                }
            }
            Err(_) => self.conclude(&n, None, Decision::Reject(RejectReason::ProtocolAbort), events),
        }
    }

    fn conclude(&mut self, n: &Negotiation, matrix: Option<PayoffMatrix>, decision: Decision, events: &mut Vec<Event>) {
        events.push(Event::Decision {
            rec_id: n.rec.rec_id,
            id: self.id.clone(),
            role: n.role,
            matrix,
            decision,
        });
        if !decision.is_execute() {
            self.set_phase(Phase::Subscribed, events);
        }
    }

    /// Actuation for an agreed combination. Strategies that keep lane and
    /// speed need nothing beyond the default controller.
    fn execute(&self, rec: &CooperationRecommendation, role: Role, c: Combination, me: &VehicleState) -> Vec<Command> {
        let mut out = Vec::new();
        match role {
            Role::First => {
                if rec.matrix.rows[c.row].lateral == Lateral::LaneChange {
                    out.push(Command::RequestLaneChange {
                        target: rec.target_lane.clone(),
                        deadline: rec.issued_at + self.params.exec_timeout,
                    });
                }
            }
            Role::Second => {
                if rec.matrix.cols[c.col].longitudinal == Longitudinal::Decelerate {
                    out.push(Command::SlowDown {
                        target: (me.speed - self.params.coop_speed_drop).max(0.0),
                        duration: self.params.coop_duration,
                    });
                }
            }
        }
        out
    }
}
