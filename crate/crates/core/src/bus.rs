//! In-simulation V2X transport.
//!
//! Messages sent during tick `k` are delivered at the start of tick `k + 1` to
//! every addressed endpoint within reception range at send time. Evaluation
//! halves of a negotiation are never delivered on their own: the bus holds them
//! until both are present and then hands them over in the same tick.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::entity_rng;
use crate::events::Event;
use crate::game::{Combination, PayoffMatrix, Role};
use crate::netmodel::{Approach, Movement, SignalCourseEntry, SignalState};
use crate::{Error, Result};

pub const DEFAULT_RANGE: f64 = 200.0;

/// Held evaluation halves expire after this many ticks without a partner.
pub const EVALUATION_HOLD_TICKS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Tms,
    Vehicle(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipient {
    Tms,
    Vehicle(String),
    Broadcast,
}

impl From<Endpoint> for Recipient {
    fn from(e: Endpoint) -> Self {
        match e {
            Endpoint::Tms => Recipient::Tms,
            Endpoint::Vehicle(id) => Recipient::Vehicle(id),
        }
    }
}

/// Where an endpoint is, as seen by the radio: the TMS sits at the reference
/// point, vehicles are on an approach at a signed offset from its stop line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    Reference,
    Approach { approach: Approach, offset: f64 },
}

impl Location {
    pub fn distance(self, other: Location) -> f64 {
        match (self, other) {
            (Location::Reference, Location::Reference) => 0.0,
            (Location::Reference, Location::Approach { offset, .. })
            | (Location::Approach { offset, .. }, Location::Reference) => offset.abs(),
            (Location::Approach { approach: a, offset: x }, Location::Approach { approach: b, offset: y }) => {
                if a == b {
                    (x - y).abs()
                } else {
                    x.abs() + y.abs()
                }
            }
        }
    }
}

pub trait Locate {
    fn locate(&self, endpoint: &Endpoint) -> Option<Location>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Car,
    Truck,
    Obstacle,
    Cyclist,
    Pedestrian,
}

/// A sensed entity. For VRUs `lane` holds the path id and `pos` the arc position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: String,
    pub kind: TrackKind,
    pub lane: String,
    pub pos: f64,
    pub speed: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionRequest {
    pub vehicle_id: String,
    pub intention: Movement,
    pub destination_lane: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionResponse {
    pub vehicle_id: String,
    pub deadline_met: bool,
    pub signal_phase: BTreeMap<String, SignalState>,
    pub signal_course: Vec<SignalCourseEntry>,
    pub digital_map: String,
    pub static_obstacles: Vec<Track>,
    pub dynamic_objects: Vec<Track>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    CooperativeLaneChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooperationRecommendation {
    pub rec_id: u64,
    pub chav1: String,
    pub chav2: String,
    pub maneuver: ManeuverKind,
    pub matrix: PayoffMatrix,
    pub recommended: Combination,
    pub target_lane: String,
    pub obstacle: Track,
    pub issued_at: f64,
}

impl CooperationRecommendation {
    pub fn role_of(&self, id: &str) -> Option<Role> {
        if self.chav1 == id {
            Some(Role::First)
        } else if self.chav2 == id {
            Some(Role::Second)
        } else {
            None
        }
    }

    pub fn partner_of(&self, role: Role) -> &str {
        match role {
            Role::First => &self.chav2,
            Role::Second => &self.chav1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationMessage {
    pub rec_id: u64,
    pub sender: String,
    pub role: Role,
    pub produced_tick: u64,
    pub half: PayoffMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackUpdate {
    pub vehicle_id: String,
    pub lane: String,
    pub pos: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    SubscriptionRequest(SubscriptionRequest),
    SubscriptionResponse(SubscriptionResponse),
    CooperationRecommendation(CooperationRecommendation),
    Evaluation(EvaluationMessage),
    TrackUpdate(TrackUpdate),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::SubscriptionRequest(_) => PayloadKind::SubscriptionRequest,
            Payload::SubscriptionResponse(_) => PayloadKind::SubscriptionResponse,
            Payload::CooperationRecommendation(_) => PayloadKind::CooperationRecommendation,
            Payload::Evaluation(_) => PayloadKind::Evaluation,
            Payload::TrackUpdate(_) => PayloadKind::TrackUpdate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    SubscriptionRequest,
    SubscriptionResponse,
    CooperationRecommendation,
    Evaluation,
    TrackUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub msg_id: u64,
    pub sender: Endpoint,
    pub recipient: Recipient,
    pub sent_tick: u64,
    pub sent_at: f64,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusConfig {
    pub range: f64,
    pub drop_probability: f64,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            range: DEFAULT_RANGE,
            drop_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Held {
    eval: EvaluationMessage,
    sender_loc: Option<Location>,
    held_at: u64,
}

#[derive(Debug)]
pub struct Bus {
    pub config: BusConfig,
    tick: u64,
    dt: f64,
    next_id: u64,
    rng: ChaCha8Rng,
    queue: VecDeque<(Message, Vec<Endpoint>)>,
    inboxes: BTreeMap<Endpoint, Vec<Message>>,
    listeners: BTreeSet<String>,
    held: BTreeMap<u64, Vec<Held>>,
    exchanged: BTreeMap<u64, u64>,
    forced_drops: BTreeSet<(Endpoint, PayloadKind)>,
    events: Vec<Event>,
}

impl Bus {
    pub fn new(config: BusConfig, seed: u64, dt: f64) -> Self {
        Bus {
            config,
            tick: 0,
            dt,
            next_id: 0,
            rng: entity_rng(seed, "bus", "drop"),
            queue: VecDeque::new(),
            inboxes: BTreeMap::new(),
            listeners: BTreeSet::new(),
            held: BTreeMap::new(),
            exchanged: BTreeMap::new(),
            forced_drops: BTreeSet::new(),
            events: Vec::new(),
        }
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Vehicles reachable by broadcasts.
    pub fn register(&mut self, id: &str) {
        self.listeners.insert(id.to_string());
    }

    pub fn unregister(&mut self, id: &str) {
        self.listeners.remove(id);
        self.inboxes.remove(&Endpoint::Vehicle(id.to_string()));
    }

    /// Drop the next message of `kind` sent by `sender`.
    pub fn force_drop(&mut self, sender: Endpoint, kind: PayloadKind) {
        self.forced_drops.insert((sender, kind));
    }

    fn in_range(&self, a: Option<Location>, b: Option<Location>) -> bool {
        matches!((a, b), (Some(a), Some(b)) if a.distance(b) <= self.config.range)
    }

    fn lost(&mut self, sender: &Endpoint, kind: PayloadKind) -> bool {
        if self.forced_drops.remove(&(sender.clone(), kind)) {
            return true;
        }
        self.config.drop_probability > 0.0 && self.rng.random::<f64>() < self.config.drop_probability
    }

    fn stamp(&mut self, sender: Endpoint, recipient: Recipient, payload: Payload) -> Message {
        self.next_id += 1;
        Message {
            msg_id: self.next_id,
            sender,
            recipient,
            sent_tick: self.tick,
            sent_at: self.tick as f64 * self.dt,
            payload,
        }
    }

    /// Enqueue a message for delivery at the next tick boundary. Recipients out
    /// of range silently receive nothing. Returns the message id.
    pub fn send<L: Locate + ?Sized>(&mut self, sender: Endpoint, recipient: Recipient, payload: Payload, world: &L) -> u64 {
        let kind = payload.kind();
        let msg = self.stamp(sender.clone(), recipient.clone(), payload);
        let id = msg.msg_id;
        self.events.push(Event::MessageSent { message: msg.clone() });
        if self.lost(&sender, kind) {
            self.events.push(Event::MessageDropped {
                msg_id: id,
                reason: "lost".into(),
            });
            return id;
        }
        let from = world.locate(&sender);
        let candidates: Vec<Endpoint> = match &recipient {
            Recipient::Tms => vec![Endpoint::Tms],
            Recipient::Vehicle(v) => vec![Endpoint::Vehicle(v.clone())],
            Recipient::Broadcast => {
                let mut all: Vec<Endpoint> = self.listeners.iter().map(|l| Endpoint::Vehicle(l.clone())).collect();
                all.push(Endpoint::Tms);
                all.retain(|e| *e != sender);
                all
            }
        };
        let reachable: Vec<Endpoint> = candidates
            .into_iter()
            .filter(|e| self.in_range(from, world.locate(e)))
            .collect();
        if reachable.is_empty() {
            self.events.push(Event::MessageDropped {
                msg_id: id,
                reason: "out of range".into(),
            });
            return id;
        }
        self.queue.push_back((msg, reachable));
        id
    }

    /// Hand an evaluation half to the bus. It is delivered only together with
    /// the partner's half for the same recommendation.
    pub fn submit_evaluation<L: Locate + ?Sized>(&mut self, eval: EvaluationMessage, world: &L) -> Result<()> {
        if let Some(&delivered) = self.exchanged.get(&eval.rec_id) {
            if eval.produced_tick >= delivered {
                return Err(Error::StaleEvaluation(eval.rec_id));
            }
        }
        let sender = Endpoint::Vehicle(eval.sender.clone());
        let msg = self.stamp(sender.clone(), Recipient::Vehicle(String::new()), Payload::Evaluation(eval.clone()));
        self.events.push(Event::MessageSent { message: msg.clone() });
        if self.lost(&sender, PayloadKind::Evaluation) {
            self.events.push(Event::MessageDropped {
                msg_id: msg.msg_id,
                reason: "lost".into(),
            });
            return Ok(());
        }
        let sender_loc = world.locate(&sender);
        self.held.entry(eval.rec_id).or_default().push(Held {
            eval,
            sender_loc,
            held_at: self.tick,
        });
        Ok(())
    }

    /// Advance to `tick` and deliver everything sent before it.
    pub fn deliver<L: Locate + ?Sized>(&mut self, tick: u64, world: &L) {
        self.tick = tick;
        while self.queue.front().is_some_and(|(m, _)| m.sent_tick < tick) {
            let (msg, to) = self.queue.pop_front().expect("front exists");
            for e in to {
                if matches!(&e, Endpoint::Vehicle(v) if !self.listeners.contains(v)) && msg.recipient == Recipient::Broadcast {
                    continue;
                }
                self.events.push(Event::MessageDelivered {
                    msg_id: msg.msg_id,
                    recipient: e.clone(),
                });
                self.inboxes.entry(e).or_default().push(msg.clone());
            }
        }

        let ready: Vec<u64> = self
            .held
            .iter()
            .filter(|(_, h)| h.len() >= 2 && h.iter().all(|x| x.held_at < tick))
            .map(|(r, _)| *r)
            .collect();
        for rec in ready {
            let mut halves = self.held.remove(&rec).expect("ready");
            let b = halves.pop().expect("two halves");
            let a = halves.pop().expect("two halves");
            if let Err(e) = self.exchange(a, b, world) {
                self.events.push(Event::MessageDropped {
                    msg_id: 0,
                    reason: e.to_string(),
                });
            }
        }

        let expired: Vec<u64> = self
            .held
            .iter()
            .filter(|(_, h)| h.iter().all(|x| tick.saturating_sub(x.held_at) > EVALUATION_HOLD_TICKS))
            .map(|(r, _)| *r)
            .collect();
        for rec in expired {
            self.held.remove(&rec);
            self.events.push(Event::MessageDropped {
                msg_id: 0,
                reason: format!("evaluation for recommendation {rec} expired without partner"),
            });
        }
    }

    fn exchange<L: Locate + ?Sized>(&mut self, a: Held, b: Held, world: &L) -> Result<()> {
        exchange_evaluations(&a.eval, &b.eval, self.tick)?;
        if self.in_range(a.sender_loc, b.sender_loc) {
            for (from, to) in [(&a, &b), (&b, &a)] {
                let msg = self.stamp(
                    Endpoint::Vehicle(from.eval.sender.clone()),
                    Recipient::Vehicle(to.eval.sender.clone()),
                    Payload::Evaluation(from.eval.clone()),
                );
                let recipient = Endpoint::Vehicle(to.eval.sender.clone());
                self.events.push(Event::MessageDelivered {
                    msg_id: msg.msg_id,
                    recipient: recipient.clone(),
                });
                self.inboxes.entry(recipient).or_default().push(msg);
            }
        } else {
            self.events.push(Event::MessageDropped {
                msg_id: 0,
                reason: format!("evaluation partners of recommendation {} out of range", a.eval.rec_id),
            });
        }
        let tms = world.locate(&Endpoint::Tms);
        for h in [&a, &b] {
            if self.in_range(h.sender_loc, tms) {
                let msg = self.stamp(
                    Endpoint::Vehicle(h.eval.sender.clone()),
                    Recipient::Tms,
                    Payload::Evaluation(h.eval.clone()),
                );
                self.events.push(Event::MessageDelivered {
                    msg_id: msg.msg_id,
                    recipient: Endpoint::Tms,
                });
                self.inboxes.entry(Endpoint::Tms).or_default().push(msg);
            }
        }
        self.exchanged.insert(a.eval.rec_id, self.tick);
        Ok(())
    }

    pub fn take_inbox(&mut self, endpoint: &Endpoint) -> Vec<Message> {
        self.inboxes.remove(endpoint).unwrap_or_default()
    }

    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }
}

/// Check the simultaneity contract for a pair of evaluations delivered at
/// `delivery_tick`: same recommendation, different senders, both produced
/// before delivery.
pub fn exchange_evaluations(e1: &EvaluationMessage, e2: &EvaluationMessage, delivery_tick: u64) -> Result<()> {
    if e1.rec_id != e2.rec_id || e1.sender == e2.sender || e1.role == e2.role {
        return Err(Error::Validation {
            rule: "evaluation pair",
            detail: format!("{} / {}", e1.rec_id, e2.rec_id),
        });
    }
    if e1.produced_tick >= delivery_tick || e2.produced_tick >= delivery_tick {
        return Err(Error::StaleEvaluation(e1.rec_id));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(BTreeMap<Endpoint, Location>);

    impl Locate for Fixed {
        fn locate(&self, e: &Endpoint) -> Option<Location> {
            self.0.get(e).copied()
        }
    }

    fn at(offsets: &[(&str, Approach, f64)]) -> Fixed {
        let mut m = BTreeMap::new();
        m.insert(Endpoint::Tms, Location::Reference);
        for (id, a, o) in offsets {
            m.insert(Endpoint::Vehicle(id.to_string()), Location::Approach { approach: *a, offset: *o });
        }
        Fixed(m)
    }

    fn veh(id: &str) -> Endpoint {
        Endpoint::Vehicle(id.into())
    }

    fn update(id: &str) -> Payload {
        Payload::TrackUpdate(TrackUpdate {
            vehicle_id: id.into(),
            lane: "W1".into(),
            pos: 0.0,
            speed: 0.0,
        })
    }

    fn eval(rec: u64, sender: &str, role: Role, tick: u64) -> EvaluationMessage {
        EvaluationMessage {
            rec_id: rec,
            sender: sender.into(),
            role,
            produced_tick: tick,
            half: PayoffMatrix::from_pairs(&[vec![(1.0, 0.0)]]).half(role),
        }
    }

    #[test]
    fn range_gating_and_latency() {
        let w = at(&[("near", Approach::W, -150.0), ("far", Approach::W, -250.0)]);
        let mut bus = Bus::new(BusConfig::default(), 1, 0.1);
        bus.send(veh("near"), Recipient::Tms, update("near"), &w);
        bus.send(veh("far"), Recipient::Tms, update("far"), &w);
        assert!(bus.take_inbox(&Endpoint::Tms).is_empty());
        bus.deliver(1, &w);
        let got = bus.take_inbox(&Endpoint::Tms);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].sender, veh("near"));
        assert_eq!(got[0].sent_tick, 0);
    }

    #[test]
    fn vehicle_distances() {
        let a = Location::Approach { approach: Approach::W, offset: -100.0 };
        let b = Location::Approach { approach: Approach::W, offset: -20.0 };
        let c = Location::Approach { approach: Approach::N, offset: -150.0 };
        assert_eq!(a.distance(b), 80.0);
        assert_eq!(a.distance(c), 250.0);
        assert_eq!(Location::Reference.distance(b), 20.0);
    }

    #[test]
    fn broadcast_reaches_registered_in_range_only() {
        let w = at(&[
            ("s", Approach::W, 50.0),
            ("a", Approach::W, -100.0),
            ("b", Approach::E, -100.0),
            ("c", Approach::W, -180.0),
        ]);
        let mut bus = Bus::new(BusConfig::default(), 1, 0.1);
        for id in ["a", "b", "c"] {
            bus.register(id);
        }
        bus.send(veh("s"), Recipient::Broadcast, update("s"), &w);
        bus.deliver(1, &w);
        let a = bus.take_inbox(&veh("a"));
        let b = bus.take_inbox(&veh("b"));
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_eq!(a[0].payload, b[0].payload);
        assert!(bus.take_inbox(&veh("c")).is_empty());
        assert_eq!(bus.take_inbox(&Endpoint::Tms).len(), 1);
    }

    #[test]
    fn fifo_per_pair() {
        let w = at(&[("a", Approach::S, -10.0)]);
        let mut bus = Bus::new(BusConfig::default(), 1, 0.1);
        let ids: Vec<u64> = (0..5).map(|_| bus.send(veh("a"), Recipient::Tms, update("a"), &w)).collect();
        bus.deliver(1, &w);
        let got: Vec<u64> = bus.take_inbox(&Endpoint::Tms).iter().map(|m| m.msg_id).collect();
        assert_eq!(got, ids);
    }

    #[test]
    fn evaluations_are_exchanged_atomically() {
        let w = at(&[("a", Approach::W, -100.0), ("b", Approach::W, -105.0)]);
        let mut bus = Bus::new(BusConfig::default(), 1, 0.1);
        bus.deliver(100, &w);
        bus.submit_evaluation(eval(7, "a", Role::First, 100), &w).unwrap();
        bus.deliver(101, &w);
        assert!(bus.take_inbox(&veh("b")).is_empty(), "half delivered alone");
        bus.submit_evaluation(eval(7, "b", Role::Second, 101), &w).unwrap();
        bus.deliver(102, &w);
        let a = bus.take_inbox(&veh("a"));
        let b = bus.take_inbox(&veh("b"));
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert!(matches!(&a[0].payload, Payload::Evaluation(e) if e.sender == "b"));
        assert_eq!(bus.take_inbox(&Endpoint::Tms).len(), 2, "monitoring tap");
        let late = bus.submit_evaluation(eval(7, "b", Role::Second, 102), &w);
        assert!(matches!(late, Err(Error::StaleEvaluation(7))));
    }

    #[test]
    fn exchange_contract() {
        let e1 = eval(1, "a", Role::First, 100);
        let e2 = eval(1, "b", Role::Second, 100);
        assert!(exchange_evaluations(&e1, &e2, 101).is_ok());
        let late = eval(1, "b", Role::Second, 102);
        assert!(matches!(exchange_evaluations(&e1, &late, 101), Err(Error::StaleEvaluation(1))));
        assert!(exchange_evaluations(&e1, &eval(2, "b", Role::Second, 100), 101).is_err());
    }

    #[test]
    fn forced_drop_and_expiry() {
        let w = at(&[("a", Approach::W, -100.0), ("b", Approach::W, -105.0)]);
        let mut bus = Bus::new(BusConfig::default(), 1, 0.1);
        bus.force_drop(veh("b"), PayloadKind::Evaluation);
        bus.submit_evaluation(eval(3, "a", Role::First, 0), &w).unwrap();
        bus.submit_evaluation(eval(3, "b", Role::Second, 0), &w).unwrap();
        for t in 1..10 {
            bus.deliver(t, &w);
        }
        assert!(bus.take_inbox(&veh("a")).is_empty());
        let events = bus.drain_events();
        assert!(events.iter().any(|e| matches!(e, Event::MessageDropped { reason, .. } if reason.contains("expired"))));
    }

    #[test]
    fn zero_drop_probability_never_drops() {
        let w = at(&[("a", Approach::W, -10.0)]);
        let mut bus = Bus::new(BusConfig::default(), 9, 0.1);
        for _ in 0..1000 {
            bus.send(veh("a"), Recipient::Tms, update("a"), &w);
        }
        bus.deliver(1, &w);
        assert_eq!(bus.take_inbox(&Endpoint::Tms).len(), 1000);
    }

    proptest::proptest! {
        #[test]
        fn nothing_beyond_range(offset in -400.0f64..400.0) {
            let w = at(&[("a", Approach::N, offset)]);
            let mut bus = Bus::new(BusConfig::default(), 1, 0.1);
            bus.send(veh("a"), Recipient::Tms, update("a"), &w);
            bus.deliver(1, &w);
            let n = bus.take_inbox(&Endpoint::Tms).len();
            proptest::prop_assert_eq!(n == 1, offset.abs() <= DEFAULT_RANGE);
        }
    }
}
