//! The message bus on its own: range gating, one-tick latency and the
//! simultaneous hand-over of evaluation halves.

use std::collections::BTreeMap;

use coopsim::bus::{Bus, BusConfig, Endpoint, EvaluationMessage, Locate, Location, Payload, Recipient, TrackUpdate};
use coopsim::game::{PayoffMatrix, Role};
use coopsim::netmodel::Approach;

/// Fixed positions, as offsets from the west stop line.
struct Positions(BTreeMap<String, f64>);

impl Locate for Positions {
    fn locate(&self, e: &Endpoint) -> Option<Location> {
        match e {
            Endpoint::Tms => Some(Location::Reference),
            Endpoint::Vehicle(id) => self.0.get(id).map(|&offset| Location::Approach { approach: Approach::W, offset }),
        }
    }
}

fn main() {
    let world = Positions(BTreeMap::from([("near".to_string(), -120.0), ("far".to_string(), -260.0), ("helper".to_string(), -130.0)]));
    let mut bus = Bus::new(BusConfig::default(), 1, 0.1);
    for id in ["near", "far", "helper"] {
        bus.register(id);
    }

    bus.deliver(0, &world);
    for id in ["near", "far"] {
        let update = TrackUpdate {
            vehicle_id: id.into(),
            lane: "W1".into(),
            pos: 400.0 + world.0[id],
            speed: 13.9,
        };
        bus.send(Endpoint::Vehicle(id.into()), Recipient::Tms, Payload::TrackUpdate(update), &world);
    }
    println!("tick 0: TMS inbox holds {} messages", bus.take_inbox(&Endpoint::Tms).len());
    bus.deliver(1, &world);
    let got: Vec<String> = bus
        .take_inbox(&Endpoint::Tms)
        .into_iter()
        .map(|m| format!("{:?}", m.sender))
        .collect();
    println!("tick 1: TMS received from {got:?} (the far vehicle was out of range)");

    let half = |role: Role, v: f64| {
        PayoffMatrix::from_pairs(&[vec![(v, v)]]).half(role)
    };
    let eval = |sender: &str, role: Role, v: f64, tick: u64| EvaluationMessage {
        rec_id: 7,
        sender: sender.into(),
        role,
        produced_tick: tick,
        half: half(role, v),
    };
    bus.submit_evaluation(eval("near", Role::First, 0.8, 1), &world).unwrap();
    bus.deliver(2, &world);
    println!("tick 2: with one half held, partner inbox has {} messages", bus.take_inbox(&Endpoint::Vehicle("helper".into())).len());
    bus.submit_evaluation(eval("helper", Role::Second, 0.6, 2), &world).unwrap();
    bus.deliver(3, &world);
    for id in ["near", "helper"] {
        let inbox = bus.take_inbox(&Endpoint::Vehicle(id.into()));
        println!("tick 3: {id} received {} evaluation(s)", inbox.len());
    }
    let late = bus.submit_evaluation(eval("helper", Role::Second, 0.1, 3), &world);
    println!("a half produced after the exchange is refused: {:?}", late.err());
}
