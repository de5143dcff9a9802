//! A CHAV and an HV approach a red light on neighbouring lanes. Prints the
//! speed trace of both and the closed-form safe speed.

use std::sync::Arc;

use coopsim::dynamics::{safe_speed, SpawnRequest, VehicleKind, World};
use coopsim::netmodel::{EntityKind, Movement, Scenario};

fn request(id: &str, lane: &str, kind: VehicleKind) -> SpawnRequest {
    SpawnRequest {
        id: id.into(),
        time: 0.0,
        kind: EntityKind::Car,
        origin: lane.into(),
        vehicle_kind: kind,
        movement: Some(Movement::Straight),
        pos: Some(150.0),
        speed: Some(0.0),
    }
}

fn main() {
    println!("safe_speed(gap 20 m, leader 10 m/s, b 4.5, tau 1.0) = {:.3} m/s", safe_speed(20.0, 10.0, 4.5, 1.0));

    let mut s = Scenario::default_intersection();
    s.generator = None;
    s.demand.clear();
    let mut world = World::new(Arc::new(s), 42, 0.1);
    world.enqueue([request("chav", "E1", VehicleKind::Chav), request("hv", "E2", VehicleKind::Hv)]);

    println!("{:>6} {:>10} {:>10} {:>10} {:>10}  EW", "t", "chav pos", "chav v", "hv pos", "hv v");
    for tick in 0..=400 {
        if tick % 25 == 0 {
            let (c, h) = (world.vehicle("chav"), world.vehicle("hv"));
            if let (Some(c), Some(h)) = (c, h) {
                println!(
                    "{:>6.1} {:>10.1} {:>10.2} {:>10.1} {:>10.2}  {:?}",
                    world.t,
                    c.pos,
                    c.speed,
                    h.pos,
                    h.speed,
                    world.signal("EW")
                );
            }
        }
        world.step();
    }
    println!("negative gaps: {}", world.safety.negative_gaps);
}
