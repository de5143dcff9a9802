//! Load the bundled scenario and print signal states and the signal course a
//! subscriber would receive.

use coopsim::netmodel::{signal_state, Scenario};

fn main() {
    let s = Scenario::default_intersection();
    s.validate().expect("bundled scenario is valid");
    println!("{}: {} lanes, cycle {} s", s.name, s.lanes.len(), s.signal_plan.cycle_length);

    for t in (0..90).step_by(10) {
        let states: Vec<String> = s
            .signal_plan
            .groups
            .iter()
            .map(|g| format!("{}={:?}", g.id, signal_state(&s.signal_plan, &g.id, f64::from(t)).unwrap()))
            .collect();
        println!("t={t:>3}  {}", states.join("  "));
    }

    println!("course from t=30 over the next 60 s:");
    for e in s.signal_plan.course(30.0, 60.0) {
        println!("  {:>3} {:?} {:>5.1}..{:<5.1}", e.group, e.state, e.start, e.end);
    }
}
