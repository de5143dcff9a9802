//! Two half-filled evaluations are merged into the decision matrix, solved
//! for pure equilibria and checked against the TMS recommendation.

use coopsim::game::{decide, merge_evaluations, pure_nash_equilibria, Combination, Lateral, Longitudinal, PayoffMatrix, Role, Strategy};

fn main() {
    let rows = vec![
        Strategy::new("S1.1", Longitudinal::Continue, Lateral::LaneChange),
        Strategy::new("S1.2", Longitudinal::Decelerate, Lateral::Continue),
    ];
    let cols = vec![
        Strategy::new("S2.1", Longitudinal::Decelerate, Lateral::Continue),
        Strategy::new("S2.2", Longitudinal::Continue, Lateral::Continue),
    ];

    // Each vehicle fills only its own side.
    let mut e1 = PayoffMatrix::empty(rows.clone(), cols.clone());
    let mut e2 = PayoffMatrix::empty(rows, cols);
    let own = [[(4.0, 2.0), (3.0, -2.0)], [(-2.0, 1.0), (1.0, 0.0)]];
    for (i, row) in own.iter().enumerate() {
        for (j, &(p1, p2)) in row.iter().enumerate() {
            e1.set(Combination::new(i, j), Role::First, p1).unwrap();
            e2.set(Combination::new(i, j), Role::Second, p2).unwrap();
        }
    }

    let d = merge_evaluations(&e1, &e2).expect("halves fit together");
    for (i, row) in d.cells.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("({}, {})", c.p1.unwrap(), c.p2.unwrap())).collect();
        println!("{:5} {}", d.rows[i].id, cells.join("  "));
    }

    let ne = pure_nash_equilibria(&d).unwrap();
    let names: Vec<String> = ne.iter().map(|c| format!("({}, {})", d.rows[c.row].id, d.cols[c.col].id)).collect();
    println!("pure equilibria: {}", names.join(", "));

    let recommended = Combination::new(0, 0);
    println!("decision for R = (S1.1, S2.1): {:?}", decide(&d, recommended).unwrap());
    println!("decision for R = (S1.2, S2.2): {:?}", decide(&d, Combination::new(1, 1)).unwrap());
}
