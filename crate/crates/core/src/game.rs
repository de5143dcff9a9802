//! Two-player static games over strategy combinations.
//!
//! A negotiation runs through four matrix shapes: the empty recommendation
//! matrix, two half-filled evaluation matrices (one per player) and the merged
//! decision matrix. All four are the same [`PayoffMatrix`] type; which payoff
//! sides are present distinguishes them.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GameError {
    #[error("matrix dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("missing payoff for player {player} at {cell}")]
    MissingEntry { player: u8, cell: Combination },
    #[error("conflicting payoffs for player {player} at {cell}")]
    ConflictingEntry { player: u8, cell: Combination },
    #[error("combination {0} lies outside the matrix")]
    InvalidCell(Combination),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Longitudinal {
    Continue,
    Decelerate,
    Accelerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lateral {
    Continue,
    LaneChange,
}

/// An abstract (longitudinal, lateral) behaviour available to one player.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub id: String,
    pub longitudinal: Longitudinal,
    pub lateral: Lateral,
}

impl Strategy {
    pub fn new(id: impl Into<String>, longitudinal: Longitudinal, lateral: Lateral) -> Self {
        Strategy {
            id: id.into(),
            longitudinal,
            lateral,
        }
    }
}

/// The player a vehicle takes in a cooperation: `First` benefits directly,
/// `Second` supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    First,
    Second,
}

impl Role {
    pub fn index(self) -> u8 {
        match self {
            Role::First => 1,
            Role::Second => 2,
        }
    }

    pub fn partner(self) -> Role {
        match self {
            Role::First => Role::Second,
            Role::Second => Role::First,
        }
    }
}

/// A cell of the game: row strategy of player one, column strategy of player two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combination {
    pub row: usize,
    pub col: usize,
}

impl Combination {
    pub const fn new(row: usize, col: usize) -> Self {
        Combination { row, col }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub p1: Option<f64>,
    pub p2: Option<f64>,
}

impl Cell {
    pub fn full(p1: f64, p2: f64) -> Self {
        Cell {
            p1: Some(p1),
            p2: Some(p2),
        }
    }

    pub fn get(&self, role: Role) -> Option<f64> {
        match role {
            Role::First => self.p1,
            Role::Second => self.p2,
        }
    }

    fn slot(&mut self, role: Role) -> &mut Option<f64> {
        match role {
            Role::First => &mut self.p1,
            Role::Second => &mut self.p2,
        }
    }
}

/// Bimatrix over strategy combinations with optionally-absent payoffs.
///
/// `cells` is row-major: `cells[i][j]` pairs row strategy `rows[i]` with
/// column strategy `cols[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    pub rows: Vec<Strategy>,
    pub cols: Vec<Strategy>,
    pub cells: Vec<Vec<Cell>>,
}

impl PayoffMatrix {
    /// An empty matrix: every payoff absent.
    pub fn empty(rows: Vec<Strategy>, cols: Vec<Strategy>) -> Self {
        let cells = vec![vec![Cell::default(); cols.len()]; rows.len()];
        PayoffMatrix { rows, cols, cells }
    }

    /// Build a complete matrix from `(p1, p2)` pairs, using generated strategy ids.
    pub fn from_pairs(pairs: &[Vec<(f64, f64)>]) -> Self {
        let n_rows = pairs.len();
        let n_cols = pairs.first().map_or(0, Vec::len);
        let rows = (0..n_rows)
            .map(|i| Strategy::new(format!("S1.{}", i + 1), Longitudinal::Continue, Lateral::Continue))
            .collect();
        let cols = (0..n_cols)
            .map(|j| Strategy::new(format!("S2.{}", j + 1), Longitudinal::Continue, Lateral::Continue))
            .collect();
        let cells = pairs
            .iter()
            .map(|row| row.iter().map(|&(a, b)| Cell::full(a, b)).collect())
            .collect();
        PayoffMatrix { rows, cols, cells }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn cell(&self, c: Combination) -> Option<&Cell> {
        self.cells.get(c.row).and_then(|r| r.get(c.col))
    }

    pub fn contains(&self, c: Combination) -> bool {
        c.row < self.rows.len() && c.col < self.cols.len()
    }

    pub fn combinations(&self) -> impl Iterator<Item = Combination> + '_ {
        let (n, m) = self.dims();
        (0..n).flat_map(move |row| (0..m).map(move |col| Combination { row, col }))
    }

    pub fn set(&mut self, c: Combination, role: Role, payoff: f64) -> Result<(), GameError> {
        let cell = self
            .cells
            .get_mut(c.row)
            .and_then(|r| r.get_mut(c.col))
            .ok_or(GameError::InvalidCell(c))?;
        *cell.slot(role) = Some(payoff);
        Ok(())
    }

    /// Keep only `role`'s payoffs.
    pub fn half(&self, role: Role) -> PayoffMatrix {
        let mut out = PayoffMatrix::empty(self.rows.clone(), self.cols.clone());
        for (dst, src) in out.cells.iter_mut().flatten().zip(self.cells.iter().flatten()) {
            *dst.slot(role) = src.get(role);
        }
        out
    }

    pub fn has_complete_side(&self, role: Role) -> bool {
        self.cells.iter().flatten().all(|c| c.get(role).is_some())
    }

    pub fn is_complete(&self) -> bool {
        self.has_complete_side(Role::First) && self.has_complete_side(Role::Second)
    }

    pub fn is_empty_of_payoffs(&self) -> bool {
        self.cells.iter().flatten().all(|c| c.p1.is_none() && c.p2.is_none())
    }

    /// Apply `f` to every present payoff of `role`.
    pub fn map_side(&self, role: Role, f: impl Fn(f64) -> f64) -> PayoffMatrix {
        let mut out = self.clone();
        for cell in out.cells.iter_mut().flatten() {
            let slot = cell.slot(role);
            *slot = slot.map(&f);
        }
        out
    }

    /// Swap player roles: rows become columns and payoffs trade places.
    pub fn transposed(&self) -> PayoffMatrix {
        let (n, m) = self.dims();
        let cells = (0..m)
            .map(|j| {
                (0..n)
                    .map(|i| {
                        let c = self.cells[i][j];
                        Cell { p1: c.p2, p2: c.p1 }
                    })
                    .collect()
            })
            .collect();
        PayoffMatrix {
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            cells,
        }
    }

    fn payoff(&self, c: Combination, role: Role) -> Result<f64, GameError> {
        self.cells[c.row][c.col].get(role).ok_or(GameError::MissingEntry {
            player: role.index(),
            cell: c,
        })
    }

    fn same_shape(&self, other: &PayoffMatrix) -> Result<(), GameError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(GameError::DimensionMismatch(format!(
                "{}x{} vs {}x{} (or strategy sets differ)",
                self.rows.len(),
                self.cols.len(),
                other.rows.len(),
                other.cols.len()
            )));
        }
        Ok(())
    }
}

/// Merge two evaluation halves into a decision matrix.
///
/// Argument order does not matter: each side's payoffs are taken from
/// whichever matrix carries them. A side present in both with different
/// values is a conflict; a side present in neither is a missing entry.
pub fn merge_evaluations(a: &PayoffMatrix, b: &PayoffMatrix) -> Result<PayoffMatrix, GameError> {
    a.same_shape(b)?;
    let mut merged = PayoffMatrix::empty(a.rows.clone(), a.cols.clone());
    for c in a.combinations() {
        let (ca, cb) = (a.cells[c.row][c.col], b.cells[c.row][c.col]);
        for role in [Role::First, Role::Second] {
            let value = match (ca.get(role), cb.get(role)) {
                (Some(x), Some(y)) if x.to_bits() != y.to_bits() => {
                    return Err(GameError::ConflictingEntry {
                        player: role.index(),
                        cell: c,
                    })
                }
                (Some(x), _) | (None, Some(x)) => x,
                (None, None) => {
                    return Err(GameError::MissingEntry {
                        player: role.index(),
                        cell: c,
                    })
                }
            };
            *merged.cells[c.row][c.col].slot(role) = Some(value);
        }
    }
    Ok(merged)
}

/// All pure-strategy Nash equilibria of a complete matrix, row-major.
///
/// Best responses use weak inequalities, so ties yield several equilibria.
pub fn pure_nash_equilibria(d: &PayoffMatrix) -> Result<Vec<Combination>, GameError> {
    let (n, m) = d.dims();
    if n == 0 || m == 0 {
        return Err(GameError::DimensionMismatch("empty matrix".into()));
    }
    if !d.is_complete() {
        let missing = d
            .combinations()
            .find_map(|c| {
                let cell = &d.cells[c.row][c.col];
                match (cell.p1, cell.p2) {
                    (None, _) => Some((1, c)),
                    (_, None) => Some((2, c)),
                    _ => None,
                }
            })
            .expect("incomplete matrix has a missing cell");
        return Err(GameError::MissingEntry {
            player: missing.0,
            cell: missing.1,
        });
    }

    // Column maxima of player one and row maxima of player two.
    let mut col_best = vec![f64::NEG_INFINITY; m];
    let mut row_best = vec![f64::NEG_INFINITY; n];
    for c in d.combinations() {
        let p1 = d.payoff(c, Role::First)?;
        let p2 = d.payoff(c, Role::Second)?;
        col_best[c.col] = col_best[c.col].max(p1);
        row_best[c.row] = row_best[c.row].max(p2);
    }

    let mut out = Vec::new();
    for c in d.combinations() {
        if d.payoff(c, Role::First)? >= col_best[c.col] && d.payoff(c, Role::Second)? >= row_best[c.row] {
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoEquilibrium,
    MultipleEquilibria,
    EquilibriumDiffersFromR,
    ProtocolAbort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Execute(Combination),
    Reject(RejectReason),
}

impl Decision {
    pub fn is_execute(&self) -> bool {
        matches!(self, Decision::Execute(_))
    }
}

/// Execute only if there is exactly one equilibrium and it equals the
/// recommended combination.
pub fn decide(d: &PayoffMatrix, recommended: Combination) -> Result<Decision, GameError> {
    if !d.contains(recommended) {
        return Err(GameError::InvalidCell(recommended));
    }
    let eq = pure_nash_equilibria(d)?;
    Ok(match eq.as_slice() {
        [] => Decision::Reject(RejectReason::NoEquilibrium),
        [only] if *only == recommended => Decision::Execute(*only),
        [_] => Decision::Reject(RejectReason::EquilibriumDiffersFromR),
        _ => Decision::Reject(RejectReason::MultipleEquilibria),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest, ProptestConfig};
    use proptest::strategy::Strategy as _;

    /// Independent check: a cell is an equilibrium iff no unilateral deviation
    /// strictly improves the deviating player.
    fn oracle(pairs: &[Vec<(f64, f64)>]) -> Vec<Combination> {
        let n = pairs.len();
        let m = pairs[0].len();
        let mut out = vec![];
        for i in 0..n {
            for j in 0..m {
                let row_dev = (0..n).any(|k| pairs[k][j].0 > pairs[i][j].0);
                let col_dev = (0..m).any(|l| pairs[i][l].1 > pairs[i][j].1);
                if !row_dev && !col_dev {
                    out.push(Combination::new(i, j));
                }
            }
        }
        out
    }

    fn table5() -> Vec<Vec<(f64, f64)>> {
        vec![vec![(4.0, 2.0), (3.0, -2.0)], vec![(-2.0, 1.0), (1.0, 0.0)]]
    }

    fn game() -> impl proptest::strategy::Strategy<Value = Vec<Vec<(f64, f64)>>> {
        (1usize..=4, 1usize..=4).prop_flat_map(|(n, m)| {
            prop::collection::vec(
                prop::collection::vec(((-5i32..=5), (-5i32..=5)).prop_map(|(a, b)| (a as f64, b as f64)), m),
                n,
            )
        })
    }

    #[test]
    fn table5_has_single_equilibrium() {
        let d = PayoffMatrix::from_pairs(&table5());
        assert_eq!(pure_nash_equilibria(&d).unwrap(), vec![Combination::new(0, 0)]);
        assert_eq!(oracle(&table5()), vec![Combination::new(0, 0)]);
    }

    #[test]
    fn one_by_one_is_its_own_equilibrium() {
        let d = PayoffMatrix::from_pairs(&[vec![(-3.0, 7.0)]]);
        assert_eq!(pure_nash_equilibria(&d).unwrap(), vec![Combination::new(0, 0)]);
    }

    #[test]
    fn coordination_game_rejects() {
        let d = PayoffMatrix::from_pairs(&[vec![(1.0, 1.0), (0.0, 0.0)], vec![(0.0, 0.0), (1.0, 1.0)]]);
        for r in d.combinations().collect::<Vec<_>>() {
            assert_eq!(decide(&d, r).unwrap(), Decision::Reject(RejectReason::MultipleEquilibria));
        }
    }

    #[test]
    fn unique_but_different_rejects() {
        let d = PayoffMatrix::from_pairs(&table5());
        assert_eq!(
            decide(&d, Combination::new(1, 1)).unwrap(),
            Decision::Reject(RejectReason::EquilibriumDiffersFromR)
        );
        assert_eq!(decide(&d, Combination::new(0, 0)).unwrap(), Decision::Execute(Combination::new(0, 0)));
    }

    #[test]
    fn matching_pennies_has_no_pure_equilibrium() {
        let d = PayoffMatrix::from_pairs(&[vec![(1.0, -1.0), (-1.0, 1.0)], vec![(-1.0, 1.0), (1.0, -1.0)]]);
        assert!(pure_nash_equilibria(&d).unwrap().is_empty());
        assert_eq!(
            decide(&d, Combination::new(0, 0)).unwrap(),
            Decision::Reject(RejectReason::NoEquilibrium)
        );
    }

    #[test]
    fn incomplete_matrix_is_an_error() {
        let d = PayoffMatrix::from_pairs(&table5()).half(Role::First);
        assert!(matches!(
            pure_nash_equilibria(&d),
            Err(GameError::MissingEntry { player: 2, .. })
        ));
    }

    #[test]
    fn recommendation_outside_matrix() {
        let d = PayoffMatrix::from_pairs(&table5());
        assert_eq!(
            decide(&d, Combination::new(2, 0)),
            Err(GameError::InvalidCell(Combination::new(2, 0)))
        );
    }

    #[test]
    fn merge_is_role_directed() {
        let d = PayoffMatrix::from_pairs(&table5());
        let (e1, e2) = (d.half(Role::First), d.half(Role::Second));
        assert_eq!(merge_evaluations(&e1, &e2).unwrap(), d);
        assert_eq!(merge_evaluations(&e2, &e1).unwrap(), d);
    }

    #[test]
    fn merge_reports_missing_and_conflicting() {
        let d = PayoffMatrix::from_pairs(&table5());
        let mut e1 = d.half(Role::First);
        e1.cells[1][0].p1 = None;
        assert_eq!(
            merge_evaluations(&e1, &d.half(Role::Second)),
            Err(GameError::MissingEntry {
                player: 1,
                cell: Combination::new(1, 0)
            })
        );

        let mut other = d.clone();
        other.cells[0][1].p2 = Some(9.0);
        assert_eq!(
            merge_evaluations(&d, &other),
            Err(GameError::ConflictingEntry {
                player: 2,
                cell: Combination::new(0, 1)
            })
        );

        let small = PayoffMatrix::from_pairs(&[vec![(1.0, 1.0)]]);
        assert!(matches!(
            merge_evaluations(&small, &d),
            Err(GameError::DimensionMismatch(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn solver_matches_oracle(pairs in game()) {
            let d = PayoffMatrix::from_pairs(&pairs);
            prop_assert_eq!(pure_nash_equilibria(&d).unwrap(), oracle(&pairs));
        }

        #[test]
        fn affine_transform_keeps_equilibria(pairs in game(), alpha in 0.01f64..10.0, beta in -10.0f64..10.0, second in any::<bool>()) {
            let d = PayoffMatrix::from_pairs(&pairs);
            let role = if second { Role::Second } else { Role::First };
            // Integer payoffs with α ≥ 0.01 keep distinct values distinct after rounding.
            let t = d.map_side(role, |x| alpha * x + beta);
            let before = pure_nash_equilibria(&d).unwrap();
            let after = pure_nash_equilibria(&t).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn transposition_swaps_coordinates(pairs in game()) {
            let d = PayoffMatrix::from_pairs(&pairs);
            let mut expected: Vec<_> = pure_nash_equilibria(&d).unwrap()
                .into_iter().map(|c| Combination::new(c.col, c.row)).collect();
            expected.sort();
            prop_assert_eq!(pure_nash_equilibria(&d.transposed()).unwrap(), expected);
        }

        #[test]
        fn decide_is_pure(pairs in game(), r in (0usize..4, 0usize..4)) {
            let d = PayoffMatrix::from_pairs(&pairs);
            let r = Combination::new(r.0 % d.rows.len(), r.1 % d.cols.len());
            prop_assert_eq!(decide(&d, r), decide(&d.clone(), r));
        }
    }
}
