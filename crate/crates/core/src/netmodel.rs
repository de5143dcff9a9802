//! Static road network, fixed-time signal plans and scenario files.
//!
//! Lanes are one-dimensional: a position is the distance of a vehicle's front
//! bumper from the lane origin. Every incoming lane continues through the
//! intersection and its exit section, so a vehicle stays on one lane
//! coordinate for its whole life unless it changes lanes upstream.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Scenario file format version understood by [`load_scenario`].
pub const FORMAT_VERSION: u32 = 1;

/// The scenario shipped with the crate.
pub const DEFAULT_SCENARIO_TOML: &str = include_str!("../scenarios/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Approach {
    N,
    E,
    S,
    W,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::N, Approach::E, Approach::S, Approach::W];

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::N => "N",
            Approach::E => "E",
            Approach::S => "S",
            Approach::W => "W",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Movement {
    Left,
    Straight,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub id: String,
    pub approach: Approach,
    /// 0 is the rightmost lane of the approach.
    pub index: u32,
    pub length: f64,
    pub stop_line_pos: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacent_left: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacent_right: Option<String>,
    pub movements: Vec<Movement>,
    pub signal_group: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalState {
    Red,
    Yellow,
    Green,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalInterval {
    pub state: SignalState,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalGroup {
    pub id: String,
    pub intervals: Vec<SignalInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub cycle_length: f64,
    #[serde(default)]
    pub offset: f64,
    pub groups: Vec<SignalGroup>,
    /// Pairs of groups that must never show green at the same time.
    #[serde(default)]
    pub conflicting: Vec<[String; 2]>,
}

/// One interval of a group's upcoming signal course.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalCourseEntry {
    pub group: String,
    pub state: SignalState,
    pub start: f64,
    pub end: f64,
}

impl SignalPlan {
    pub fn group(&self, id: &str) -> Option<&SignalGroup> {
        self.groups.iter().find(|g| g.id == id)
    }

    /// Upcoming intervals of every group within `[t, t + horizon)`.
    pub fn course(&self, t: f64, horizon: f64) -> Vec<SignalCourseEntry> {
        let mut out = Vec::new();
        for g in &self.groups {
            let phase = (t + self.offset).rem_euclid(self.cycle_length);
            let cycle_start = t - phase;
            let mut start = cycle_start;
            'walk: loop {
                for iv in &g.intervals {
                    let end = start + iv.duration;
                    if end > t && iv.duration > 0.0 {
                        out.push(SignalCourseEntry {
                            group: g.id.clone(),
                            state: iv.state,
                            start: start.max(t),
                            end,
                        });
                    }
                    start = end;
                    if start >= t + horizon {
                        break 'walk;
                    }
                }
            }
        }
        out
    }
}

/// Signal state of `group` at time `t`; a pure function of its inputs.
pub fn signal_state(plan: &SignalPlan, group: &str, t: f64) -> Result<SignalState> {
    let g = plan.group(group).ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
    let mut phase = (t + plan.offset).rem_euclid(plan.cycle_length);
    for iv in &g.intervals {
        if phase < iv.duration {
            return Ok(iv.state);
        }
        phase -= iv.duration;
    }
    // Floating-point residue at the very end of the cycle.
    Ok(g.intervals.last().map(|iv| iv.state).unwrap_or(SignalState::Red))
}

/// An area inside the intersection where a vehicle movement crosses VRU paths
/// or another signal group's traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictArea {
    pub id: String,
    pub lane: String,
    pub start: f64,
    pub end: f64,
    /// Vehicle movements on `lane` that must yield inside this area.
    #[serde(default)]
    pub yielding_movements: Vec<Movement>,
    /// VRU paths crossing this area.
    #[serde(default)]
    pub vru_paths: Vec<String>,
    /// Signal groups whose traffic uses this area.
    #[serde(default)]
    pub signal_groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VruPath {
    pub id: String,
    pub length: f64,
    pub signal_group: String,
    /// The signal-controlled section of the path, in arc length.
    pub crossing_start: f64,
    pub crossing_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticObstacle {
    pub id: String,
    pub lane: String,
    pub pos: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Car,
    Truck,
    Cyclist,
    Pedestrian,
}

impl EntityKind {
    pub fn is_vru(self) -> bool {
        matches!(self, EntityKind::Cyclist | EntityKind::Pedestrian)
    }
}

/// Controller override for a demand entry; normally assigned by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Chav,
    Hv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub id: String,
    pub time: f64,
    pub kind: EntityKind,
    /// Lane id for vehicles, path id for VRUs.
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub movement: Option<Movement>,
    /// Spawn position on the lane (default: lane origin).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<f64>,
    /// Initial speed (default: the vehicle's desired speed).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coop_factor: Option<f64>,
}

impl DemandEntry {
    pub fn vehicle(id: impl Into<String>, time: f64, kind: EntityKind, lane: impl Into<String>) -> Self {
        DemandEntry {
            id: id.into(),
            time,
            kind,
            origin: lane.into(),
            movement: None,
            pos: None,
            speed: None,
            controller: None,
            coop_factor: None,
        }
    }
}

/// Poisson demand expanded at load time, appended after explicit entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandGenerator {
    pub seed: u64,
    pub duration: f64,
    pub vehicles_per_hour: f64,
    pub vrus_per_hour: f64,
    #[serde(default)]
    pub truck_share: f64,
    #[serde(default = "half")]
    pub cyclist_share: f64,
    /// Relative weight of each approach; missing approaches get weight 0.
    pub approach_weights: BTreeMap<Approach, f64>,
    /// Optional per-lane weights within an approach; default uniform.
    #[serde(default)]
    pub lane_weights: BTreeMap<String, f64>,
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementZone {
    pub before_stop_line: f64,
    pub after_exit: f64,
}

impl Default for MeasurementZone {
    fn default() -> Self {
        MeasurementZone {
            before_stop_line: 250.0,
            after_exit: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub format_version: u32,
    pub name: String,
    /// Distance from the stop line to the far edge of the intersection box.
    pub intersection_length: f64,
    #[serde(default)]
    pub measurement_zone: MeasurementZone,
    pub signal_plan: SignalPlan,
    pub lanes: Vec<LaneGeometry>,
    #[serde(default)]
    pub conflict_areas: Vec<ConflictArea>,
    #[serde(default)]
    pub vru_paths: Vec<VruPath>,
    #[serde(default)]
    pub static_obstacles: Vec<StaticObstacle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<DemandGenerator>,
    #[serde(default)]
    pub demand: Vec<DemandEntry>,
}

/// Read, parse and validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scenario::from_toml(&text)
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// The bundled four-arm intersection.
    pub fn default_intersection() -> Scenario {
        Scenario::from_toml(DEFAULT_SCENARIO_TOML).expect("bundled scenario is valid")
    }

    pub fn lane(&self, id: &str) -> Result<&LaneGeometry> {
        self.lanes
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLane(id.to_string()))
    }

    pub fn path(&self, id: &str) -> Option<&VruPath> {
        self.vru_paths.iter().find(|p| p.id == id)
    }

    /// Signed distance from `pos` to the lane's stop line; negative once past it.
    pub fn distance_to_stop_line(&self, lane: &str, pos: f64) -> Result<f64> {
        Ok(self.lane(lane)?.stop_line_pos - pos)
    }

    /// Zone entry and exit positions on `lane`.
    pub fn zone_bounds(&self, lane: &LaneGeometry) -> (f64, f64) {
        let enter = lane.stop_line_pos - self.measurement_zone.before_stop_line;
        let exit = lane.stop_line_pos + self.intersection_length + self.measurement_zone.after_exit;
        (enter, exit)
    }

    /// Explicit demand followed by generated demand, sorted by time (stable).
    pub fn expanded_demand(&self) -> Vec<DemandEntry> {
        let mut out = self.demand.clone();
        if let Some(generator) = &self.generator {
            out.extend(generate_demand(self, generator));
        }
        out.sort_by(|a, b| a.time.total_cmp(&b.time));
        out
    }

    /// Scale generator rates, keeping everything else identical.
    pub fn with_demand_scale(mut self, vehicles_per_hour: f64, vrus_per_hour: f64) -> Scenario {
        if let Some(g) = &mut self.generator {
            g.vehicles_per_hour = vehicles_per_hour;
            g.vrus_per_hour = vrus_per_hour;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::validation(
                "format_version",
                format!("expected {FORMAT_VERSION}, got {}", self.format_version),
            ));
        }
        self.validate_plan()?;

        let mut ids = BTreeSet::new();
        for lane in &self.lanes {
            if !ids.insert(lane.id.as_str()) {
                return Err(Error::validation("unique lane ids", &lane.id));
            }
            if !(lane.length > 0.0) {
                return Err(Error::validation("lane length > 0", &lane.id));
            }
            if !(0.0..=lane.length).contains(&lane.stop_line_pos) {
                return Err(Error::validation("0 <= stop_line_pos <= length", &lane.id));
            }
            if self.signal_plan.group(&lane.signal_group).is_none() {
                return Err(Error::validation("lane signal group exists", &lane.id));
            }
        }
        for lane in &self.lanes {
            if let Some(left) = &lane.adjacent_left {
                let other = self
                    .lane(left)
                    .map_err(|_| Error::validation("adjacent lane exists", format!("{} -> {left}", lane.id)))?;
                if other.adjacent_right.as_deref() != Some(lane.id.as_str()) {
                    return Err(Error::validation("adjacency symmetric", format!("{} <-> {left}", lane.id)));
                }
            }
            if let Some(right) = &lane.adjacent_right {
                let other = self
                    .lane(right)
                    .map_err(|_| Error::validation("adjacent lane exists", format!("{} -> {right}", lane.id)))?;
                if other.adjacent_left.as_deref() != Some(lane.id.as_str()) {
                    return Err(Error::validation("adjacency symmetric", format!("{} <-> {right}", lane.id)));
                }
            }
        }

        for area in &self.conflict_areas {
            let lane = self
                .lane(&area.lane)
                .map_err(|_| Error::validation("conflict area lane exists", &area.id))?;
            if !(area.start < area.end) {
                return Err(Error::validation("conflict area start < end", &area.id));
            }
            if area.start < 0.0 || area.end > lane.length {
                return Err(Error::validation("conflict area within lane", &area.id));
            }
            for p in &area.vru_paths {
                if self.path(p).is_none() {
                    return Err(Error::validation("conflict area path exists", format!("{}: {p}", area.id)));
                }
            }
            for g in &area.signal_groups {
                if self.signal_plan.group(g).is_none() {
                    return Err(Error::validation("conflict area group exists", format!("{}: {g}", area.id)));
                }
            }
        }

        for p in &self.vru_paths {
            if !(p.length > 0.0) || !(0.0 <= p.crossing_start && p.crossing_start < p.crossing_end && p.crossing_end <= p.length) {
                return Err(Error::validation("vru path geometry", &p.id));
            }
            if self.signal_plan.group(&p.signal_group).is_none() {
                return Err(Error::validation("vru path signal group exists", &p.id));
            }
        }

        for o in &self.static_obstacles {
            let lane = self
                .lane(&o.lane)
                .map_err(|_| Error::validation("obstacle lane exists", &o.id))?;
            if !(0.0..=lane.length).contains(&o.pos) {
                return Err(Error::validation("obstacle within lane", &o.id));
            }
            if o.pos > lane.stop_line_pos {
                return Err(Error::validation("obstacle upstream of stop line", &o.id));
            }
        }

        let mut last = f64::NEG_INFINITY;
        let mut demand_ids = BTreeSet::new();
        for d in &self.demand {
            if d.time < last {
                return Err(Error::validation("demand times nondecreasing", &d.id));
            }
            last = d.time;
            if !demand_ids.insert(d.id.as_str()) {
                return Err(Error::validation("unique demand ids", &d.id));
            }
            if d.kind.is_vru() {
                if self.path(&d.origin).is_none() {
                    return Err(Error::validation("demand origin exists", &d.id));
                }
            } else {
                let lane = self
                    .lane(&d.origin)
                    .map_err(|_| Error::validation("demand origin exists", &d.id))?;
                if let Some(pos) = d.pos {
                    if !(0.0..lane.length).contains(&pos) {
                        return Err(Error::validation("demand position within lane", &d.id));
                    }
                }
            }
            if let Some(fc) = d.coop_factor {
                if !(0.0..=1.0).contains(&fc) {
                    return Err(Error::validation("coop_factor in [0, 1]", &d.id));
                }
            }
        }

        if let Some(g) = &self.generator {
            if g.duration < 0.0 || g.vehicles_per_hour < 0.0 || g.vrus_per_hour < 0.0 {
                return Err(Error::validation("generator rates nonnegative", "generator"));
            }
            if g.vrus_per_hour > 0.0 && self.vru_paths.is_empty() {
                return Err(Error::validation("generator needs vru paths", "generator"));
            }
            for lane in g.lane_weights.keys() {
                self.lane(lane)
                    .map_err(|_| Error::validation("generator lane weight refers to a lane", lane))?;
            }
        }
        Ok(())
    }

    fn validate_plan(&self) -> Result<()> {
        let plan = &self.signal_plan;
        if !(plan.cycle_length > 0.0) {
            return Err(Error::validation("cycle_length > 0", "signal_plan"));
        }
        for g in &plan.groups {
            let sum: f64 = g.intervals.iter().map(|iv| iv.duration).sum();
            if (sum - plan.cycle_length).abs() > 1e-9 {
                return Err(Error::validation(
                    "group durations sum to cycle_length",
                    format!("{}: {sum} != {}", g.id, plan.cycle_length),
                ));
            }
            if g.intervals.iter().any(|iv| iv.duration < 0.0) {
                return Err(Error::validation("interval durations nonnegative", &g.id));
            }
            let has = |s| g.intervals.iter().any(|iv| iv.state == s && iv.duration > 0.0);
            if !has(SignalState::Green) || !has(SignalState::Red) {
                return Err(Error::validation("group has a green and a red interval", &g.id));
            }
        }
        for [a, b] in &plan.conflicting {
            for id in [a, b] {
                if plan.group(id).is_none() {
                    return Err(Error::validation("conflicting group exists", id));
                }
            }
        }
        Ok(())
    }
}

/// Expand a generator into explicit demand entries. Ids are `g<n>` so they
/// never collide with hand-written entries.
fn generate_demand(scenario: &Scenario, g: &DemandGenerator) -> Vec<DemandEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut out = Vec::new();

    let approaches: Vec<(Approach, f64)> = g
        .approach_weights
        .iter()
        .map(|(a, w)| (*a, *w))
        .filter(|(a, w)| *w > 0.0 && scenario.lanes.iter().any(|l| l.approach == *a))
        .collect();

    let mut seq = 0usize;
    let mut next_id = |prefix: &str| {
        seq += 1;
        format!("{prefix}{seq:05}")
    };

    if g.vehicles_per_hour > 0.0 && !approaches.is_empty() {
        let rate = g.vehicles_per_hour / 3600.0;
        let mut t = 0.0;
        loop {
            t += -(1.0 - rng.random::<f64>()).ln() / rate;
            if t >= g.duration {
                break;
            }
            let approach = *weighted(&mut rng, &approaches);
            let lanes: Vec<(&LaneGeometry, f64)> = scenario
                .lanes
                .iter()
                .filter(|l| l.approach == approach)
                .map(|l| (l, g.lane_weights.get(&l.id).copied().unwrap_or(1.0)))
                .filter(|(_, w)| *w > 0.0)
                .collect();
            if lanes.is_empty() {
                continue;
            }
            let lane = *weighted(&mut rng, &lanes);
            let movement = lane.movements[rng.random_range(0..lane.movements.len())];
            let kind = if rng.random::<f64>() < g.truck_share {
                EntityKind::Truck
            } else {
                EntityKind::Car
            };
            let mut e = DemandEntry::vehicle(next_id("g"), round_time(t), kind, lane.id.clone());
            e.movement = Some(movement);
            out.push(e);
        }
    }

    if g.vrus_per_hour > 0.0 && !scenario.vru_paths.is_empty() {
        let rate = g.vrus_per_hour / 3600.0;
        let mut t = 0.0;
        loop {
            t += -(1.0 - rng.random::<f64>()).ln() / rate;
            if t >= g.duration {
                break;
            }
            let path = &scenario.vru_paths[rng.random_range(0..scenario.vru_paths.len())];
            let kind = if rng.random::<f64>() < g.cyclist_share {
                EntityKind::Cyclist
            } else {
                EntityKind::Pedestrian
            };
            out.push(DemandEntry::vehicle(next_id("u"), round_time(t), kind, path.id.clone()));
        }
    }
    out
}

fn round_time(t: f64) -> f64 {
    (t * 10.0).round() / 10.0
}

fn weighted<'a, T, R: Rng>(rng: &mut R, items: &'a [(T, f64)]) -> &'a T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (item, w) in items {
        if x < *w {
            return item;
        }
        x -= w;
    }
    &items[items.len() - 1].0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan_30_5_50() -> SignalPlan {
        SignalPlan {
            cycle_length: 85.0,
            offset: 0.0,
            groups: vec![SignalGroup {
                id: "g".into(),
                intervals: vec![
                    SignalInterval { state: SignalState::Green, duration: 30.0 },
                    SignalInterval { state: SignalState::Yellow, duration: 5.0 },
                    SignalInterval { state: SignalState::Red, duration: 50.0 },
                ],
            }],
            conflicting: vec![],
        }
    }

    #[test]
    fn signal_state_walks_intervals() {
        let p = plan_30_5_50();
        assert_eq!(signal_state(&p, "g", 0.0).unwrap(), SignalState::Green);
        assert_eq!(signal_state(&p, "g", 36.0).unwrap(), SignalState::Red);
        assert_eq!(signal_state(&p, "g", 85.0).unwrap(), SignalState::Green);
        assert_eq!(signal_state(&p, "g", 32.0).unwrap(), SignalState::Yellow);
        assert!(matches!(signal_state(&p, "x", 0.0), Err(Error::UnknownGroup(_))));
    }

    #[test]
    fn offset_shifts_the_cycle() {
        let mut p = plan_30_5_50();
        p.offset = 40.0;
        assert_eq!(signal_state(&p, "g", 0.0).unwrap(), SignalState::Red);
        assert_eq!(signal_state(&p, "g", 45.0).unwrap(), SignalState::Green);
    }

    #[test]
    fn distance_to_stop_line_is_signed() {
        let mut s = Scenario::default_intersection();
        s.lanes[0].stop_line_pos = 200.0;
        let id = s.lanes[0].id.clone();
        assert_eq!(s.distance_to_stop_line(&id, 50.0).unwrap(), 150.0);
        assert_eq!(s.distance_to_stop_line(&id, 200.0).unwrap(), 0.0);
        assert_eq!(s.distance_to_stop_line(&id, 210.0).unwrap(), -10.0);
        assert!(matches!(s.distance_to_stop_line("nope", 0.0), Err(Error::UnknownLane(_))));
    }

    #[test]
    fn default_scenario_structure() {
        let s = Scenario::default_intersection();
        let count = |a| s.lanes.iter().filter(|l| l.approach == a).count();
        assert_eq!(
            [count(Approach::N), count(Approach::E), count(Approach::S), count(Approach::W)],
            [3, 5, 5, 5]
        );
        let obstacle_approaches: BTreeSet<_> = s
            .static_obstacles
            .iter()
            .map(|o| s.lane(&o.lane).unwrap().approach)
            .collect();
        assert_eq!(obstacle_approaches, BTreeSet::from([Approach::S, Approach::W]));
        let red: f64 = s.signal_plan.groups.iter()
            .flat_map(|g| g.intervals.iter())
            .filter(|iv| iv.state == SignalState::Red)
            .map(|iv| iv.duration)
            .fold(0.0, f64::max);
        assert_eq!(red, 50.0);
        let demand = s.expanded_demand();
        assert!(demand.len() > 500);
        assert!(demand.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn default_plan_never_greens_conflicting_groups() {
        let s = Scenario::default_intersection();
        let plan = &s.signal_plan;
        assert!(!plan.conflicting.is_empty());
        for area in &s.conflict_areas {
            for [a, b] in &plan.conflicting {
                if !(area.signal_groups.contains(a) && area.signal_groups.contains(b)) {
                    continue;
                }
                for k in 0..(plan.cycle_length * 10.0) as usize {
                    let t = k as f64 / 10.0;
                    let both = signal_state(plan, a, t).unwrap() == SignalState::Green
                        && signal_state(plan, b, t).unwrap() == SignalState::Green;
                    assert!(!both, "{a} and {b} both green at {t} in {}", area.id);
                }
            }
        }
    }

    #[test]
    fn obstacle_beyond_lane_is_rejected() {
        let mut s = Scenario::default_intersection();
        let len = s.lane(&s.static_obstacles[0].lane).unwrap().length;
        s.static_obstacles[0].pos = len + 10.0;
        let text = s.to_toml().unwrap();
        match Scenario::from_toml(&text) {
            Err(Error::Validation { rule, .. }) => assert_eq!(rule, "obstacle within lane"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn asymmetric_adjacency_is_rejected() {
        let mut s = Scenario::default_intersection();
        s.lanes[1].adjacent_right = None;
        match s.validate() {
            Err(Error::Validation { rule, .. }) => assert_eq!(rule, "adjacency symmetric"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_durations_are_rejected() {
        let mut s = Scenario::default_intersection();
        s.signal_plan.groups[0].intervals[0].duration += 1.0;
        assert!(matches!(s.validate(), Err(Error::Validation { rule: "group durations sum to cycle_length", .. })));
    }

    #[test]
    fn malformed_file_is_a_parse_error() {
        assert!(matches!(Scenario::from_toml("format_version = ["), Err(Error::Parse(_))));
    }

    #[test]
    fn empty_demand_is_valid() {
        let mut s = Scenario::default_intersection();
        s.generator = None;
        s.demand.clear();
        s.validate().unwrap();
        assert!(s.expanded_demand().is_empty());
    }

    #[test]
    fn load_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.toml");
        let s = Scenario::default_intersection();
        std::fs::write(&path, s.to_toml().unwrap()).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded, s);
        assert_eq!(Scenario::from_toml(&loaded.to_toml().unwrap()).unwrap(), s);
    }

    #[test]
    fn signal_course_covers_horizon() {
        let p = plan_30_5_50();
        let course = p.course(20.0, 30.0);
        assert_eq!(course[0].state, SignalState::Green);
        assert_eq!(course[0].start, 20.0);
        assert_eq!(course[0].end, 30.0);
        assert_eq!(course[1].state, SignalState::Yellow);
        assert_eq!(course[2].state, SignalState::Red);
    }

    proptest! {
        #[test]
        fn signal_state_is_periodic(
            durations in prop::collection::vec(0.5f64..60.0, 3),
            offset in 0.0f64..100.0,
            t in 0.0f64..10_000.0,
        ) {
            let offset = (offset * 10.0).round() / 10.0;
            // Integral tenths keep the cycle exactly representable.
            let d: Vec<f64> = durations.iter().map(|x| (x * 10.0).round() / 10.0).collect();
            let cycle = d[0] + d[1] + d[2];
            let plan = SignalPlan {
                cycle_length: cycle,
                offset,
                groups: vec![SignalGroup {
                    id: "g".into(),
                    intervals: vec![
                        SignalInterval { state: SignalState::Green, duration: d[0] },
                        SignalInterval { state: SignalState::Yellow, duration: d[1] },
                        SignalInterval { state: SignalState::Red, duration: d[2] },
                    ],
                }],
                conflicting: vec![],
            };
            let t = (t * 10.0).round() / 10.0 + 0.05;
            prop_assert_eq!(
                signal_state(&plan, "g", t).unwrap(),
                signal_state(&plan, "g", t + cycle).unwrap()
            );
        }
    }
}
