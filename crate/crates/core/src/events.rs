//! Structured per-tick events, serialized one JSON object per line.

use serde::{Deserialize, Serialize};

use crate::agents::Phase;
use crate::bus::{Endpoint, Message};
use crate::dynamics::VehicleKind;
use crate::game::{Decision, PayoffMatrix, Role};
use crate::netmodel::{Approach, EntityKind, SignalState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Spawn {
        id: String,
        kind: VehicleKind,
        lane: String,
        pos: f64,
        speed: f64,
    },
    VruSpawn {
        id: String,
        kind: EntityKind,
        path: String,
    },
    ZoneEnter {
        id: String,
        kind: VehicleKind,
        approach: Approach,
    },
    ZoneExit {
        id: String,
    },
    LaneChange {
        id: String,
        from: String,
        to: String,
        cooperative: bool,
    },
    LaneChangeAbandoned {
        id: String,
        target: String,
    },
    SignalChange {
        group: String,
        state: SignalState,
    },
    Removal {
        id: String,
    },
    MessageSent {
        message: Message,
    },
    MessageDelivered {
        msg_id: u64,
        recipient: Endpoint,
    },
    MessageDropped {
        msg_id: u64,
        reason: String,
    },
    Subscription {
        id: String,
        distance_to_stop_line: f64,
        deadline_met: bool,
    },
    PhaseChange {
        id: String,
        from: Phase,
        to: Phase,
    },
    Decision {
        rec_id: u64,
        id: String,
        role: Role,
        matrix: Option<PayoffMatrix>,
        decision: Decision,
    },
    SafetyViolation {
        id: String,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub tick: u64,
    pub t: f64,
    #[serde(flatten)]
    pub event: Event,
}
