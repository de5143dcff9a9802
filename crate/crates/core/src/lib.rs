//! Deterministic microscopic simulation of a signalized urban intersection in
//! mixed traffic, with a decentralized bimatrix-game negotiation protocol for
//! cooperative lane changes between connected automated vehicles.
//!
//! The crate is organised bottom-up:
//!
//! - [`netmodel`]: static road network, fixed-time signal plans, scenario files.
//! - [`dynamics`]: car-following, lane changes, VRU motion, world stepping.
//! - [`bus`]: in-simulation V2X transport with range gating.
//! - [`game`]: strategies, payoff matrices, pure Nash equilibria, decision rule.
//! - [`tms`]: the intersection-side traffic management system.
//! - [`agents`]: per-vehicle protocol state machines and payoff evaluation.
//! - [`sim`]: the tick loop tying everything together, plus the event log.
//! - [`harness`]: automation-rate sweeps, metrics and CSV/JSONL outputs.

pub mod agents;
pub mod bus;
pub mod dynamics;
pub mod error;
pub mod events;
pub mod game;
pub mod harness;
pub mod netmodel;
pub mod sim;
pub mod stats;
pub mod tms;

pub use error::{Error, Result};
