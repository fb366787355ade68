//! Peer state machine and the data structures it maintains.

pub mod adversary;
pub mod fingers;
pub mod group;
pub mod host;
pub mod messages;
pub mod node;
pub mod policing;
pub mod snapshot;
