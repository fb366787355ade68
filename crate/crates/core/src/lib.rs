//! A hardened Chord overlay: address-derived keys, directory-backed
//! authorization, signed handshakes with MAC sessions, self-policing peer
//! groups and group-randomized routing, hosted by a deterministic
//! discrete-event simulator or a UDP socket.

pub mod auth;
pub mod clock;
pub mod keyspace;
pub mod wire;
pub mod directory;
pub mod protocol;
pub mod routing;
pub mod simnet;
pub mod bench;
