//! Message encoding, authentication envelope, and datagram transports.

mod envelope;
mod seal;
mod transport;

pub use envelope::{
    peek_msg_type, set_hop_count, AuthKind, Envelope, MsgType, WireError, HEADER_LEN, MAX_DATAGRAM, WIRE_VERSION,
};
pub use seal::{open, seal, AuthContext, Credentials, KeyLookup, Rejection};
pub use transport::{MemoryHub, MemoryTransport, Transport, TransportError, UdpTransport};

#[cfg(test)]
#[allow(unused_imports)]
pub(crate) use envelope::tests::arb_envelope;
