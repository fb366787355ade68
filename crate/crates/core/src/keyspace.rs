//! 160-bit ring arithmetic and address-derived peer keys.
//!
//! A peer's key is the SHA-1 digest of its 6-byte network address with the
//! 6 least significant bytes overwritten by that same address. The key thus
//! carries the address verbatim while its 14 high bytes look uniformly drawn.

use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;

use sha1::{Digest, Sha1};
use thiserror::Error;

/// Number of bytes in a ring key.
pub const KEY_LEN: usize = 20;

/// Number of bytes in a serialized [`NetAddr`].
pub const ADDR_LEN: usize = 6;

/// Number of high-order key bytes that carry the address hash.
pub const HASH_PREFIX_LEN: usize = KEY_LEN - ADDR_LEN;

/// Bit width of the key space.
pub const KEY_BITS: usize = KEY_LEN * 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyspaceError {
    #[error("finger index {0} out of range [0, 160)")]
    FingerIndex(usize),
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("malformed address: {0}")]
    MalformedAddr(String),
    #[error("IPv6 addresses are not supported: {0}")]
    Ipv6(String),
    #[error("key {0} is not derived from its embedded address")]
    NotDerived(Key),
}

/// A point on the 2^160 ring, stored as a big-endian unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Key(pub [u8; KEY_LEN]);

impl Key {
    pub const ZERO: Key = Key([0; KEY_LEN]);
    pub const MAX: Key = Key([0xff; KEY_LEN]);

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Key(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, KeyspaceError> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| KeyspaceError::MalformedKey(format!("{} bytes", bytes.len())))?;
        Ok(Key(arr))
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// The key with only bit `i` set, i.e. 2^i.
    pub fn pow2(i: usize) -> Result<Self, KeyspaceError> {
        if i >= KEY_BITS {
            return Err(KeyspaceError::FingerIndex(i));
        }
        let mut out = [0u8; KEY_LEN];
        out[KEY_LEN - 1 - i / 8] = 1 << (i % 8);
        Ok(Key(out))
    }

    pub fn from_u64(v: u64) -> Self {
        let mut out = [0u8; KEY_LEN];
        out[KEY_LEN - 8..].copy_from_slice(&v.to_be_bytes());
        Key(out)
    }

    /// (self + rhs) mod 2^160
    pub fn wrapping_add(&self, rhs: &Key) -> Key {
        let mut out = [0u8; KEY_LEN];
        let mut carry = 0u16;
        for i in (0..KEY_LEN).rev() {
            let s = self.0[i] as u16 + rhs.0[i] as u16 + carry;
            out[i] = s as u8;
            carry = s >> 8;
        }
        Key(out)
    }

    /// (self - rhs) mod 2^160
    pub fn wrapping_sub(&self, rhs: &Key) -> Key {
        let mut out = [0u8; KEY_LEN];
        let mut borrow = 0i16;
        for i in (0..KEY_LEN).rev() {
            let mut d = self.0[i] as i16 - rhs.0[i] as i16 - borrow;
            if d < 0 {
                d += 256;
                borrow = 1;
            } else {
                borrow = 0;
            }
            out[i] = d as u8;
        }
        Key(out)
    }

    /// Halves the key (logical shift right by one bit).
    pub fn half(&self) -> Key {
        let mut out = [0u8; KEY_LEN];
        let mut carry = 0u8;
        for i in 0..KEY_LEN {
            out[i] = (self.0[i] >> 1) | (carry << 7);
            carry = self.0[i] & 1;
        }
        Key(out)
    }

    /// Approximate position on the ring as a fraction in [0, 1).
    pub fn ring_fraction(&self) -> f64 {
        let mut v = 0f64;
        for b in self.0.iter().take(8) {
            v = v * 256.0 + *b as f64;
        }
        v / 2f64.powi(64)
    }

    /// Short form used in logs and snapshots.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({})", self.short())
    }
}

impl FromStr for Key {
    type Err = KeyspaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() != KEY_LEN * 2 {
            return Err(KeyspaceError::MalformedKey(s.to_string()));
        }
        let bytes = hex::decode(s).map_err(|_| KeyspaceError::MalformedKey(s.to_string()))?;
        Key::from_slice(&bytes)
    }
}

/// Clockwise distance `(to - from) mod 2^160`.
pub fn dist_cw(from: &Key, to: &Key) -> Key {
    to.wrapping_sub(from)
}

/// True iff `x` lies in the ring interval `(a, b]`.
///
/// The interval `(a, a]` is empty; single-peer rings are handled by callers.
pub fn in_range_open_closed(x: &Key, a: &Key, b: &Key) -> bool {
    let dx = dist_cw(a, x);
    dx != Key::ZERO && dx <= dist_cw(a, b)
}

/// True iff `x` lies strictly inside `(a, b)` on the ring.
pub fn in_range_open(x: &Key, a: &Key, b: &Key) -> bool {
    in_range_open_closed(x, a, b) && x != b
}

/// `(k + 2^i) mod 2^160`
pub fn finger_target(k: &Key, i: usize) -> Result<Key, KeyspaceError> {
    Ok(k.wrapping_add(&Key::pow2(i)?))
}

/// IPv4 endpoint, serialized as 4 address bytes then 2 port bytes, both in
/// network byte order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NetAddr {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl NetAddr {
    pub fn new(ip: Ipv4Addr, port: u16) -> Self {
        NetAddr { ip, port }
    }

    pub fn to_bytes(&self) -> [u8; ADDR_LEN] {
        let mut out = [0u8; ADDR_LEN];
        out[..4].copy_from_slice(&self.ip.octets());
        out[4..].copy_from_slice(&self.port.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: [u8; ADDR_LEN]) -> Self {
        NetAddr {
            ip: Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]),
            port: u16::from_be_bytes([bytes[4], bytes[5]]),
        }
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::V4(SocketAddrV4::new(self.ip, self.port))
    }
}

impl TryFrom<SocketAddr> for NetAddr {
    type Error = KeyspaceError;

    fn try_from(addr: SocketAddr) -> Result<Self, Self::Error> {
        match addr {
            SocketAddr::V4(v4) => Ok(NetAddr::new(*v4.ip(), v4.port())),
            SocketAddr::V6(v6) => Err(KeyspaceError::Ipv6(v6.to_string())),
        }
    }
}

impl fmt::Display for NetAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

impl fmt::Debug for NetAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for NetAddr {
    type Err = KeyspaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.parse::<SocketAddr>() {
            Ok(sa) => NetAddr::try_from(sa),
            Err(_) => {
                if s.starts_with('[') || s.matches(':').count() > 1 {
                    Err(KeyspaceError::Ipv6(s.to_string()))
                } else {
                    Err(KeyspaceError::MalformedAddr(s.to_string()))
                }
            }
        }
    }
}

/// A key that provably embeds its owner's address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerKey(Key);

impl PeerKey {
    /// Accepts `key` only if it validates.
    pub fn try_from_key(key: Key) -> Result<Self, KeyspaceError> {
        if validate_key(&key) {
            Ok(PeerKey(key))
        } else {
            Err(KeyspaceError::NotDerived(key))
        }
    }

    /// Wraps a key without checking it. Callers that accept keys from the
    /// network must use [`PeerKey::try_from_key`].
    pub fn new_unchecked(key: Key) -> Self {
        PeerKey(key)
    }

    pub fn key(&self) -> &Key {
        &self.0
    }

    pub fn addr(&self) -> NetAddr {
        let mut a = [0u8; ADDR_LEN];
        a.copy_from_slice(&self.0 .0[HASH_PREFIX_LEN..]);
        NetAddr::from_bytes(a)
    }

    pub fn short(&self) -> String {
        self.0.short()
    }
}

impl fmt::Display for PeerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for PeerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Peer({})", self.0.short())
    }
}

impl From<PeerKey> for Key {
    fn from(p: PeerKey) -> Key {
        p.0
    }
}

impl AsRef<Key> for PeerKey {
    fn as_ref(&self) -> &Key {
        &self.0
    }
}

fn address_hash(addr_bytes: &[u8]) -> [u8; KEY_LEN] {
    Sha1::digest(addr_bytes).into()
}

/// Derives the peer key for `addr`.
pub fn derive_key(addr: &NetAddr) -> PeerKey {
    let ab = addr.to_bytes();
    let mut k = address_hash(&ab);
    k[HASH_PREFIX_LEN..].copy_from_slice(&ab);
    PeerKey(Key(k))
}

/// Checks that the 14 high bytes of `key` equal the hash of its low 6 bytes.
pub fn validate_key(key: &Key) -> bool {
    let h = address_hash(&key.0[HASH_PREFIX_LEN..]);
    h[..HASH_PREFIX_LEN] == key.0[..HASH_PREFIX_LEN]
}
