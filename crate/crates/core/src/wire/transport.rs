//! Datagram transports: an in-process hub for tests and a UDP socket.
//!
//! Both give at-most-once, unordered, lossy delivery and refuse datagrams
//! larger than [`MAX_DATAGRAM`] before anything leaves the sender.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::UdpSocket;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::envelope::MAX_DATAGRAM;
use crate::keyspace::NetAddr;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("datagram of {0} bytes exceeds the {MAX_DATAGRAM}-byte cap")]
    Oversize(usize),
    #[error("address {0} is already bound")]
    AddrInUse(NetAddr),
    #[error("received from a non-IPv4 address")]
    NotIpv4,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait Transport: Send {
    fn local_addr(&self) -> NetAddr;
    /// Non-blocking best-effort send.
    fn send(&self, to: NetAddr, bytes: &[u8]) -> Result<(), TransportError>;
    /// Blocks up to `timeout`; `None` when nothing arrived.
    fn recv_timeout(&self, timeout: Duration) -> Result<Option<(NetAddr, Vec<u8>)>, TransportError>;
}

fn check_size(bytes: &[u8]) -> Result<(), TransportError> {
    if bytes.len() > MAX_DATAGRAM {
        return Err(TransportError::Oversize(bytes.len()));
    }
    Ok(())
}

#[derive(Debug)]
struct HubState {
    queues: HashMap<NetAddr, VecDeque<(NetAddr, Vec<u8>)>>,
    drop_rate: f64,
    rng: ChaCha8Rng,
}

/// Shared in-memory switch. Cloning yields another handle to the same hub.
#[derive(Debug, Clone)]
pub struct MemoryHub {
    inner: Arc<(Mutex<HubState>, Condvar)>,
}

impl MemoryHub {
    pub fn new(drop_rate: f64, seed: u64) -> Self {
        let state = HubState { queues: HashMap::new(), drop_rate, rng: ChaCha8Rng::seed_from_u64(seed) };
        MemoryHub { inner: Arc::new((Mutex::new(state), Condvar::new())) }
    }

    pub fn bind(&self, addr: NetAddr) -> Result<MemoryTransport, TransportError> {
        let mut st = self.inner.0.lock().expect("hub lock");
        if st.queues.contains_key(&addr) {
            return Err(TransportError::AddrInUse(addr));
        }
        st.queues.insert(addr, VecDeque::new());
        Ok(MemoryTransport { hub: self.clone(), addr })
    }
}

#[derive(Debug)]
pub struct MemoryTransport {
    hub: MemoryHub,
    addr: NetAddr,
}

impl Transport for MemoryTransport {
    fn local_addr(&self) -> NetAddr {
        self.addr
    }

    fn send(&self, to: NetAddr, bytes: &[u8]) -> Result<(), TransportError> {
        check_size(bytes)?;
        let (lock, cv) = &*self.hub.inner;
        let mut st = lock.lock().expect("hub lock");
        let drop_rate = st.drop_rate;
        if drop_rate > 0.0 && st.rng.gen::<f64>() < drop_rate {
            return Ok(());
        }
        // Unbound destinations silently swallow traffic, as UDP would.
        if let Some(q) = st.queues.get_mut(&to) {
            q.push_back((self.addr, bytes.to_vec()));
            cv.notify_all();
        }
        Ok(())
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<(NetAddr, Vec<u8>)>, TransportError> {
        let (lock, cv) = &*self.hub.inner;
        let st = lock.lock().expect("hub lock");
        let (mut st, _) = cv
            .wait_timeout_while(st, timeout, |s| s.queues.get(&self.addr).is_none_or(|q| q.is_empty()))
            .expect("hub lock");
        Ok(st.queues.get_mut(&self.addr).and_then(|q| q.pop_front()))
    }
}

impl Drop for MemoryTransport {
    fn drop(&mut self) {
        if let Ok(mut st) = self.hub.inner.0.lock() {
            st.queues.remove(&self.addr);
        }
    }
}

#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    addr: NetAddr,
}

impl UdpTransport {
    pub fn bind(addr: NetAddr) -> Result<Self, TransportError> {
        let socket = UdpSocket::bind(addr.socket_addr())?;
        let local = NetAddr::try_from(socket.local_addr()?).map_err(|_| TransportError::NotIpv4)?;
        Ok(UdpTransport { socket, addr: local })
    }
}

impl Transport for UdpTransport {
    fn local_addr(&self) -> NetAddr {
        self.addr
    }

    fn send(&self, to: NetAddr, bytes: &[u8]) -> Result<(), TransportError> {
        check_size(bytes)?;
        self.socket.send_to(bytes, to.socket_addr())?;
        Ok(())
    }

    fn recv_timeout(&self, timeout: Duration) -> Result<Option<(NetAddr, Vec<u8>)>, TransportError> {
        self.socket.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        match self.socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                let from = NetAddr::try_from(from).map_err(|_| TransportError::NotIpv4)?;
                buf.truncate(n);
                Ok(Some((from, buf)))
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
