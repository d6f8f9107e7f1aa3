// SPDX-License-Identifier: Apache-2.0

//! Request/response client for the controller protocol.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::Clock;
use crate::controller::{ControllerEvent, SignalController};
use crate::journal::Journal;
use crate::signal::SignalState;
use crate::wire::{
    assemble_signal_state, decode, encode, peek_request_id, DecodeError, EncodeError, ErrorCode, MsgType, ObjectId,
    PhaseBitmask, WireMessage,
};

const RECV_SLICE: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum CommError {
    #[error("no reply within {0:?}")]
    Timeout(Duration),
    #[error("malformed reply: {0}")]
    Malformed(#[from] DecodeError),
    #[error("unexpected reply: {0}")]
    Unexpected(String),
    #[error("controller refused the request (error {:#04x})", .0.code())]
    Refused(ErrorCode),
    #[error("transport failure: {0}")]
    Io(#[from] io::Error),
    #[error("could not encode request: {0}")]
    Encode(#[from] EncodeError),
}

impl CommError {
    /// A local send failure, as opposed to a missing or unusable reply.
    pub fn is_send_failure(&self) -> bool {
        matches!(self, CommError::Io(_))
    }
}

/// Moves one request frame to the controller and returns the reply frame.
pub trait Transport: Send {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, CommError>;
}

/// Datagram transport. Replies whose request id does not match the
/// outstanding request (late replies to earlier, timed-out requests) are
/// discarded.
#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    peer: SocketAddr,
    timeout: Duration,
    cancel: Option<Arc<AtomicBool>>,
}

impl UdpTransport {
    /// Binds an ephemeral local socket for talking to `peer`.
    pub fn new(peer: impl ToSocketAddrs, timeout: Duration) -> io::Result<Self> {
        let peer = peer
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "controller address resolves to nothing"))?;
        let local: SocketAddr = if peer.is_ipv4() {
            "0.0.0.0:0".parse().expect("literal address")
        } else {
            "[::]:0".parse().expect("literal address")
        };
        let socket = UdpSocket::bind(local)?;
        Ok(UdpTransport {
            socket,
            peer,
            timeout,
            cancel: None,
        })
    }

    /// Abandons waits early once `flag` is set.
    pub fn with_cancel(mut self, flag: Arc<AtomicBool>) -> Self {
        self.cancel = Some(flag);
        self
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    fn cancelled(&self) -> bool {
        self.cancel.as_ref().is_some_and(|f| f.load(Ordering::Relaxed))
    }
}

impl Transport for UdpTransport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, CommError> {
        let want = peek_request_id(request);
        self.socket.send_to(request, self.peer)?;
        let deadline = Instant::now() + self.timeout;
        let mut buf = [0u8; 512];
        loop {
            let now = Instant::now();
            if now >= deadline || self.cancelled() {
                return Err(CommError::Timeout(self.timeout));
            }
            self.socket.set_read_timeout(Some((deadline - now).min(RECV_SLICE)))?;
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) => {
                    if from == self.peer && peek_request_id(&buf[..n]) == want {
                        return Ok(buf[..n].to_vec());
                    }
                    log::debug!("discarding stray datagram from {from} ({n} bytes)");
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                // An unreachable peer can surface as a receive error; it is
                // still just a missing reply.
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// In-process transport that hands frames straight to a controller engine
/// at the current clock reading. A dropped request is reported as a timeout
/// immediately; the caller decides how much time that costs.
#[derive(Debug, Clone)]
pub struct LoopbackTransport {
    controller: Arc<Mutex<SignalController>>,
    clock: Arc<dyn Clock>,
    log: Journal<ControllerEvent>,
    timeout: Duration,
}

impl LoopbackTransport {
    pub fn new(
        controller: Arc<Mutex<SignalController>>,
        clock: Arc<dyn Clock>,
        log: Journal<ControllerEvent>,
        timeout: Duration,
    ) -> Self {
        LoopbackTransport {
            controller,
            clock,
            log,
            timeout,
        }
    }
}

impl Transport for LoopbackTransport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, CommError> {
        let mut c = self.controller.lock().unwrap_or_else(|e| e.into_inner());
        let now = self.clock.now();
        let reply = c.handle_datagram(request, now);
        for ev in c.drain_events() {
            self.log.push(ev);
        }
        reply.ok_or(CommError::Timeout(self.timeout))
    }
}

/// Typed requests over a [`Transport`].
#[derive(Debug)]
pub struct ControllerClient<T> {
    transport: T,
    next_id: u16,
}

impl<T: Transport> ControllerClient<T> {
    pub fn new(transport: T) -> Self {
        ControllerClient { transport, next_id: 1 }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn request(&mut self, msg: WireMessage) -> Result<WireMessage, CommError> {
        let frame = encode(&msg)?;
        let reply = decode(&self.transport.exchange(&frame)?)?;
        if reply.request_id != msg.request_id {
            return Err(CommError::Unexpected(format!(
                "request id {} in reply to {}",
                reply.request_id, msg.request_id
            )));
        }
        if reply.msg_type == MsgType::Error {
            let code = reply
                .error_code()
                .ok_or_else(|| CommError::Unexpected("error reply without a code".into()))?;
            return Err(CommError::Refused(code));
        }
        if reply.object_id != msg.object_id {
            return Err(CommError::Unexpected(format!(
                "object {:#04x} in reply to {:#04x}",
                reply.object_id.code(),
                msg.object_id.code()
            )));
        }
        Ok(reply)
    }

    fn take_id(&mut self) -> u16 {
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        id
    }

    /// Reads one status group.
    pub fn get_status(&mut self, object: ObjectId) -> Result<PhaseBitmask, CommError> {
        let id = self.take_id();
        let reply = self.request(WireMessage::get(id, object))?;
        if reply.msg_type != MsgType::GetResponse {
            return Err(CommError::Unexpected(format!("{:?} in reply to GET", reply.msg_type)));
        }
        reply
            .mask()
            .ok_or_else(|| CommError::Unexpected(format!("GET reply payload of {} bytes", reply.payload.len())))
    }

    /// Places a phase call and waits for the acknowledgement.
    pub fn call(&mut self, mask: PhaseBitmask) -> Result<(), CommError> {
        let id = self.take_id();
        let reply = self.request(WireMessage::set(id, ObjectId::VehCall, mask))?;
        if reply.msg_type != MsgType::SetResponse {
            return Err(CommError::Unexpected(format!("{:?} in reply to SET", reply.msg_type)));
        }
        Ok(())
    }

    /// Reads all three status groups; `now` stamps the snapshot.
    pub fn read_signal_state(&mut self, clock: &dyn Clock) -> Result<SignalState, CommError> {
        let mut cycle = PollCycle::new();
        while let Some(obj) = cycle.next_object() {
            let r = self.get_status(obj);
            cycle.record(r);
        }
        cycle.finish(clock.now())
    }
}

/// One polling round: a GET for each status group. Every request is made
/// even after a failure, and the round as a whole fails if any did.
#[derive(Debug, Default)]
pub struct PollCycle {
    masks: [PhaseBitmask; 3],
    done: usize,
    failure: Option<CommError>,
}

impl PollCycle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_object(&self) -> Option<ObjectId> {
        ObjectId::STATUS.get(self.done).copied()
    }

    pub fn record(&mut self, result: Result<PhaseBitmask, CommError>) {
        if self.done >= ObjectId::STATUS.len() {
            return;
        }
        match result {
            Ok(mask) => self.masks[self.done] = mask,
            Err(e) => {
                if self.failure.is_none() {
                    self.failure = Some(e);
                }
            }
        }
        self.done += 1;
    }

    pub fn finish(self, at: Duration) -> Result<SignalState, CommError> {
        if let Some(e) = self.failure {
            return Err(e);
        }
        let [red, yellow, green] = self.masks;
        Ok(assemble_signal_state(red, yellow, green, at))
    }
}
