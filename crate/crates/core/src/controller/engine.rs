// SPDX-License-Identifier: Apache-2.0

//! Free-mode signal controller: serves phase calls through the
//! green → yellow → all-red → green transition and answers status reads.
//!
//! The engine is driven entirely by the timestamps it is given. Timer
//! boundaries are resolved exactly, so the event log does not depend on how
//! finely the caller ticks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::nanos;
use crate::model::{PhaseId, RingBarrierConfig};
use crate::wire::{self, decode, encode, peek_request_id, ErrorCode, MsgType, ObjectId, PhaseBitmask, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EnginePhase {
    /// Green, minimum green served, no call pending.
    Resting,
    /// Green, inside the minimum green interval.
    MinGreen,
    Yellow,
    AllRed,
}

/// Test hook for communication and controller faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    #[default]
    Normal,
    /// Drops every datagram without answering.
    Silent,
    /// Answers status reads but refuses every phase call.
    RejectCalls,
}

impl FromStr for FaultMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(FaultMode::Normal),
            "silent" => Ok(FaultMode::Silent),
            "reject" | "reject_calls" | "reject-calls" => Ok(FaultMode::RejectCalls),
            other => Err(format!(
                "unknown fault mode {other:?} (expected normal, silent or reject)"
            )),
        }
    }
}

impl fmt::Display for FaultMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultMode::Normal => "normal",
            FaultMode::Silent => "silent",
            FaultMode::RejectCalls => "reject",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// The called phases may not be green together.
    Conflict,
    /// Not a ring-1/ring-2 pair of configured phases.
    NotAPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallOutcome {
    Accepted,
    /// Already being served.
    NoOp,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllerEventKind {
    Startup,
    CallAccepted,
    CallNoop,
    CallRejected,
    YellowOnset,
    AllRedOnset,
    GreenOnset,
    Fault,
}

/// One line of the controller log. `t` is in nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerEvent {
    #[serde(rename = "t_ns")]
    pub t: u64,
    pub event: ControllerEventKind,
    pub greens: Vec<u8>,
    pub yellows: Vec<u8>,
    pub reds: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultMode>,
}

fn ids(mask: PhaseBitmask) -> Vec<u8> {
    mask.phases().map(PhaseId::get).collect()
}

#[derive(Debug, Clone)]
pub struct SignalController {
    topology: Arc<RingBarrierConfig>,
    now: Duration,
    /// Phases holding right of way: green, or yellow while clearing.
    served: PhaseBitmask,
    engine: EnginePhase,
    phase_since: Duration,
    yellow_len: Duration,
    red_len: Duration,
    pending: Option<PhaseBitmask>,
    fault: FaultMode,
    events: Vec<ControllerEvent>,
}

impl SignalController {
    /// Starts resting on the first pair of the configured sequence.
    pub fn new(topology: Arc<RingBarrierConfig>, start: Duration) -> Self {
        let first = topology
            .sequence()
            .first()
            .copied()
            .or_else(|| topology.enumerate_admissible_pairs().into_iter().next())
            .expect("configuration has at least one admissible pair");
        let mut c = SignalController {
            topology,
            now: start,
            served: wire::pair_to_mask(first),
            engine: EnginePhase::Resting,
            phase_since: start,
            yellow_len: Duration::ZERO,
            red_len: Duration::ZERO,
            pending: None,
            fault: FaultMode::Normal,
            events: Vec::new(),
        };
        c.emit(ControllerEventKind::Startup, start, None);
        c
    }

    pub fn topology(&self) -> &Arc<RingBarrierConfig> {
        &self.topology
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn engine_phase(&self) -> EnginePhase {
        self.engine
    }

    pub fn pending_call(&self) -> Option<PhaseBitmask> {
        self.pending
    }

    pub fn fault_mode(&self) -> FaultMode {
        self.fault
    }

    pub fn set_fault(&mut self, mode: FaultMode) {
        if mode != self.fault {
            self.fault = mode;
            let t = self.now;
            self.emit(ControllerEventKind::Fault, t, None);
        }
    }

    /// Phases currently shown green.
    pub fn green_mask(&self) -> PhaseBitmask {
        match self.engine {
            EnginePhase::Resting | EnginePhase::MinGreen => self.served,
            EnginePhase::Yellow | EnginePhase::AllRed => PhaseBitmask::EMPTY,
        }
    }

    pub fn yellow_mask(&self) -> PhaseBitmask {
        match self.engine {
            EnginePhase::Yellow => self.served,
            _ => PhaseBitmask::EMPTY,
        }
    }

    pub fn red_mask(&self) -> PhaseBitmask {
        let configured = PhaseBitmask::from_phases(self.topology.phases().iter().copied());
        PhaseBitmask(configured.0 & !(self.green_mask().0 | self.yellow_mask().0))
    }

    /// Phases holding right of way; empty only during all-red.
    pub fn active_phases(&self) -> PhaseBitmask {
        self.served
    }

    fn emit(&mut self, event: ControllerEventKind, t: Duration, call: Option<PhaseBitmask>) {
        let fault = (event == ControllerEventKind::Fault).then_some(self.fault);
        self.events.push(ControllerEvent {
            t: nanos(t),
            event,
            greens: ids(self.green_mask()),
            yellows: ids(self.yellow_mask()),
            reds: ids(self.red_mask()),
            call: call.map(ids),
            fault,
        });
    }

    /// Hands over events emitted since the previous call.
    pub fn drain_events(&mut self) -> Vec<ControllerEvent> {
        std::mem::take(&mut self.events)
    }

    fn max_over<F: Fn(&crate::model::PhaseTiming) -> f64>(&self, mask: PhaseBitmask, f: F) -> Duration {
        let secs = mask
            .phases()
            .filter_map(|p| self.topology.timing(p).ok())
            .map(|t| f(&t))
            .fold(0.0, f64::max);
        Duration::from_secs_f64(secs)
    }

    fn start_yellow(&mut self, t: Duration) {
        self.yellow_len = self.max_over(self.served, |t| t.yellow);
        self.red_len = self.max_over(self.served, |t| t.red_clearance);
        self.engine = EnginePhase::Yellow;
        self.phase_since = t;
        self.emit(ControllerEventKind::YellowOnset, t, None);
    }

    /// Runs the engine forward to `t`, resolving every timer boundary at its
    /// exact instant. Earlier times are ignored.
    pub fn advance_to(&mut self, t: Duration) {
        if t <= self.now {
            return;
        }
        loop {
            let boundary = match self.engine {
                EnginePhase::Resting => None,
                EnginePhase::MinGreen => Some(self.phase_since + self.max_over(self.served, |t| t.min_green)),
                EnginePhase::Yellow => Some(self.phase_since + self.yellow_len),
                EnginePhase::AllRed => Some(self.phase_since + self.red_len),
            };
            let Some(at) = boundary.filter(|b| *b <= t) else {
                break;
            };
            match self.engine {
                EnginePhase::MinGreen => {
                    if self.pending.is_some() {
                        self.start_yellow(at);
                    } else {
                        self.engine = EnginePhase::Resting;
                        self.phase_since = at;
                    }
                }
                EnginePhase::Yellow => {
                    self.served = PhaseBitmask::EMPTY;
                    self.engine = EnginePhase::AllRed;
                    self.phase_since = at;
                    self.emit(ControllerEventKind::AllRedOnset, at, None);
                }
                EnginePhase::AllRed => {
                    self.served = self.pending.take().expect("all-red always has a target");
                    self.engine = EnginePhase::MinGreen;
                    self.phase_since = at;
                    self.emit(ControllerEventKind::GreenOnset, at, None);
                }
                EnginePhase::Resting => unreachable!(),
            }
        }
        self.now = t;
    }

    /// Advances by `dt` and returns the events produced along the way.
    pub fn tick(&mut self, dt: Duration) -> Vec<ControllerEvent> {
        let t = self.now + dt;
        self.advance_to(t);
        self.drain_events()
    }

    fn classify_call(&self, call: PhaseBitmask) -> Result<(), RejectReason> {
        let phases: Vec<PhaseId> = call.phases().collect();
        if phases.len() != 2 || phases.iter().any(|p| !self.topology.contains(*p)) {
            return Err(RejectReason::NotAPair);
        }
        match self.topology.is_compatible(phases[0], phases[1]) {
            Ok(true) => Ok(()),
            _ => Err(RejectReason::Conflict),
        }
    }

    /// Handles a vehicle call for the phases in `call`.
    pub fn request_service(&mut self, call: PhaseBitmask, now: Duration) -> CallOutcome {
        self.advance_to(now);
        let now = self.now;
        if let Err(reason) = self.classify_call(call) {
            self.emit(ControllerEventKind::CallRejected, now, Some(call));
            return CallOutcome::Rejected(reason);
        }
        match self.engine {
            EnginePhase::Resting | EnginePhase::MinGreen if call == self.served => {
                // Latest call wins: asking for what is already green drops
                // any call still waiting on minimum green.
                self.pending = None;
                self.emit(ControllerEventKind::CallNoop, now, Some(call));
                CallOutcome::NoOp
            }
            EnginePhase::Resting => {
                self.pending = Some(call);
                self.emit(ControllerEventKind::CallAccepted, now, Some(call));
                self.start_yellow(now);
                CallOutcome::Accepted
            }
            EnginePhase::MinGreen | EnginePhase::Yellow | EnginePhase::AllRed => {
                self.pending = Some(call);
                self.emit(ControllerEventKind::CallAccepted, now, Some(call));
                CallOutcome::Accepted
            }
        }
    }

    fn status(&self, object: ObjectId) -> Option<PhaseBitmask> {
        match object {
            ObjectId::StatusRed => Some(self.red_mask()),
            ObjectId::StatusYellow => Some(self.yellow_mask()),
            ObjectId::StatusGreen => Some(self.green_mask()),
            ObjectId::VehCall => Some(self.pending.unwrap_or_default()),
            ObjectId::Unknown(_) => None,
        }
    }

    fn respond(&mut self, msg: WireMessage) -> WireMessage {
        let id = msg.request_id;
        let object = msg.object_id;
        let bad = WireMessage::error(id, object, ErrorCode::BadRequest);
        match msg.msg_type {
            MsgType::Get | MsgType::Set if matches!(object, ObjectId::Unknown(_)) => {
                WireMessage::error(id, object, ErrorCode::UnknownObject)
            }
            MsgType::Get => {
                if !msg.payload.is_empty() {
                    return bad;
                }
                match self.status(object) {
                    Some(mask) => WireMessage::get_response(id, object, mask),
                    None => WireMessage::error(id, object, ErrorCode::UnknownObject),
                }
            }
            MsgType::Set if object == ObjectId::VehCall => {
                let Some(call) = msg.mask() else {
                    return bad;
                };
                if self.fault == FaultMode::RejectCalls {
                    self.emit(ControllerEventKind::CallRejected, self.now, Some(call));
                    return WireMessage::error(id, object, ErrorCode::CallsRefused);
                }
                match self.request_service(call, self.now) {
                    CallOutcome::Accepted | CallOutcome::NoOp => WireMessage::set_response(id, object, call),
                    CallOutcome::Rejected(RejectReason::Conflict) => {
                        WireMessage::error(id, object, ErrorCode::ConflictingCall)
                    }
                    CallOutcome::Rejected(RejectReason::NotAPair) => bad,
                }
            }
            MsgType::Set | MsgType::GetResponse | MsgType::SetResponse | MsgType::Error => bad,
        }
    }

    /// Processes one request datagram received at `now`. Returns the reply
    /// datagram, or `None` when the controller stays silent.
    pub fn handle_datagram(&mut self, bytes: &[u8], now: Duration) -> Option<Vec<u8>> {
        self.advance_to(now);
        if self.fault == FaultMode::Silent {
            return None;
        }
        let reply = match decode(bytes) {
            Ok(msg) => self.respond(msg),
            Err(_) => WireMessage::error(
                peek_request_id(bytes).unwrap_or(0),
                ObjectId::from(bytes.get(4).copied().unwrap_or(0)),
                ErrorCode::Malformed,
            ),
        };
        Some(encode(&reply).expect("replies carry at most one payload byte"))
    }
}
