// SPDX-License-Identifier: Apache-2.0

//! The middleware mode machine.
//!
//! `Manager` performs no I/O. Its hosts (the threaded runtime and the
//! virtual testbed) feed it actions, poll results and snapshots, carry out
//! the sends it asks for, and call back at the times it names.

use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use super::client::CommError;
use super::config::MiddlewareConfig;
use super::events::{EventDetail, EventKind, EventLog, Mode, TimeoutCause};
use crate::clock::micros;
use crate::model::{convert_action, Action, ActionKind, ModelError, PhasePair, RingBarrierConfig};
use crate::signal::SignalState;
use crate::wire::{pair_to_mask, PhaseBitmask};

/// A dispatched command awaiting confirmation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hold {
    pub cmd: u64,
    pub kind: ActionKind,
    pub target: PhasePair,
    #[serde(skip)]
    pub dispatched_at: Duration,
    /// Green hold requested by a duration action.
    #[serde(skip)]
    pub hold_for: Option<Duration>,
    /// When the target was first observed green.
    #[serde(skip)]
    pub green_at: Option<Duration>,
}

impl Hold {
    pub fn release_at(&self) -> Option<Duration> {
        Some(self.green_at? + self.hold_for?)
    }
}

/// What the host must send after an accepted action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub cmd: u64,
    pub pair: PhasePair,
    pub mask: PhaseBitmask,
    pub dispatched_at: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Dispatched(Dispatch),
    /// A command was already on hold.
    Dropped,
    /// The converted pair may not be green together.
    ConflictRejected,
    /// The manager is in TIMEOUT and accepts nothing until recovered.
    InTimeout,
}

/// Result of one verification step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyStep {
    /// Not confirmed yet; check again at `next`.
    Pending {
        next: Duration,
    },
    /// Confirmed; the green hold ends at the given time.
    HoldUntil(Duration),
    Released,
    TimedOut,
    /// `cmd` is no longer the command on hold.
    Stale,
}

#[derive(Debug, Error)]
pub enum RecoverError {
    #[error("manager is {0}, not TIMEOUT")]
    NotInTimeout(Mode),
    #[error("controller unreachable: {0}")]
    Unreachable(CommError),
    #[error("controller shows no admissible pair green (greens: {0:?})")]
    NoServedPair(Vec<u8>),
}

/// Point-in-time view of the manager.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManagerState {
    pub mode: Mode,
    pub current_pair: PhasePair,
    pub hold: Option<Hold>,
    pub timeout_cause: Option<TimeoutCause>,
    pub consecutive_poll_failures: u32,
    pub consecutive_drifts: u32,
    pub commands_issued: u64,
}

#[derive(Debug)]
pub struct Manager {
    topology: Arc<RingBarrierConfig>,
    config: MiddlewareConfig,
    log: EventLog,
    mode: Mode,
    current_pair: PhasePair,
    hold: Option<Hold>,
    timeout_cause: Option<TimeoutCause>,
    next_cmd: u64,
    poll_failures: u32,
    drifts: u32,
}

impl Manager {
    /// Starts IDLE, assuming the controller serves the first sequence pair
    /// until told otherwise.
    pub fn new(topology: Arc<RingBarrierConfig>, config: MiddlewareConfig, log: EventLog) -> Self {
        let current_pair = topology.sequence()[0];
        Manager {
            topology,
            config,
            log,
            mode: Mode::Idle,
            current_pair,
            hold: None,
            timeout_cause: None,
            next_cmd: 1,
            poll_failures: 0,
            drifts: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn current_pair(&self) -> PhasePair {
        self.current_pair
    }

    pub fn config(&self) -> &MiddlewareConfig {
        &self.config
    }

    pub fn topology(&self) -> &Arc<RingBarrierConfig> {
        &self.topology
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn hold(&self) -> Option<&Hold> {
        self.hold.as_ref()
    }

    fn now(&self) -> Duration {
        self.log.clock().now()
    }

    pub fn snapshot(&self) -> ManagerState {
        ManagerState {
            mode: self.mode,
            current_pair: self.current_pair,
            hold: self.hold.clone(),
            timeout_cause: self.timeout_cause,
            consecutive_poll_failures: self.poll_failures,
            consecutive_drifts: self.drifts,
            commands_issued: self.next_cmd - 1,
        }
    }

    /// Adopts the pair a fresh read shows green, if it is an admissible one.
    pub fn sync_current_pair(&mut self, state: &SignalState) -> Option<PhasePair> {
        let pair = served_pair(&self.topology, state)?;
        self.current_pair = pair;
        Some(pair)
    }

    /// Accepts an agent action. Invalid actions are refused with an error
    /// after ACTION_OUT is logged.
    pub fn submit(&mut self, action: &Action) -> Result<SubmitOutcome, ModelError> {
        let cmd = self.next_cmd;
        self.next_cmd += 1;
        let kind = action.kind();
        let base = EventDetail {
            cmd: Some(cmd),
            action: Some(kind),
            ..Default::default()
        };
        self.log.emit(EventKind::ActionOut, base.clone());

        let command = match convert_action(&self.topology, action, self.current_pair) {
            Ok(c) => c,
            Err(ModelError::Conflict(pair)) => {
                self.log.emit(
                    EventKind::ConflictRejected,
                    EventDetail {
                        pair: Some(pair),
                        ..base
                    },
                );
                return Ok(SubmitOutcome::ConflictRejected);
            }
            Err(e) => {
                log::warn!("action {cmd} refused: {e}");
                return Err(e);
            }
        };
        let detail = EventDetail {
            pair: Some(command.pair),
            hold_ms: command.hold.map(|h| h.as_millis() as u64),
            ..base
        };
        self.log.emit(EventKind::Converted, detail.clone());

        match self.mode {
            Mode::Idle => {}
            Mode::OnHold => {
                self.log.emit(
                    EventKind::Dropped,
                    EventDetail {
                        reason: Some("on_hold".into()),
                        ..detail
                    },
                );
                return Ok(SubmitOutcome::Dropped);
            }
            Mode::Timeout => {
                self.log.emit(
                    EventKind::Dropped,
                    EventDetail {
                        reason: Some("timeout".into()),
                        ..detail
                    },
                );
                return Ok(SubmitOutcome::InTimeout);
            }
        }

        let dispatched_at = self.now();
        self.log.emit(EventKind::Dispatched, detail);
        self.hold = Some(Hold {
            cmd,
            kind,
            target: command.pair,
            dispatched_at,
            hold_for: command.hold,
            green_at: None,
        });
        self.mode = Mode::OnHold;
        Ok(SubmitOutcome::Dispatched(Dispatch {
            cmd,
            pair: command.pair,
            mask: pair_to_mask(command.pair),
            dispatched_at,
        }))
    }

    /// Outcome of the SET for `cmd`. Only a failure to send counts against
    /// the link; a lost or refused acknowledgement is left to verification.
    pub fn on_set_result(&mut self, cmd: u64, result: Result<(), CommError>) {
        match result {
            Ok(()) => {
                self.log.emit(
                    EventKind::SetAcked,
                    EventDetail {
                        cmd: Some(cmd),
                        ..Default::default()
                    },
                );
            }
            Err(e) if e.is_send_failure() => {
                log::warn!("command {cmd}: {e}");
                if self.hold.as_ref().is_some_and(|h| h.cmd == cmd) {
                    self.enter_timeout(TimeoutCause::CommFailure);
                }
            }
            Err(e) => log::info!("command {cmd}: no acknowledgement ({e})"),
        }
    }

    /// Checks the latest snapshot against the command on hold.
    pub fn verify(&mut self, cmd: u64, snapshot: &SignalState) -> VerifyStep {
        let now = self.now();
        let Some(hold) = self.hold.as_ref().filter(|h| h.cmd == cmd && self.mode == Mode::OnHold) else {
            return VerifyStep::Stale;
        };
        if hold.green_at.is_some() {
            return self.release_if_due(now);
        }
        let (target, dispatched_at, hold_for) = (hold.target, hold.dispatched_at, hold.hold_for);
        self.log.emit(
            EventKind::VerifyPoll,
            EventDetail {
                cmd: Some(cmd),
                poll_seq: Some(snapshot.poll_seq),
                ..Default::default()
            },
        );
        if snapshot.matches(target, self.topology.phases()) {
            self.log.emit(
                EventKind::VerifyMatch,
                EventDetail {
                    cmd: Some(cmd),
                    pair: Some(target),
                    poll_seq: Some(snapshot.poll_seq),
                    ..Default::default()
                },
            );
            if hold_for.is_none() {
                return self.release(now);
            }
            // The hold runs from the poll that first showed the target green.
            let green_at = snapshot.polled_at.max(dispatched_at);
            if let Some(h) = self.hold.as_mut() {
                h.green_at = Some(green_at);
            }
            return self.release_if_due(now);
        }
        if now.saturating_sub(dispatched_at) >= self.config.transition_timeout() {
            self.enter_timeout(TimeoutCause::TransitionTimeout);
            return VerifyStep::TimedOut;
        }
        VerifyStep::Pending {
            next: now + self.config.verify_interval(),
        }
    }

    fn release_if_due(&mut self, now: Duration) -> VerifyStep {
        match self.hold.as_ref().and_then(Hold::release_at) {
            Some(at) if at > now => VerifyStep::HoldUntil(at),
            _ => self.release(now),
        }
    }

    fn release(&mut self, now: Duration) -> VerifyStep {
        let Some(hold) = self.hold.take() else {
            return VerifyStep::Stale;
        };
        self.current_pair = hold.target;
        self.mode = Mode::Idle;
        self.log.emit(
            EventKind::HoldReleased,
            EventDetail {
                cmd: Some(hold.cmd),
                action: Some(hold.kind),
                pair: Some(hold.target),
                held_us: Some(micros(now.saturating_sub(hold.dispatched_at))),
                ..Default::default()
            },
        );
        VerifyStep::Released
    }

    pub fn on_poll_ok(&mut self, poll_seq: u64) {
        if self.mode == Mode::Timeout {
            return;
        }
        self.poll_failures = 0;
        self.log.emit(
            EventKind::PollOk,
            EventDetail {
                poll_seq: Some(poll_seq),
                ..Default::default()
            },
        );
    }

    /// A polling round that did not produce a usable snapshot.
    pub fn on_poll_timeout(&mut self) {
        if self.mode == Mode::Timeout {
            return;
        }
        self.poll_failures += 1;
        self.log.emit(
            EventKind::PollTimeout,
            EventDetail {
                consecutive: Some(self.poll_failures),
                ..Default::default()
            },
        );
        if self.poll_failures >= self.config.n_timeout {
            self.enter_timeout(TimeoutCause::CommFailure);
        }
    }

    /// Reports how long one simulation step took against its nominal
    /// length. Returns true if the step overran.
    pub fn report_step_duration(&mut self, elapsed: Duration, step: Duration) -> bool {
        if elapsed <= step {
            self.drifts = 0;
            return false;
        }
        if self.mode == Mode::Timeout {
            return true;
        }
        self.drifts += 1;
        self.log.emit(
            EventKind::Drift,
            EventDetail {
                elapsed_us: Some(micros(elapsed)),
                consecutive: Some(self.drifts),
                ..Default::default()
            },
        );
        if self.drifts >= self.config.n_drift {
            self.enter_timeout(TimeoutCause::SimDrift);
        }
        true
    }

    fn enter_timeout(&mut self, cause: TimeoutCause) {
        if self.mode == Mode::Timeout {
            return;
        }
        let cmd = self.hold.take().map(|h| h.cmd);
        self.log.emit(
            EventKind::TimeoutSet,
            EventDetail {
                cmd,
                cause: Some(cause),
                from: Some(self.mode),
                ..Default::default()
            },
        );
        log::warn!("middleware entered TIMEOUT: {cause}");
        self.mode = Mode::Timeout;
        self.timeout_cause = Some(cause);
    }

    pub fn timeout_cause(&self) -> Option<TimeoutCause> {
        self.timeout_cause
    }

    /// Checks the recovery precondition before the host reads the controller.
    pub fn begin_recover(&self) -> Result<(), RecoverError> {
        match self.mode {
            Mode::Timeout => Ok(()),
            other => Err(RecoverError::NotInTimeout(other)),
        }
    }

    /// Completes recovery from a fresh read of the controller. On failure
    /// the manager stays in TIMEOUT.
    pub fn complete_recover(&mut self, observed: Result<SignalState, CommError>) -> Result<PhasePair, RecoverError> {
        self.begin_recover()?;
        let state = observed.map_err(RecoverError::Unreachable)?;
        let pair = served_pair(&self.topology, &state)
            .ok_or_else(|| RecoverError::NoServedPair(state.greens().iter().map(|p| p.get()).collect()))?;
        self.current_pair = pair;
        self.poll_failures = 0;
        self.drifts = 0;
        self.timeout_cause = None;
        self.mode = Mode::Idle;
        self.log.emit(
            EventKind::Recovered,
            EventDetail {
                pair: Some(pair),
                ..Default::default()
            },
        );
        Ok(pair)
    }
}

/// The admissible pair shown green in `state`, if exactly one is.
fn served_pair(topology: &RingBarrierConfig, state: &SignalState) -> Option<PhasePair> {
    let greens = state.greens();
    let [a, b] = greens.as_slice() else {
        return None;
    };
    let (ra, rb) = (topology.ring_of(*a).ok()?, topology.ring_of(*b).ok()?);
    let pair = match (ra, rb) {
        (crate::model::Ring::One, crate::model::Ring::Two) => PhasePair::new(*a, *b),
        (crate::model::Ring::Two, crate::model::Ring::One) => PhasePair::new(*b, *a),
        _ => return None,
    };
    topology.check_pair(pair).ok().map(|()| pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, VirtualClock};
    use crate::model::PhaseId;
    use crate::signal::Color;

    fn pair(a: u8, b: u8) -> PhasePair {
        PhasePair::from_ids(a, b).unwrap()
    }

    fn green(p: PhasePair, at: Duration) -> SignalState {
        let mut s = SignalState::all_red(at);
        for ph in p.phases() {
            s.colors.insert(ph, Color::Green);
        }
        s
    }

    fn setup() -> (Manager, VirtualClock) {
        let clock = VirtualClock::new();
        let log = EventLog::in_memory(Arc::new(clock.clone()));
        let m = Manager::new(
            Arc::new(RingBarrierConfig::standard8()),
            MiddlewareConfig::default(),
            log,
        );
        (m, clock)
    }

    fn events(m: &Manager) -> Vec<EventKind> {
        m.log().records().iter().map(|r| r.event).collect()
    }

    #[test]
    fn selection_lifecycle() {
        let (mut m, clock) = setup();
        let out = m.submit(&Action::Selection(pair(2, 6))).unwrap();
        let SubmitOutcome::Dispatched(d) = out else {
            panic!("{out:?}")
        };
        assert_eq!(d.mask, PhaseBitmask(0x22));
        assert_eq!(m.mode(), Mode::OnHold);
        m.on_set_result(d.cmd, Ok(()));
        clock.set(Duration::from_millis(100));
        let step = m.verify(d.cmd, &green(pair(1, 5), clock.now()));
        assert_eq!(
            step,
            VerifyStep::Pending {
                next: Duration::from_millis(200)
            }
        );
        clock.set(Duration::from_secs(5));
        assert_eq!(m.verify(d.cmd, &green(pair(2, 6), clock.now())), VerifyStep::Released);
        assert_eq!(m.mode(), Mode::Idle);
        assert_eq!(m.current_pair(), pair(2, 6));
        assert_eq!(
            events(&m),
            [
                EventKind::ActionOut,
                EventKind::Converted,
                EventKind::Dispatched,
                EventKind::SetAcked,
                EventKind::VerifyPoll,
                EventKind::VerifyPoll,
                EventKind::VerifyMatch,
                EventKind::HoldReleased
            ]
        );
    }

    #[test]
    fn second_action_dropped_while_on_hold() {
        let (mut m, _) = setup();
        assert!(matches!(
            m.submit(&Action::Switch(1)).unwrap(),
            SubmitOutcome::Dispatched(_)
        ));
        assert_eq!(m.submit(&Action::Switch(1)).unwrap(), SubmitOutcome::Dropped);
        assert_eq!(m.mode(), Mode::OnHold);
        assert_eq!(*events(&m).last().unwrap(), EventKind::Dropped);
    }

    #[test]
    fn conflict_rejected_without_dispatch() {
        let (mut m, _) = setup();
        let out = m.submit(&Action::Selection(PhasePair::new(
            PhaseId::new(1).unwrap(),
            PhaseId::new(7).unwrap(),
        )));
        assert_eq!(out.unwrap(), SubmitOutcome::ConflictRejected);
        assert_eq!(m.mode(), Mode::Idle);
        assert!(!events(&m).contains(&EventKind::Dispatched));
    }

    #[test]
    fn duration_hold_anchored_at_first_green_poll() {
        let (mut m, clock) = setup();
        let SubmitOutcome::Dispatched(d) = m.submit(&Action::Duration(0.5)).unwrap() else {
            panic!()
        };
        assert_eq!(d.pair, pair(2, 6));
        let hold = m.hold().unwrap().hold_for.unwrap();
        assert_eq!(hold, Duration::from_millis(11_500));
        clock.set(Duration::from_millis(5100));
        let step = m.verify(d.cmd, &green(pair(2, 6), Duration::from_millis(5000)));
        assert_eq!(step, VerifyStep::HoldUntil(Duration::from_millis(16_500)));
        clock.set(Duration::from_millis(16_500));
        assert_eq!(m.verify(d.cmd, &green(pair(2, 6), clock.now())), VerifyStep::Released);
    }

    #[test]
    fn transition_timeout() {
        let (mut m, clock) = setup();
        let SubmitOutcome::Dispatched(d) = m.submit(&Action::Switch(1)).unwrap() else {
            panic!()
        };
        clock.set(Duration::from_millis(9900));
        assert!(matches!(
            m.verify(d.cmd, &green(pair(1, 5), clock.now())),
            VerifyStep::Pending { .. }
        ));
        clock.set(Duration::from_secs(10));
        assert_eq!(m.verify(d.cmd, &green(pair(1, 5), clock.now())), VerifyStep::TimedOut);
        assert_eq!(m.mode(), Mode::Timeout);
        assert_eq!(m.timeout_cause(), Some(TimeoutCause::TransitionTimeout));
        assert_eq!(m.submit(&Action::Switch(1)).unwrap(), SubmitOutcome::InTimeout);
    }

    #[test]
    fn consecutive_poll_failures() {
        let (mut m, _) = setup();
        for _ in 0..4 {
            m.on_poll_timeout();
        }
        m.on_poll_ok(1);
        for _ in 0..4 {
            m.on_poll_timeout();
        }
        assert_eq!(m.mode(), Mode::Idle);
        m.on_poll_timeout();
        assert_eq!(m.mode(), Mode::Timeout);
        assert_eq!(m.timeout_cause(), Some(TimeoutCause::CommFailure));
        let n = m.log().records().len();
        m.on_poll_timeout();
        assert_eq!(m.log().records().len(), n, "polling halts in TIMEOUT");
    }

    #[test]
    fn drift_detection() {
        let (mut m, _) = setup();
        let step = Duration::from_millis(250);
        let slow = Duration::from_millis(300);
        for _ in 0..4 {
            assert!(m.report_step_duration(slow, step));
        }
        assert!(!m.report_step_duration(step, step));
        for _ in 0..4 {
            m.report_step_duration(slow, step);
        }
        assert_eq!(m.mode(), Mode::Idle);
        m.report_step_duration(slow, step);
        assert_eq!(m.timeout_cause(), Some(TimeoutCause::SimDrift));
    }

    #[test]
    fn send_failure_times_out_but_lost_ack_does_not() {
        let (mut m, _) = setup();
        let SubmitOutcome::Dispatched(d) = m.submit(&Action::Switch(1)).unwrap() else {
            panic!()
        };
        m.on_set_result(d.cmd, Err(CommError::Timeout(Duration::from_secs(1))));
        assert_eq!(m.mode(), Mode::OnHold);
        m.on_set_result(d.cmd, Err(CommError::Io(std::io::Error::other("down"))));
        assert_eq!(m.mode(), Mode::Timeout);
    }

    #[test]
    fn recovery() {
        let (mut m, _) = setup();
        assert!(matches!(m.begin_recover(), Err(RecoverError::NotInTimeout(Mode::Idle))));
        for _ in 0..5 {
            m.on_poll_timeout();
        }
        let failed = m.complete_recover(Err(CommError::Timeout(Duration::from_secs(1))));
        assert!(matches!(failed, Err(RecoverError::Unreachable(_))));
        assert_eq!(m.mode(), Mode::Timeout);
        assert!(matches!(
            m.complete_recover(Ok(SignalState::all_red(Duration::ZERO))),
            Err(RecoverError::NoServedPair(_))
        ));
        assert_eq!(
            m.complete_recover(Ok(green(pair(3, 7), Duration::ZERO))).unwrap(),
            pair(3, 7)
        );
        assert_eq!(m.mode(), Mode::Idle);
        assert_eq!(m.current_pair(), pair(3, 7));
        assert_eq!(*events(&m).last().unwrap(), EventKind::Recovered);
    }

    #[test]
    fn stale_worker_cannot_touch_new_hold() {
        let (mut m, clock) = setup();
        let SubmitOutcome::Dispatched(first) = m.submit(&Action::Switch(1)).unwrap() else {
            panic!()
        };
        clock.set(Duration::from_secs(10));
        m.verify(first.cmd, &green(pair(1, 5), clock.now()));
        m.complete_recover(Ok(green(pair(1, 5), clock.now()))).unwrap();
        let SubmitOutcome::Dispatched(second) = m.submit(&Action::Switch(1)).unwrap() else {
            panic!()
        };
        assert_eq!(m.verify(first.cmd, &green(pair(2, 6), clock.now())), VerifyStep::Stale);
        assert_eq!(
            m.verify(second.cmd, &green(pair(2, 6), clock.now())),
            VerifyStep::Released
        );
    }
}
