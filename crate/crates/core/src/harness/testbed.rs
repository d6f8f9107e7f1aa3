// SPDX-License-Identifier: Apache-2.0

//! Virtual-time testbed: controller, middleware and clock driven from one
//! thread as a discrete-event schedule.
//!
//! The middleware's background work becomes two timed tasks, the poller
//! and the verifier. When both fall due at the same instant the poller runs
//! first. Requests reach the controller instantly; an unanswered one costs
//! the reply timeout in virtual time.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use crate::clock::{Clock, VirtualClock};
use crate::controller::{ControllerEvent, FaultMode, SignalController};
use crate::journal::Journal;
use crate::middleware::{
    CommError, ControllerClient, EventLog, EventRecord, LoopbackTransport, Manager, ManagerState, MiddlewareConfig,
    Mode, PollCycle, RecoverError, SignalCache, SubmitOutcome, VerifyStep,
};
use crate::model::{Action, ModelError, PhasePair, RingBarrierConfig};
use crate::signal::SignalState;

#[derive(Debug, Default)]
struct PollTask {
    next: Duration,
    cycle: Option<PollCycle>,
    /// A request whose reply never came; its timeout expires at `next`.
    outstanding: Option<CommError>,
}

#[derive(Debug, Clone, Copy)]
struct VerifyTask {
    cmd: u64,
    next: Duration,
}

pub struct VirtualTestbed {
    clock: VirtualClock,
    controller: Arc<Mutex<SignalController>>,
    controller_log: Journal<ControllerEvent>,
    client: ControllerClient<LoopbackTransport>,
    manager: Manager,
    cache: SignalCache,
    config: MiddlewareConfig,
    poll: PollTask,
    verify: Option<VerifyTask>,
}

impl VirtualTestbed {
    pub fn new(topology: Arc<RingBarrierConfig>, config: MiddlewareConfig) -> Self {
        Self::with_journals(topology, config, Journal::in_memory(), Journal::in_memory())
    }

    /// Builds the testbed at virtual time zero with the controller resting
    /// on the first sequence pair.
    pub fn with_journals(
        topology: Arc<RingBarrierConfig>,
        config: MiddlewareConfig,
        events: Journal<EventRecord>,
        controller_log: Journal<ControllerEvent>,
    ) -> Self {
        let clock = VirtualClock::new();
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let controller = Arc::new(Mutex::new(SignalController::new(Arc::clone(&topology), Duration::ZERO)));
        let transport = LoopbackTransport::new(
            Arc::clone(&controller),
            Arc::clone(&shared),
            controller_log.clone(),
            config.udp_timeout(),
        );
        let mut client = ControllerClient::new(transport);
        let mut manager = Manager::new(topology, config.clone(), EventLog::new(events, Arc::clone(&shared)));
        let cache = SignalCache::new();
        if let Ok(state) = client.read_signal_state(shared.as_ref()) {
            manager.sync_current_pair(&state);
            cache.publish(state);
        }
        let poll = PollTask {
            next: config.poll_period(),
            ..Default::default()
        };
        VirtualTestbed {
            clock,
            controller,
            controller_log,
            client,
            manager,
            cache,
            config,
            poll,
            verify: None,
        }
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        Arc::new(self.clock.clone())
    }

    pub fn mode(&self) -> Mode {
        self.manager.mode()
    }

    pub fn current_pair(&self) -> PhasePair {
        self.manager.current_pair()
    }

    pub fn state(&self) -> ManagerState {
        self.manager.snapshot()
    }

    pub fn signal(&self) -> Arc<SignalState> {
        self.cache.load()
    }

    pub fn manager(&self) -> &Manager {
        &self.manager
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.manager.log().records()
    }

    pub fn event_log(&self) -> &EventLog {
        self.manager.log()
    }

    pub fn controller_log(&self) -> &Journal<ControllerEvent> {
        &self.controller_log
    }

    fn lock_controller(&self) -> MutexGuard<'_, SignalController> {
        self.controller.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` on the controller, brought up to the current time.
    pub fn with_controller<R>(&mut self, f: impl FnOnce(&mut SignalController) -> R) -> R {
        let now = self.now();
        let mut c = self.lock_controller();
        c.advance_to(now);
        let out = f(&mut c);
        for ev in c.drain_events() {
            self.controller_log.push(ev);
        }
        out
    }

    pub fn set_fault(&mut self, mode: FaultMode) {
        self.with_controller(|c| c.set_fault(mode));
    }

    /// Hands an agent action to the middleware at the current instant.
    pub fn submit(&mut self, action: &Action) -> Result<SubmitOutcome, ModelError> {
        let outcome = self.manager.submit(action)?;
        if let SubmitOutcome::Dispatched(d) = outcome {
            let sent = self.client.call(d.mask);
            self.manager.on_set_result(d.cmd, sent);
            if self.manager.mode() == Mode::OnHold {
                self.verify = Some(VerifyTask {
                    cmd: d.cmd,
                    next: d.dispatched_at + self.config.verify_interval(),
                });
            }
        }
        Ok(outcome)
    }

    pub fn recover(&mut self) -> Result<PhasePair, RecoverError> {
        self.manager.begin_recover()?;
        let observed = self.client.read_signal_state(&self.clock);
        if let Ok(s) = &observed {
            self.cache.publish(s.clone());
        }
        self.manager.complete_recover(observed)
    }

    pub fn report_step_duration(&mut self, elapsed: Duration, step: Duration) -> bool {
        self.manager.report_step_duration(elapsed, step)
    }

    fn next_due(&self) -> Duration {
        match self.verify {
            Some(v) => v.next.min(self.poll.next),
            None => self.poll.next,
        }
    }

    /// Runs every task due at or before `t`, then sets the clock to `t`.
    pub fn advance_to(&mut self, t: Duration) {
        while self.advance_until_release(t).is_some() {}
    }

    /// Like [`advance_to`](Self::advance_to) but stops right after a hold is
    /// released, returning the release time with the clock left there.
    pub fn advance_until_release(&mut self, t: Duration) -> Option<Duration> {
        loop {
            let due = self.next_due();
            if due > t {
                break;
            }
            self.clock.set(due);
            if self.poll.next == due {
                self.run_poll(due);
            }
            if let Some(v) = self.verify.filter(|v| v.next == due) {
                if self.run_verify(v) == VerifyStep::Released {
                    return Some(due);
                }
            }
        }
        if t > self.now() {
            self.clock.set(t);
        }
        self.with_controller(|_| ());
        None
    }

    fn run_verify(&mut self, task: VerifyTask) -> VerifyStep {
        let snapshot = self.cache.load();
        let step = self.manager.verify(task.cmd, &snapshot);
        self.verify = match step {
            VerifyStep::Pending { next } | VerifyStep::HoldUntil(next) => Some(VerifyTask { next, ..task }),
            VerifyStep::Released | VerifyStep::TimedOut | VerifyStep::Stale => None,
        };
        step
    }

    fn next_grid(&self, now: Duration) -> Duration {
        let p = self.config.poll_period().as_nanos().max(1);
        Duration::from_nanos(((now.as_nanos() / p + 1) * p) as u64)
    }

    fn run_poll(&mut self, now: Duration) {
        let mut cycle = match self.poll.cycle.take() {
            Some(mut c) => {
                if let Some(err) = self.poll.outstanding.take() {
                    c.record(Err(err));
                }
                c
            }
            None if self.manager.mode() == Mode::Timeout => {
                self.poll.next = self.next_grid(now);
                return;
            }
            None => PollCycle::new(),
        };
        while let Some(obj) = cycle.next_object() {
            match self.client.get_status(obj) {
                Err(e @ CommError::Timeout(_)) => {
                    self.poll.outstanding = Some(e);
                    self.poll.cycle = Some(cycle);
                    self.poll.next = now + self.config.udp_timeout();
                    return;
                }
                r => cycle.record(r),
            }
        }
        match cycle.finish(now) {
            Ok(state) => {
                let seq = self.cache.publish(state);
                self.manager.on_poll_ok(seq);
            }
            Err(_) => self.manager.on_poll_timeout(),
        }
        self.poll.next = self.next_grid(now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ControllerEventKind;
    use crate::middleware::{EventKind, TimeoutCause};

    fn bed() -> VirtualTestbed {
        VirtualTestbed::new(Arc::new(RingBarrierConfig::standard8()), MiddlewareConfig::default())
    }

    fn secs(s: f64) -> Duration {
        Duration::from_secs_f64(s)
    }

    #[test]
    fn switch_completes_after_clearance() {
        let mut b = bed();
        b.advance_to(secs(1.0));
        assert!(matches!(
            b.submit(&Action::Switch(1)).unwrap(),
            SubmitOutcome::Dispatched(_)
        ));
        let released = b.advance_until_release(secs(20.0)).unwrap();
        assert_eq!(released, secs(6.0));
        assert_eq!(b.mode(), Mode::Idle);
        assert_eq!(b.current_pair(), PhasePair::from_ids(2, 6).unwrap());
        let greens: Vec<_> = b
            .controller_log()
            .records()
            .into_iter()
            .filter(|e| e.event == ControllerEventKind::GreenOnset)
            .collect();
        assert_eq!(greens.last().unwrap().t, 6_000_000_000);
    }

    #[test]
    fn silent_idle_link_fails_after_five_cycles() {
        let mut b = bed();
        b.set_fault(FaultMode::Silent);
        b.advance_to(secs(30.0));
        assert_eq!(b.manager().timeout_cause(), Some(TimeoutCause::CommFailure));
        let ev = b.events();
        let timeouts: Vec<_> = ev.iter().filter(|e| e.event == EventKind::PollTimeout).collect();
        assert_eq!(timeouts.len(), 5);
        // Three unanswered requests per cycle, one second each.
        assert_eq!(timeouts[0].t, 3_100_000_000);
    }
}
