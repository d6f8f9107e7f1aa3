// SPDX-License-Identifier: Apache-2.0

//! Closed-loop runs: agent, middleware and traffic model.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::agents::AgentKind;
use super::scenario::{ClockMode, ScenarioConfig};
use super::testbed::VirtualTestbed;
use super::traffic::{TrafficSim, TrafficState};
use crate::middleware::{Middleware, Mode, SubmitOutcome, TimeoutCause};
use crate::model::{Action, ModelError, PhasePair, RingBarrierConfig};
use crate::signal::SignalState;

/// The middleware as the run loop sees it.
pub trait Plant {
    fn submit(&mut self, action: &Action) -> Result<SubmitOutcome, ModelError>;
    fn mode(&self) -> Mode;
    fn current_pair(&self) -> PhasePair;
    fn timeout_cause(&self) -> Option<TimeoutCause>;
    fn signal(&self) -> Arc<SignalState>;
    fn report_step_duration(&mut self, elapsed: Duration, step: Duration) -> bool;
}

impl Plant for VirtualTestbed {
    fn submit(&mut self, action: &Action) -> Result<SubmitOutcome, ModelError> {
        VirtualTestbed::submit(self, action)
    }
    fn mode(&self) -> Mode {
        VirtualTestbed::mode(self)
    }
    fn current_pair(&self) -> PhasePair {
        VirtualTestbed::current_pair(self)
    }
    fn timeout_cause(&self) -> Option<TimeoutCause> {
        self.manager().timeout_cause()
    }
    fn signal(&self) -> Arc<SignalState> {
        VirtualTestbed::signal(self)
    }
    fn report_step_duration(&mut self, elapsed: Duration, step: Duration) -> bool {
        VirtualTestbed::report_step_duration(self, elapsed, step)
    }
}

impl Plant for Middleware {
    fn submit(&mut self, action: &Action) -> Result<SubmitOutcome, ModelError> {
        Middleware::submit(self, action)
    }
    fn mode(&self) -> Mode {
        Middleware::mode(self)
    }
    fn current_pair(&self) -> PhasePair {
        self.state().current_pair
    }
    fn timeout_cause(&self) -> Option<TimeoutCause> {
        self.state().timeout_cause
    }
    fn signal(&self) -> Arc<SignalState> {
        Middleware::signal(self)
    }
    fn report_step_duration(&mut self, elapsed: Duration, step: Duration) -> bool {
        Middleware::report_step_duration(self, elapsed, step)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub dispatched: u64,
    pub dropped: u64,
    pub conflict_rejected: u64,
    pub in_timeout: u64,
    pub invalid: u64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub agent: AgentKind,
    pub clock_mode: ClockMode,
    pub seed: u64,
    pub steps: u64,
    pub sim_time_s: f64,
    pub total_arrivals: f64,
    pub total_departures: f64,
    pub final_queue: f64,
    /// Total queued vehicles averaged over steps.
    pub mean_queue: f64,
    pub agent_invocations: u64,
    pub decisions: BTreeMap<String, u64>,
    pub outcomes: OutcomeCounts,
    pub timed_out: Option<TimeoutCause>,
}

pub type StepCost = Box<dyn FnMut(u64) -> Duration + Send>;
pub type InvokeHook = Box<dyn FnMut(Duration, &Action) + Send>;

/// Hooks for tests and fault drills.
pub struct RunOptions {
    /// Extra compute time charged to step `k`. In virtual runs this is the
    /// step's whole cost; in real-time runs it is spent sleeping.
    pub step_cost: Option<StepCost>,
    /// Real-time only: how long to wait for a manual recovery before giving up.
    pub recovery_wait: Duration,
    /// Called with each agent action's sim time, for cross-checks.
    pub on_invoke: Option<InvokeHook>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            step_cost: None,
            recovery_wait: Duration::ZERO,
            on_invoke: None,
        }
    }
}

struct Session<'a> {
    topology: &'a RingBarrierConfig,
    scenario: &'a ScenarioConfig,
    agent: AgentKind,
    traffic: TrafficSim,
    queue_sum: f64,
    steps: u64,
    invocations: u64,
    decisions: BTreeMap<String, u64>,
    outcomes: OutcomeCounts,
    options: RunOptions,
}

fn decision_key(action: &Action) -> String {
    match action {
        Action::Selection(p) => p.to_string(),
        Action::Switch(0) => "keep".into(),
        Action::Switch(_) => "advance".into(),
        Action::Duration(f) => format!("{f:.2}"),
    }
}

impl<'a> Session<'a> {
    fn new(
        topology: &'a RingBarrierConfig,
        scenario: &'a ScenarioConfig,
        agent: AgentKind,
        options: RunOptions,
    ) -> Self {
        Session {
            topology,
            scenario,
            agent,
            traffic: TrafficSim::new(scenario, topology.phases()),
            queue_sum: 0.0,
            steps: 0,
            invocations: 0,
            decisions: BTreeMap::new(),
            outcomes: OutcomeCounts::default(),
            options,
        }
    }

    fn invoke(&mut self, plant: &mut dyn Plant, sim_time: Duration) {
        let action = self
            .agent
            .decide(self.traffic.state(), plant.current_pair(), self.topology);
        self.invocations += 1;
        *self.decisions.entry(decision_key(&action)).or_default() += 1;
        if let Some(f) = self.options.on_invoke.as_mut() {
            f(sim_time, &action);
        }
        match plant.submit(&action) {
            Ok(SubmitOutcome::Dispatched(_)) => self.outcomes.dispatched += 1,
            Ok(SubmitOutcome::Dropped) => self.outcomes.dropped += 1,
            Ok(SubmitOutcome::ConflictRejected) => self.outcomes.conflict_rejected += 1,
            Ok(SubmitOutcome::InTimeout) => self.outcomes.in_timeout += 1,
            Err(e) => {
                log::warn!("agent produced an invalid action: {e}");
                self.outcomes.invalid += 1;
            }
        }
    }

    fn interval_due(&self, k: u64) -> bool {
        !self.agent.is_dynamic() && k.is_multiple_of(self.scenario.steps_per_interval())
    }

    fn dynamic_due(&self, plant: &dyn Plant) -> bool {
        self.agent.is_dynamic() && plant.mode() == Mode::Idle
    }

    fn advance_traffic(&mut self, signal: &SignalState) {
        let st = self.traffic.step(signal);
        self.queue_sum += st.total_queue().as_f64();
        self.steps += 1;
    }

    fn step_cost(&mut self, k: u64) -> Duration {
        self.options.step_cost.as_mut().map_or(Duration::ZERO, |f| f(k))
    }

    fn finish(self, clock_mode: ClockMode, timed_out: Option<TimeoutCause>) -> (RunMetrics, TrafficState) {
        let st = self.traffic.state().clone();
        let metrics = RunMetrics {
            agent: self.agent,
            clock_mode,
            seed: self.scenario.rng_seed,
            steps: self.steps,
            sim_time_s: st.sim_time.as_secs_f64(),
            total_arrivals: st.cumulative_arrivals.as_f64(),
            total_departures: st.cumulative_departures.as_f64(),
            final_queue: st.total_queue().as_f64(),
            mean_queue: if self.steps == 0 {
                0.0
            } else {
                self.queue_sum / self.steps as f64
            },
            agent_invocations: self.invocations,
            decisions: self.decisions,
            outcomes: self.outcomes,
            timed_out,
        };
        (metrics, st)
    }
}

/// Runs the scenario against a virtual testbed as fast as possible. Ends
/// early if the middleware enters TIMEOUT.
pub fn run_virtual(
    topology: &RingBarrierConfig,
    scenario: &ScenarioConfig,
    agent: AgentKind,
    bed: &mut VirtualTestbed,
    options: RunOptions,
) -> (RunMetrics, TrafficState) {
    let mut s = Session::new(topology, scenario, agent, options);
    let step = scenario.step();
    let origin = bed.now();
    let mut timed_out = None;
    for k in 0..scenario.total_steps() {
        let t = origin + step * k as u32;
        while let Some(at) = bed.advance_until_release(t) {
            if s.dynamic_due(bed) {
                s.invoke(bed, at - origin);
            }
        }
        if bed.mode() == Mode::Timeout {
            timed_out = bed.manager().timeout_cause();
            break;
        }
        if s.interval_due(k) || s.dynamic_due(bed) {
            s.invoke(bed, t - origin);
        }
        let signal = bed.signal();
        s.advance_traffic(&signal);
        let cost = s.step_cost(k);
        bed.report_step_duration(cost, step);
    }
    if timed_out.is_none() {
        bed.advance_to(origin + step * s.steps as u32);
        timed_out = bed.manager().timeout_cause();
    }
    s.finish(ClockMode::Virtual, timed_out)
}

/// Runs the scenario paced to the wall clock. On TIMEOUT, waits up to
/// `options.recovery_wait` for a manual recovery before ending the run.
pub fn run_realtime(
    topology: &RingBarrierConfig,
    scenario: &ScenarioConfig,
    agent: AgentKind,
    mw: &mut Middleware,
    options: RunOptions,
) -> (RunMetrics, TrafficState) {
    const PACING: Duration = Duration::from_millis(1);
    let mut s = Session::new(topology, scenario, agent, options);
    let step = scenario.step();
    let start = Instant::now();
    let mut timed_out = None;
    for k in 0..scenario.total_steps() {
        let target = step * k as u32;
        loop {
            if s.dynamic_due(mw) {
                s.invoke(mw, start.elapsed());
            }
            let now = start.elapsed();
            if now >= target {
                break;
            }
            thread::sleep((target - now).min(PACING));
        }
        let t0 = Instant::now();
        if mw.mode() == Mode::Timeout {
            let cause = Plant::timeout_cause(mw);
            log::warn!(
                "middleware in TIMEOUT ({}); waiting up to {:?} for a manual recovery",
                cause.map_or("unknown".into(), |c| c.to_string()),
                s.options.recovery_wait
            );
            let deadline = Instant::now() + s.options.recovery_wait;
            while mw.mode() == Mode::Timeout && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(50));
            }
            if mw.mode() == Mode::Timeout {
                timed_out = cause;
                break;
            }
            log::info!("recovered; resuming");
        }
        if s.interval_due(k) || s.dynamic_due(mw) {
            s.invoke(mw, start.elapsed());
        }
        let signal = mw.signal();
        s.advance_traffic(&signal);
        let extra = s.step_cost(k);
        if !extra.is_zero() {
            thread::sleep(extra);
        }
        mw.report_step_duration(t0.elapsed(), step);
    }
    if timed_out.is_none() {
        timed_out = Plant::timeout_cause(mw);
    }
    s.finish(ClockMode::RealTime, timed_out)
}
