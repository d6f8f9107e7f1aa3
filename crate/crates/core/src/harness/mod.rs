// SPDX-License-Identifier: Apache-2.0

//! Traffic model, reference agents and closed-loop run drivers.

mod agents;
mod run;
mod scenario;
mod testbed;
mod traffic;

pub use agents::{agent_duration, agent_select, agent_switch, pair_queue, AgentKind, DURATION_FULL_QUEUE};
pub use run::{run_realtime, run_virtual, InvokeHook, OutcomeCounts, Plant, RunMetrics, RunOptions, StepCost};
pub use scenario::{ClockMode, ScenarioConfig};
pub use testbed::VirtualTestbed;
pub use traffic::{Arrivals, TrafficSim, TrafficState, Vehicles};
