// SPDX-License-Identifier: Apache-2.0

//! Action conversion, dispatch, verification and error detection.

mod cache;
mod client;
mod config;
mod events;
mod latency;
mod manager;
mod runtime;

pub use cache::SignalCache;
pub use client::{CommError, ControllerClient, LoopbackTransport, PollCycle, Transport, UdpTransport};
pub use config::MiddlewareConfig;
pub use events::{EventDetail, EventKind, EventLog, EventRecord, Mode, TimeoutCause};
pub use latency::{format_row, internal_latency, latency_samples, mean_std, LatencyRow, LatencyTable};
pub use manager::{Dispatch, Hold, Manager, ManagerState, RecoverError, SubmitOutcome, VerifyStep};
pub use runtime::Middleware;
