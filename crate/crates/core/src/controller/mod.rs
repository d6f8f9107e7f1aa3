// SPDX-License-Identifier: Apache-2.0

//! Virtual signal controller: the transition engine and its UDP front end.

mod audit;
mod engine;
mod server;

pub use audit::audit_events;
pub use engine::{
    CallOutcome, ControllerEvent, ControllerEventKind, EnginePhase, FaultMode, RejectReason, SignalController,
};
pub use server::{send_control_line, ControllerServer};
