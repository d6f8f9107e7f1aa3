// SPDX-License-Identifier: Apache-2.0

//! Couples a traffic simulation to a signal controller through a
//! middleware that converts agent actions, dispatches them over a small
//! UDP protocol and verifies that the controller carried them out.

pub mod clock;
pub mod config;
pub mod controller;
pub mod harness;
pub mod journal;
pub mod middleware;
pub mod model;
pub mod report;
pub mod signal;
pub mod wire;
