// SPDX-License-Identifier: Apache-2.0

//! Middleware event records and the log they go to.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::{nanos, Clock};
use crate::journal::Journal;
use crate::model::{ActionKind, PhasePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    ActionOut,
    Converted,
    Dispatched,
    SetAcked,
    VerifyPoll,
    VerifyMatch,
    HoldReleased,
    Dropped,
    ConflictRejected,
    TimeoutSet,
    Recovered,
    PollOk,
    PollTimeout,
    Drift,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Idle,
    OnHold,
    Timeout,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Idle => "IDLE",
            Mode::OnHold => "ON_HOLD",
            Mode::Timeout => "TIMEOUT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TimeoutCause {
    CommFailure,
    TransitionTimeout,
    SimDrift,
}

impl fmt::Display for TimeoutCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeoutCause::CommFailure => "COMM_FAILURE",
            TimeoutCause::TransitionTimeout => "TRANSITION_TIMEOUT",
            TimeoutCause::SimDrift => "SIM_DRIFT",
        })
    }
}

/// Event-specific fields; only the ones relevant to an event are set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventDetail {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cmd: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair: Option<PhasePair>,
    /// Commanded green hold of a duration action, ms.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hold_ms: Option<u64>,
    /// Time spent on hold, DISPATCHED to HOLD_RELEASED, µs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cause: Option<TimeoutCause>,
    /// Mode the manager left, on TIMEOUT_SET.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poll_seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consecutive: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// One line of `events.jsonl`. `t` is nanoseconds on the run's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(rename = "t_ns")]
    pub t: u64,
    pub event: EventKind,
    #[serde(flatten)]
    pub detail: EventDetail,
}

/// Timestamps and appends middleware events.
#[derive(Clone)]
pub struct EventLog {
    journal: Journal<EventRecord>,
    clock: Arc<dyn Clock>,
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventLog")
            .field("records", &self.journal.len())
            .finish()
    }
}

impl EventLog {
    pub fn new(journal: Journal<EventRecord>, clock: Arc<dyn Clock>) -> Self {
        EventLog { journal, clock }
    }

    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::new(Journal::in_memory(), clock)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Records `event` at the current clock reading. The timestamp is taken
    /// under the log lock, so the log is ordered by time.
    pub fn emit(&self, event: EventKind, detail: EventDetail) -> EventRecord {
        let clock = &self.clock;
        self.journal.push_with(|prev| {
            let t = nanos(clock.now()).max(prev.map_or(0, |p| p.t));
            EventRecord { t, event, detail }
        })
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.journal.records()
    }

    pub fn journal(&self) -> &Journal<EventRecord> {
        &self.journal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use std::time::Duration;

    #[test]
    fn record_json_shape() {
        let rec = EventRecord {
            t: 1500,
            event: EventKind::Dispatched,
            detail: EventDetail {
                cmd: Some(3),
                action: Some(ActionKind::Switch),
                pair: Some(PhasePair::from_ids(4, 8).unwrap()),
                ..Default::default()
            },
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"t_ns":1500,"event":"DISPATCHED","cmd":3,"action":"switch","pair":[4,8]}"#
        );
        let back: EventRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn emit_uses_clock() {
        let clock = VirtualClock::new();
        let log = EventLog::in_memory(Arc::new(clock.clone()));
        clock.set(Duration::from_millis(12));
        let r = log.emit(EventKind::PollOk, EventDetail::default());
        assert_eq!(r.t, 12_000_000);
        assert_eq!(EventKind::HoldReleased.to_string(), "HOLD_RELEASED");
    }
}
