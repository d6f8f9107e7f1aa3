// SPDX-License-Identifier: Apache-2.0

//! Offline analysis of `events.jsonl`: latency table, per-command
//! trajectories and hold durations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::Serialize;

use crate::middleware::{internal_latency, mean_std, EventKind, EventRecord, LatencyTable};
use crate::model::{ActionKind, PhasePair};

/// Parsed log plus the number of lines that could not be read.
#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub events: Vec<EventRecord>,
    pub skipped: usize,
}

pub fn parse_events(reader: impl BufRead) -> std::io::Result<ParsedLog> {
    let mut out = ParsedLog::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EventRecord>(&line) {
            Ok(ev) => out.events.push(ev),
            Err(e) => {
                log::debug!("skipping unreadable event line: {e}");
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub event: EventKind,
    /// Milliseconds since the command's ACTION_OUT.
    pub dt_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poll_seq: Option<u64>,
}

/// Lifecycle of one command, for plotting transition timelines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandTrajectory {
    pub cmd: u64,
    pub action: Option<ActionKind>,
    pub pair: Option<PhasePair>,
    pub hold_ms: Option<u64>,
    /// Absolute time of ACTION_OUT on the run clock, seconds.
    pub t0_s: f64,
    pub points: Vec<TrajectoryPoint>,
    /// DISPATCHED to HOLD_RELEASED, seconds.
    pub hold_s: Option<f64>,
    pub outcome: &'static str,
}

pub fn trajectories(events: &[EventRecord]) -> Vec<CommandTrajectory> {
    let mut by_cmd: BTreeMap<u64, Vec<&EventRecord>> = BTreeMap::new();
    for ev in events {
        if let Some(cmd) = ev.detail.cmd {
            by_cmd.entry(cmd).or_default().push(ev);
        }
    }
    by_cmd
        .into_iter()
        .map(|(cmd, evs)| {
            let t0 = evs
                .iter()
                .find(|e| e.event == EventKind::ActionOut)
                .map_or(evs[0].t, |e| e.t);
            let find = |k: EventKind| evs.iter().find(|e| e.event == k);
            let dispatched = find(EventKind::Dispatched);
            let released = find(EventKind::HoldReleased);
            let outcome = if released.is_some() {
                "released"
            } else if find(EventKind::TimeoutSet).is_some() {
                "timeout"
            } else if find(EventKind::Dropped).is_some() {
                "dropped"
            } else if find(EventKind::ConflictRejected).is_some() {
                "conflict_rejected"
            } else if dispatched.is_some() {
                "pending"
            } else {
                "invalid"
            };
            CommandTrajectory {
                cmd,
                action: evs.iter().find_map(|e| e.detail.action),
                pair: evs.iter().find_map(|e| e.detail.pair),
                hold_ms: evs.iter().find_map(|e| e.detail.hold_ms),
                t0_s: t0 as f64 / 1e9,
                points: evs
                    .iter()
                    .map(|e| TrajectoryPoint {
                        event: e.event,
                        dt_ms: e.t.saturating_sub(t0) as f64 / 1e6,
                        poll_seq: e.detail.poll_seq,
                    })
                    .collect(),
                hold_s: dispatched
                    .zip(released)
                    .map(|(d, r)| r.t.saturating_sub(d.t) as f64 / 1e9),
                outcome,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldSummary {
    pub kind: ActionKind,
    pub n: usize,
    pub min_s: f64,
    pub max_s: f64,
    pub mean_s: f64,
    pub std_s: f64,
}

pub fn hold_summary(trajectories: &[CommandTrajectory]) -> Vec<HoldSummary> {
    ActionKind::ALL
        .iter()
        .filter_map(|kind| {
            let xs: Vec<f64> = trajectories
                .iter()
                .filter(|t| t.action == Some(*kind))
                .filter_map(|t| t.hold_s)
                .collect();
            if xs.is_empty() {
                return None;
            }
            let (mean, std) = mean_std(&xs);
            Some(HoldSummary {
                kind: *kind,
                n: xs.len(),
                min_s: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max_s: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_s: mean,
                std_s: std,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub latency: LatencyTable,
    pub holds: Vec<HoldSummary>,
    pub trajectories: Vec<CommandTrajectory>,
    pub skipped_lines: usize,
}

impl Report {
    pub fn from_log(log: &ParsedLog) -> Self {
        let trajectories = trajectories(&log.events);
        Report {
            latency: internal_latency(&log.events),
            holds: hold_summary(&trajectories),
            trajectories,
            skipped_lines: log.skipped,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::from("Middleware internal latency by action type\n");
        s.push_str(&self.latency.to_string());
        if !self.holds.is_empty() {
            s.push_str("\nHold durations (s)\n");
            let _ = writeln!(
                s,
                "{:<18}{:>5}{:>10}{:>10}{:>10}",
                "Action Type", "N", "Min", "Mean", "Max"
            );
            for h in &self.holds {
                let _ = writeln!(
                    s,
                    "{:<18}{:>5}{:>10.3}{:>10.3}{:>10.3}",
                    h.kind.label(),
                    h.n,
                    h.min_s,
                    h.mean_s,
                    h.max_s
                );
            }
        }
        if self.skipped_lines > 0 {
            let _ = writeln!(s, "\n{} unreadable lines skipped", self.skipped_lines);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::middleware::EventDetail;

    fn ev(t_ms: u64, event: EventKind, cmd: u64) -> String {
        let r = EventRecord {
            t: t_ms * 1_000_000,
            event,
            detail: EventDetail {
                cmd: Some(cmd),
                action: Some(ActionKind::Switch),
                ..Default::default()
            },
        };
        serde_json::to_string(&r).unwrap()
    }

    #[test]
    fn two_one_ms_latencies() {
        let lines = [
            ev(0, EventKind::ActionOut, 1),
            ev(1, EventKind::Dispatched, 1),
            ev(10, EventKind::ActionOut, 2),
            ev(11, EventKind::Dispatched, 2),
            "not json".to_string(),
        ]
        .join("\n");
        let log = parse_events(lines.as_bytes()).unwrap();
        assert_eq!(log.skipped, 1);
        let r = Report::from_log(&log);
        let row = r.latency.row(ActionKind::Switch).unwrap();
        assert_eq!((row.n, row.mean_ms, row.std_ms), (2, 1.0, 0.0));
        assert!(r.render().contains("1 unreadable lines skipped"));
    }

    #[test]
    fn trajectory_relative_times_and_hold() {
        let lines = [
            ev(1000, EventKind::ActionOut, 4),
            ev(1000, EventKind::Converted, 4),
            ev(1001, EventKind::Dispatched, 4),
            ev(1101, EventKind::VerifyPoll, 4),
            ev(6101, EventKind::VerifyMatch, 4),
            ev(6101, EventKind::HoldReleased, 4),
        ]
        .join("\n");
        let log = parse_events(lines.as_bytes()).unwrap();
        let t = trajectories(&log.events);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].outcome, "released");
        assert_eq!(t[0].points[2].dt_ms, 1.0);
        assert_eq!(t[0].hold_s, Some(5.1));
        let h = hold_summary(&t);
        assert_eq!(h[0].n, 1);
    }
}
