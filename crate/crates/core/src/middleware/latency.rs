// SPDX-License-Identifier: Apache-2.0

//! Internal latency: time from an agent's action to the dispatch of the
//! corresponding controller command.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::events::{EventKind, EventRecord};
use crate::model::ActionKind;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub kind: ActionKind,
    pub n: usize,
    pub mean_ms: f64,
    /// Population standard deviation.
    pub std_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyTable {
    /// One row per action kind that has at least one sample.
    pub rows: Vec<LatencyRow>,
    /// ACTION_OUT events with no DISPATCHED (dropped, rejected or invalid).
    pub undispatched: usize,
    /// DISPATCHED events with no ACTION_OUT.
    pub orphaned: usize,
}

impl LatencyTable {
    pub fn row(&self, kind: ActionKind) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.kind == kind)
    }

    /// Sample count across all kinds.
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.n).sum()
    }
}

pub fn format_row(label: &str, n: usize, mean_ms: f64, std_ms: f64) -> String {
    format!("{label:<18}{n:>5}{mean_ms:>12.4}{std_ms:>11.4}")
}

impl fmt::Display for LatencyTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18}{:>5}{:>12}{:>11}",
            "Action Type", "N", "Mean (ms)", "Std (ms)"
        )?;
        for r in &self.rows {
            writeln!(f, "{}", format_row(r.kind.label(), r.n, r.mean_ms, r.std_ms))?;
        }
        if self.undispatched + self.orphaned > 0 {
            writeln!(
                f,
                "({} actions not dispatched, {} dispatches without an action)",
                self.undispatched, self.orphaned
            )?;
        }
        Ok(())
    }
}

/// Per-command latency samples in ms, keyed by action kind.
pub fn latency_samples(events: &[EventRecord]) -> (BTreeMap<ActionKind, Vec<f64>>, usize, usize) {
    let mut outs: BTreeMap<u64, (ActionKind, u64)> = BTreeMap::new();
    let mut dispatched: BTreeMap<u64, u64> = BTreeMap::new();
    for ev in events {
        let Some(cmd) = ev.detail.cmd else { continue };
        match ev.event {
            EventKind::ActionOut => {
                if let Some(kind) = ev.detail.action {
                    outs.entry(cmd).or_insert((kind, ev.t));
                }
            }
            EventKind::Dispatched => {
                dispatched.entry(cmd).or_insert(ev.t);
            }
            _ => {}
        }
    }
    let mut samples: BTreeMap<ActionKind, Vec<f64>> = BTreeMap::new();
    let mut undispatched = 0;
    for (cmd, (kind, t_out)) in &outs {
        match dispatched.get(cmd) {
            Some(t_disp) if t_disp >= t_out => {
                samples.entry(*kind).or_default().push((t_disp - t_out) as f64 / 1e6);
            }
            _ => undispatched += 1,
        }
    }
    let orphaned = dispatched.keys().filter(|c| !outs.contains_key(c)).count();
    (samples, undispatched, orphaned)
}

pub fn internal_latency(events: &[EventRecord]) -> LatencyTable {
    let (samples, undispatched, orphaned) = latency_samples(events);
    let rows = ActionKind::ALL
        .iter()
        .filter_map(|kind| {
            let xs = samples.get(kind)?;
            let (mean, std) = mean_std(xs);
            Some(LatencyRow {
                kind: *kind,
                n: xs.len(),
                mean_ms: mean,
                std_ms: std,
            })
        })
        .collect();
    LatencyTable {
        rows,
        undispatched,
        orphaned,
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::middleware::events::EventDetail;

    fn ev(t: u64, event: EventKind, cmd: u64, kind: ActionKind) -> EventRecord {
        EventRecord {
            t,
            event,
            detail: EventDetail {
                cmd: Some(cmd),
                action: Some(kind),
                ..Default::default()
            },
        }
    }

    #[test]
    fn pairs_by_command() {
        let log = vec![
            ev(1_000_000, EventKind::ActionOut, 1, ActionKind::Switch),
            ev(1_500_000, EventKind::Dispatched, 1, ActionKind::Switch),
            ev(2_000_000, EventKind::ActionOut, 2, ActionKind::Switch),
            ev(3_000_000, EventKind::Dispatched, 2, ActionKind::Switch),
            ev(4_000_000, EventKind::ActionOut, 3, ActionKind::Switch),
            ev(5_000_000, EventKind::Dispatched, 9, ActionKind::Switch),
        ];
        let t = internal_latency(&log);
        let row = t.row(ActionKind::Switch).unwrap();
        assert_eq!(row.n, 2);
        assert!((row.mean_ms - 0.75).abs() < 1e-12);
        assert!((row.std_ms - 0.25).abs() < 1e-12);
        assert_eq!((t.undispatched, t.orphaned), (1, 1));
        assert!(t.row(ActionKind::Selection).is_none());
    }

    #[test]
    fn row_format_matches_table_layout() {
        assert_eq!(
            format_row("phase_switch", 91, 0.8745, 1.0798),
            "phase_switch         91      0.8745     1.0798"
        );
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
    }
}
