// SPDX-License-Identifier: Apache-2.0

//! Per-phase signal indications.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::{PhaseId, PhasePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Yellow,
    Green,
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::Green => "green",
        })
    }
}

/// Snapshot of every phase's indication, as read from the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub colors: BTreeMap<PhaseId, Color>,
    /// Clock reading at which the snapshot was taken.
    pub polled_at: Duration,
    /// Assigned by the cache on publish; zero for unpublished snapshots.
    pub poll_seq: u64,
}

impl SignalState {
    pub fn all_red(polled_at: Duration) -> Self {
        SignalState {
            colors: PhaseId::all().map(|p| (p, Color::Red)).collect(),
            polled_at,
            poll_seq: 0,
        }
    }

    pub fn color(&self, p: PhaseId) -> Color {
        self.colors.get(&p).copied().unwrap_or(Color::Red)
    }

    pub fn phases_with(&self, color: Color) -> Vec<PhaseId> {
        self.colors
            .iter()
            .filter(|(_, c)| **c == color)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn greens(&self) -> Vec<PhaseId> {
        self.phases_with(Color::Green)
    }

    /// True when both phases of `target` are green and every other phase in
    /// `phases` is red.
    pub fn matches(&self, target: PhasePair, phases: &[PhaseId]) -> bool {
        phases.iter().all(|&p| {
            let want = if target.contains(p) { Color::Green } else { Color::Red };
            self.color(p) == want
        }) && self.color(target.ring1) == Color::Green
            && self.color(target.ring2) == Color::Green
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn match_requires_exact_greens_and_reds() {
        let phases: Vec<_> = PhaseId::all().collect();
        let target = PhasePair::from_ids(2, 6).unwrap();
        let mut s = SignalState::all_red(Duration::ZERO);
        assert!(!s.matches(target, &phases));
        s.colors.insert(target.ring1, Color::Green);
        s.colors.insert(target.ring2, Color::Green);
        assert!(s.matches(target, &phases));
        s.colors.insert(PhaseId::new(3).unwrap(), Color::Yellow);
        assert!(!s.matches(target, &phases));
    }
}
