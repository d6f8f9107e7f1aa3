// SPDX-License-Identifier: Apache-2.0

//! Reference control agents. They see queues only, never signal colors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::traffic::{TrafficState, Vehicles};
use crate::model::{Action, ActionKind, PhasePair, RingBarrierConfig};

/// Queue length that maps to the longest green for the duration agent.
pub const DURATION_FULL_QUEUE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    /// Greedy pair selection.
    Selection,
    /// Advance when the next pair has the longer queue.
    Switch,
    /// Green time proportional to the next pair's queue.
    Duration,
    /// Always advance; a fixed-order baseline.
    Fixed,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::Selection,
        AgentKind::Switch,
        AgentKind::Duration,
        AgentKind::Fixed,
    ];

    pub fn action_kind(self) -> ActionKind {
        match self {
            AgentKind::Selection => ActionKind::Selection,
            AgentKind::Switch | AgentKind::Fixed => ActionKind::Switch,
            AgentKind::Duration => ActionKind::Duration,
        }
    }

    /// Invoked on every return to IDLE instead of on a fixed interval.
    pub fn is_dynamic(self) -> bool {
        self == AgentKind::Duration
    }

    pub fn decide(self, traffic: &TrafficState, current: PhasePair, cfg: &RingBarrierConfig) -> Action {
        match self {
            AgentKind::Selection => agent_select(traffic, cfg),
            AgentKind::Switch => agent_switch(traffic, current, cfg),
            AgentKind::Duration => agent_duration(traffic, current, cfg),
            AgentKind::Fixed => Action::Switch(1),
        }
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "selection" | "select" => Ok(AgentKind::Selection),
            "switch" => Ok(AgentKind::Switch),
            "duration" => Ok(AgentKind::Duration),
            "fixed" => Ok(AgentKind::Fixed),
            other => Err(format!(
                "unknown agent {other:?} (expected selection, switch, duration or fixed)"
            )),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentKind::Selection => "selection",
            AgentKind::Switch => "switch",
            AgentKind::Duration => "duration",
            AgentKind::Fixed => "fixed",
        })
    }
}

pub fn pair_queue(traffic: &TrafficState, pair: PhasePair) -> Vehicles {
    traffic.queue_of(pair.ring1) + traffic.queue_of(pair.ring2)
}

/// The admissible pair with the longest combined queue; ties go to the
/// lowest phase ids.
///
/// # Panics
/// If the configuration admits no pair at all.
pub fn agent_select(traffic: &TrafficState, cfg: &RingBarrierConfig) -> Action {
    let mut best: Option<(Vehicles, PhasePair)> = None;
    // Ascending order, and only a strictly longer queue displaces the
    // incumbent.
    for pair in cfg.enumerate_admissible_pairs() {
        let q = pair_queue(traffic, pair);
        if best.is_none_or(|(bq, _)| q > bq) {
            best = Some((q, pair));
        }
    }
    let (_, pair) = best.expect("configuration admits at least one pair");
    Action::Selection(pair)
}

/// Advance iff the next pair's queue is strictly longer than the current
/// one's. A current pair outside the sequence is always advanced from.
pub fn agent_switch(traffic: &TrafficState, current: PhasePair, cfg: &RingBarrierConfig) -> Action {
    match cfg.next_pair(current) {
        Ok(next) => Action::Switch(u8::from(pair_queue(traffic, next) > pair_queue(traffic, current))),
        Err(_) => Action::Switch(1),
    }
}

/// Fraction of the next pair's green window, scaled by its queue.
pub fn agent_duration(traffic: &TrafficState, current: PhasePair, cfg: &RingBarrierConfig) -> Action {
    let q = cfg
        .next_pair(current)
        .map(|next| pair_queue(traffic, next).as_f64())
        .unwrap_or(0.0);
    Action::Duration((q / DURATION_FULL_QUEUE).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{convert_action, map_duration, PhaseId};
    use proptest::prelude::*;

    fn p(i: u8) -> PhaseId {
        PhaseId::new(i).unwrap()
    }

    fn pair(a: u8, b: u8) -> PhasePair {
        PhasePair::from_ids(a, b).unwrap()
    }

    fn traffic(qs: &[(u8, f64)]) -> TrafficState {
        let mut t = TrafficState::new(PhaseId::all());
        for &(ph, q) in qs {
            t.queue.insert(p(ph), Vehicles::from_f64(q));
        }
        t
    }

    #[test]
    fn select_unique_maximizer() {
        let cfg = RingBarrierConfig::standard8();
        assert_eq!(
            agent_select(&traffic(&[(2, 10.0), (6, 8.0)]), &cfg),
            Action::Selection(pair(2, 6))
        );
    }

    #[test]
    fn select_ties_to_lowest_ids() {
        let cfg = RingBarrierConfig::standard8();
        let all: Vec<_> = (1..=8).map(|i| (i, 3.0)).collect();
        assert_eq!(agent_select(&traffic(&all), &cfg), Action::Selection(pair(1, 5)));
    }

    #[test]
    fn select_considers_all_admissible_pairs() {
        let cfg = RingBarrierConfig::standard8();
        let t = traffic(&[(3, 9.0), (8, 9.0), (7, 4.0), (4, 4.0)]);
        assert_eq!(agent_select(&t, &cfg), Action::Selection(pair(3, 8)));
    }

    #[test]
    fn switch_rule() {
        let cfg = RingBarrierConfig::standard8();
        assert_eq!(
            agent_switch(&traffic(&[(2, 12.0), (1, 3.0)]), pair(1, 5), &cfg),
            Action::Switch(1)
        );
        assert_eq!(agent_switch(&traffic(&[]), pair(1, 5), &cfg), Action::Switch(0));
    }

    #[test]
    fn duration_rule() {
        let cfg = RingBarrierConfig::standard8();
        let Action::Duration(f) = agent_duration(&traffic(&[(2, 30.0)]), pair(1, 5), &cfg) else {
            panic!()
        };
        assert_eq!(f, 1.0);
        assert_eq!(map_duration(f, &cfg.pair_timing(pair(2, 6))).unwrap(), 20.0);
        assert_eq!(
            agent_duration(&traffic(&[(2, 5.0), (6, 5.0)]), pair(1, 5), &cfg),
            Action::Duration(0.5)
        );
    }

    proptest! {
        #[test]
        fn agent_outputs_always_convert(
            qs in proptest::collection::vec(0.0f64..50.0, 8),
            cur in 0usize..4,
            kind in proptest::sample::select(AgentKind::ALL.to_vec()),
        ) {
            let cfg = RingBarrierConfig::standard8();
            let t = traffic(&qs.iter().enumerate().map(|(i, q)| (i as u8 + 1, *q)).collect::<Vec<_>>());
            let current = cfg.sequence()[cur];
            let action = kind.decide(&t, current, &cfg);
            prop_assert!(convert_action(&cfg, &action, current).is_ok());
        }
    }
}
