// SPDX-License-Identifier: Apache-2.0

//! Queue-per-phase fluid traffic model.
//!
//! Quantities are held in micro-vehicles so that arrivals, departures and
//! queues add up exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::ScenarioConfig;
use crate::model::PhaseId;
use crate::signal::{Color, SignalState};

const MICRO: f64 = 1_000_000.0;

/// A non-negative amount of traffic, in millionths of a vehicle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vehicles(pub u64);

impl Vehicles {
    pub const ZERO: Vehicles = Vehicles(0);

    pub fn from_f64(v: f64) -> Self {
        Vehicles((v.max(0.0) * MICRO).round() as u64)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / MICRO
    }
}

impl Add for Vehicles {
    type Output = Vehicles;
    fn add(self, o: Vehicles) -> Vehicles {
        Vehicles(self.0 + o.0)
    }
}

impl AddAssign for Vehicles {
    fn add_assign(&mut self, o: Vehicles) {
        self.0 += o.0;
    }
}

impl Sub for Vehicles {
    type Output = Vehicles;
    fn sub(self, o: Vehicles) -> Vehicles {
        Vehicles(self.0 - o.0)
    }
}

impl std::iter::Sum for Vehicles {
    fn sum<I: Iterator<Item = Vehicles>>(iter: I) -> Vehicles {
        iter.fold(Vehicles::ZERO, Add::add)
    }
}

impl fmt::Display for Vehicles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}", self.as_f64())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrafficState {
    pub queue: BTreeMap<PhaseId, Vehicles>,
    #[serde(skip)]
    pub sim_time: Duration,
    pub cumulative_arrivals: Vehicles,
    pub cumulative_departures: Vehicles,
}

impl TrafficState {
    /// Empty queues for `phases` at time zero.
    pub fn new(phases: impl IntoIterator<Item = PhaseId>) -> Self {
        TrafficState {
            queue: phases.into_iter().map(|p| (p, Vehicles::ZERO)).collect(),
            sim_time: Duration::ZERO,
            cumulative_arrivals: Vehicles::ZERO,
            cumulative_departures: Vehicles::ZERO,
        }
    }

    pub fn queue_of(&self, p: PhaseId) -> Vehicles {
        self.queue.get(&p).copied().unwrap_or_default()
    }

    pub fn total_queue(&self) -> Vehicles {
        self.queue.values().copied().sum()
    }

    /// One step: `arrivals` join each queue, and every green phase
    /// discharges up to `capacity` of what was queued before the step.
    pub fn step(
        &self,
        signal: &SignalState,
        step: Duration,
        capacity: Vehicles,
        arrivals: &BTreeMap<PhaseId, Vehicles>,
    ) -> TrafficState {
        let mut next = self.clone();
        for (p, q) in next.queue.iter_mut() {
            let out = if signal.color(*p) == Color::Green {
                (*q).min(capacity)
            } else {
                Vehicles::ZERO
            };
            let inflow = arrivals.get(p).copied().unwrap_or_default();
            *q = *q - out + inflow;
            next.cumulative_departures += out;
            next.cumulative_arrivals += inflow;
        }
        next.sim_time += step;
        next
    }
}

/// Per-phase reproducible arrival stream. Each step brings
/// `rate * step * 2u` vehicles with `u` uniform on [0, 1), so the mean is
/// `rate * step`.
#[derive(Debug, Clone)]
pub struct Arrivals {
    streams: BTreeMap<PhaseId, (f64, ChaCha8Rng)>,
    step_s: f64,
}

impl Arrivals {
    pub fn new(cfg: &ScenarioConfig, phases: impl IntoIterator<Item = PhaseId>) -> Self {
        let streams = phases
            .into_iter()
            .map(|p| {
                let seed = cfg.rng_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(p.get());
                (p, (cfg.rate(p), ChaCha8Rng::seed_from_u64(seed)))
            })
            .collect();
        Arrivals {
            streams,
            step_s: cfg.step().as_secs_f64(),
        }
    }

    pub fn next_step(&mut self) -> BTreeMap<PhaseId, Vehicles> {
        let step = self.step_s;
        self.streams
            .iter_mut()
            .map(|(p, (rate, rng))| {
                let u: f64 = rng.gen();
                (*p, Vehicles::from_f64(*rate * step * 2.0 * u))
            })
            .collect()
    }
}

/// Traffic state plus its arrival process.
#[derive(Debug, Clone)]
pub struct TrafficSim {
    state: TrafficState,
    arrivals: Arrivals,
    step: Duration,
    capacity: Vehicles,
}

impl TrafficSim {
    pub fn new(cfg: &ScenarioConfig, phases: &[PhaseId]) -> Self {
        let step = cfg.step();
        TrafficSim {
            state: TrafficState::new(phases.iter().copied()),
            arrivals: Arrivals::new(cfg, phases.iter().copied()),
            step,
            capacity: Vehicles::from_f64(cfg.saturation_rate * step.as_secs_f64()),
        }
    }

    pub fn state(&self) -> &TrafficState {
        &self.state
    }

    pub fn step(&mut self, signal: &SignalState) -> &TrafficState {
        let arrivals = self.arrivals.next_step();
        self.state = self.state.step(signal, self.step, self.capacity, &arrivals);
        &self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhasePair;
    use proptest::prelude::*;

    fn p(i: u8) -> PhaseId {
        PhaseId::new(i).unwrap()
    }

    fn all_green() -> SignalState {
        let mut s = SignalState::all_red(Duration::ZERO);
        for ph in PhaseId::all() {
            s.colors.insert(ph, Color::Green);
        }
        s
    }

    #[test]
    fn green_discharges_saturation_times_step() {
        let mut st = TrafficState::new([p(1)]);
        st.queue.insert(p(1), Vehicles::from_f64(5.0));
        let cap = Vehicles::from_f64(0.5 * 0.25);
        let next = st.step(&all_green(), Duration::from_millis(250), cap, &BTreeMap::new());
        assert_eq!(next.cumulative_departures, Vehicles::from_f64(0.125));
        assert_eq!(next.queue_of(p(1)), Vehicles::from_f64(4.875));
        assert_eq!(next.sim_time, Duration::from_millis(250));

        let red = st.step(
            &SignalState::all_red(Duration::ZERO),
            Duration::from_millis(250),
            cap,
            &BTreeMap::new(),
        );
        assert_eq!(red.cumulative_departures, Vehicles::ZERO);
    }

    #[test]
    fn drains_to_empty_without_arrivals() {
        let cfg = ScenarioConfig::default();
        let phases: Vec<_> = PhaseId::all().collect();
        let mut sim = TrafficSim::new(&cfg, &phases);
        sim.state.queue.insert(p(3), Vehicles::from_f64(2.0));
        for _ in 0..100 {
            sim.step(&all_green());
        }
        assert_eq!(sim.state().total_queue(), Vehicles::ZERO);
    }

    #[test]
    fn arrivals_are_seeded() {
        let mut cfg = ScenarioConfig::default();
        cfg.arrival_rate.insert(p(2), 0.2);
        let mut a = Arrivals::new(&cfg, PhaseId::all());
        let mut b = Arrivals::new(&cfg, PhaseId::all());
        let xs: Vec<_> = (0..50).map(|_| a.next_step()).collect();
        let ys: Vec<_> = (0..50).map(|_| b.next_step()).collect();
        assert_eq!(xs, ys);
        cfg.rng_seed = 1;
        let mut c = Arrivals::new(&cfg, PhaseId::all());
        assert_ne!(xs, (0..50).map(|_| c.next_step()).collect::<Vec<_>>());
    }

    #[test]
    fn long_run_mean_matches_rate() {
        let mut cfg = ScenarioConfig::default();
        cfg.arrival_rate.insert(p(6), 0.22);
        let mut a = Arrivals::new(&cfg, [p(6)]);
        let n = 40_000;
        let total: Vehicles = (0..n).map(|_| a.next_step()[&p(6)]).sum();
        let rate = total.as_f64() / (n as f64 * 0.25);
        assert!((rate - 0.22).abs() < 0.01, "{rate}");
    }

    proptest! {
        #[test]
        fn conservation_is_exact(seed in any::<u64>(), greens in proptest::collection::vec(0usize..4, 1..200)) {
            let mut cfg = ScenarioConfig { rng_seed: seed, ..Default::default() };
            for ph in PhaseId::all() {
                cfg.arrival_rate.insert(ph, 0.1 * f64::from(ph.get()));
            }
            let phases: Vec<_> = PhaseId::all().collect();
            let mut sim = TrafficSim::new(&cfg, &phases);
            let pairs = [(1, 5), (2, 6), (3, 7), (4, 8)];
            for g in greens {
                let (a, b) = pairs[g];
                let pair = PhasePair::from_ids(a, b).unwrap();
                let mut s = SignalState::all_red(Duration::ZERO);
                for ph in pair.phases() {
                    s.colors.insert(ph, Color::Green);
                }
                let st = sim.step(&s);
                prop_assert_eq!(st.cumulative_arrivals - st.cumulative_departures, st.total_queue());
            }
        }
    }
}
