// SPDX-License-Identifier: Apache-2.0

//! Latest-snapshot cache for the polled signal state.
//!
//! One writer (the poller) publishes whole snapshots; any number of readers
//! load the most recent one. Readers never block the writer and always see
//! a snapshot from a single poll.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use arc_swap::ArcSwap;

use crate::signal::SignalState;

#[derive(Debug)]
pub struct SignalCache {
    current: ArcSwap<SignalState>,
    seq: AtomicU64,
}

impl Default for SignalCache {
    fn default() -> Self {
        Self::new()
    }
}

impl SignalCache {
    /// Starts with an all-red placeholder at poll_seq 0.
    pub fn new() -> Self {
        SignalCache {
            current: ArcSwap::from_pointee(SignalState::all_red(Duration::ZERO)),
            seq: AtomicU64::new(0),
        }
    }

    /// Stamps the next poll_seq onto `state` and makes it current.
    pub fn publish(&self, mut state: SignalState) -> u64 {
        let seq = self.seq.fetch_add(1, Ordering::AcqRel) + 1;
        state.poll_seq = seq;
        self.current.store(Arc::new(state));
        seq
    }

    pub fn load(&self) -> Arc<SignalState> {
        self.current.load_full()
    }

    pub fn last_seq(&self) -> u64 {
        self.seq.load(Ordering::Acquire)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhaseId;
    use crate::signal::Color;
    use std::thread;

    #[test]
    fn sequence_increases() {
        let cache = SignalCache::new();
        assert_eq!(cache.load().poll_seq, 0);
        let a = cache.publish(SignalState::all_red(Duration::from_millis(100)));
        let b = cache.publish(SignalState::all_red(Duration::from_millis(200)));
        assert!(b > a);
        assert_eq!(cache.load().poll_seq, b);
        assert_eq!(cache.load().polled_at, Duration::from_millis(200));
    }

    #[test]
    fn readers_never_see_torn_snapshots() {
        // Each snapshot is uniform: every phase green or every phase red, with
        // polled_at encoding which. A torn read would mix the two.
        let cache = Arc::new(SignalCache::new());
        let writer = {
            let cache = Arc::clone(&cache);
            thread::spawn(move || {
                for i in 0..20_000u64 {
                    let color = if i % 2 == 0 { Color::Green } else { Color::Red };
                    let mut s = SignalState::all_red(Duration::from_nanos(i % 2));
                    for p in PhaseId::all() {
                        s.colors.insert(p, color);
                    }
                    cache.publish(s);
                }
            })
        };
        let readers: Vec<_> = (0..4)
            .map(|_| {
                let cache = Arc::clone(&cache);
                thread::spawn(move || {
                    let mut last = 0;
                    for _ in 0..20_000 {
                        let s = cache.load();
                        assert!(s.poll_seq >= last);
                        last = s.poll_seq;
                        if s.poll_seq == 0 {
                            continue;
                        }
                        let want = if s.polled_at.as_nanos() == 0 {
                            Color::Green
                        } else {
                            Color::Red
                        };
                        assert!(s.colors.values().all(|c| *c == want));
                    }
                })
            })
            .collect();
        writer.join().unwrap();
        for r in readers {
            r.join().unwrap();
        }
    }
}
