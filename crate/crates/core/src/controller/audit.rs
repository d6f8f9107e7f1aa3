// SPDX-License-Identifier: Apache-2.0

//! Safety audit of a controller event log.

use std::time::Duration;

use crate::model::{PhaseId, RingBarrierConfig};

use super::engine::{ControllerEvent, ControllerEventKind};

/// Slack for timings recovered from nanosecond log stamps.
const EPS: Duration = Duration::from_micros(1);

fn phases(ids: &[u8]) -> Vec<PhaseId> {
    ids.iter().filter_map(|i| PhaseId::new(*i).ok()).collect()
}

fn max_secs(topology: &RingBarrierConfig, ids: &[u8], f: impl Fn(&crate::model::PhaseTiming) -> f64) -> Duration {
    let s = phases(ids)
        .into_iter()
        .filter_map(|p| topology.timing(p).ok())
        .map(|t| f(&t))
        .fold(0.0, f64::max);
    Duration::from_secs_f64(s)
}

fn close(a: Duration, b: Duration) -> bool {
    a.abs_diff(b) <= EPS
}

/// Checks that no instant shows conflicting greens, that every change of
/// the green set goes through yellow then all-red of the configured lengths,
/// and that no green ends before its minimum. Returns the first violation.
pub fn audit_events(events: &[ControllerEvent], topology: &RingBarrierConfig) -> Result<(), String> {
    // Onset time of the served green; `None` for the startup green, which
    // the controller treats as already past its minimum.
    let mut green_since: Option<(Option<Duration>, Vec<u8>)> = None;
    let mut yellow_at: Option<(Duration, Vec<u8>)> = None;
    let mut all_red_at: Option<(Duration, Vec<u8>)> = None;
    let mut last_t = Duration::ZERO;

    for (i, ev) in events.iter().enumerate() {
        let t = Duration::from_nanos(ev.t);
        let at = |msg: String| Err(format!("event {i} at {:.6} s ({:?}): {msg}", t.as_secs_f64(), ev.event));
        if t < last_t {
            return at("log goes back in time".into());
        }
        last_t = t;

        let greens = phases(&ev.greens);
        for (a_i, a) in greens.iter().enumerate() {
            for b in &greens[a_i + 1..] {
                if !topology.is_compatible(*a, *b).unwrap_or(false) {
                    return at(format!("conflicting greens {a} and {b}"));
                }
            }
        }

        match ev.event {
            ControllerEventKind::Startup => {
                green_since = Some((None, ev.greens.clone()));
            }
            ControllerEventKind::YellowOnset => {
                let Some((since, served)) = green_since.take() else {
                    return at("yellow without a preceding green".into());
                };
                if ev.yellows != served || !ev.greens.is_empty() {
                    return at(format!(
                        "yellow shows {:?}, expected the served {:?}",
                        ev.yellows, served
                    ));
                }
                let min = max_secs(topology, &served, |t| t.min_green);
                if let Some(since) = since.filter(|s| t + EPS < *s + min) {
                    return at(format!(
                        "green {:?} lasted {:?}, below minimum {:?}",
                        served,
                        t - since,
                        min
                    ));
                }
                yellow_at = Some((t, served));
            }
            ControllerEventKind::AllRedOnset => {
                let Some((yt, served)) = yellow_at.take() else {
                    return at("all-red without a preceding yellow".into());
                };
                if !ev.greens.is_empty() || !ev.yellows.is_empty() {
                    return at("all-red with a phase still green or yellow".into());
                }
                let want = max_secs(topology, &served, |t| t.yellow);
                if !close(t - yt, want) {
                    return at(format!("yellow lasted {:?}, configured {:?}", t - yt, want));
                }
                all_red_at = Some((t, served));
            }
            ControllerEventKind::GreenOnset => {
                let Some((rt, served)) = all_red_at.take() else {
                    return at("green onset without a preceding all-red".into());
                };
                let want = max_secs(topology, &served, |t| t.red_clearance);
                if !close(t - rt, want) {
                    return at(format!("all-red lasted {:?}, configured {:?}", t - rt, want));
                }
                if ev.greens.len() != 2 {
                    return at(format!("green onset with greens {:?}", ev.greens));
                }
                green_since = Some((Some(t), ev.greens.clone()));
            }
            ControllerEventKind::CallAccepted
            | ControllerEventKind::CallNoop
            | ControllerEventKind::CallRejected
            | ControllerEventKind::Fault => {
                let in_transition = yellow_at.is_some() || all_red_at.is_some();
                if let Some((_, served)) = &green_since {
                    if !in_transition && ev.greens != *served {
                        return at(format!("greens changed to {:?} outside a transition", ev.greens));
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::SignalController;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn run(calls: &[(u64, u8, u8)]) -> Vec<ControllerEvent> {
        let topo = Arc::new(RingBarrierConfig::standard8());
        let mut c = SignalController::new(Arc::clone(&topo), Duration::ZERO);
        let mut t = Duration::ZERO;
        for &(dt_ms, a, b) in calls {
            t += Duration::from_millis(dt_ms);
            let mask = crate::wire::PhaseBitmask((1 << (a - 1)) | (1 << (b - 1)));
            c.request_service(mask, t);
        }
        c.advance_to(t + Duration::from_secs(30));
        c.drain_events()
    }

    #[test]
    fn clean_log_passes() {
        let ev = run(&[(1000, 2, 6), (9000, 3, 7), (100, 4, 8)]);
        audit_events(&ev, &RingBarrierConfig::standard8()).unwrap();
    }

    #[test]
    fn detects_short_yellow() {
        let mut ev = run(&[(1000, 2, 6)]);
        let k = ev
            .iter()
            .position(|e| e.event == ControllerEventKind::AllRedOnset)
            .unwrap();
        ev[k].t -= 500_000_000;
        let err = audit_events(&ev, &RingBarrierConfig::standard8()).unwrap_err();
        assert!(err.contains("yellow lasted"), "{err}");
    }

    #[test]
    fn detects_conflicting_greens() {
        let mut ev = run(&[]);
        ev[0].greens = vec![1, 2];
        assert!(audit_events(&ev, &RingBarrierConfig::standard8())
            .unwrap_err()
            .contains("conflicting"));
    }

    proptest! {
        #[test]
        fn random_calls_keep_the_intersection_safe(
            calls in proptest::collection::vec((0u64..8000, 1u8..=8, 1u8..=8), 0..60)
        ) {
            let calls: Vec<_> = calls.into_iter().filter(|(_, a, b)| a != b).collect();
            let ev = run(&calls);
            prop_assert!(audit_events(&ev, &RingBarrierConfig::standard8()).is_ok());
        }
    }
}
