// SPDX-License-Identifier: Apache-2.0

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use phasebridge::clock::{Clock, MonotonicClock};
use phasebridge::config::TestbedConfig;
use phasebridge::controller::{send_control_line, ControllerServer, SignalController};
use phasebridge::journal::Journal;
use phasebridge::middleware::{EventKind, EventLog, Middleware, MiddlewareConfig, Mode, SubmitOutcome, TimeoutCause};
use phasebridge::model::{Action, PhasePair, RingBarrierConfig};

const LINE_TIMEOUT: Duration = Duration::from_secs(5);

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn quick_topology() -> Arc<RingBarrierConfig> {
    let mut v: serde_json::Value = serde_json::from_str(TestbedConfig::standard_json()).unwrap();
    for ph in v["intersection"]["phases"].as_array_mut().unwrap() {
        ph["timing"] = serde_json::json!({ "min_green": 0.2, "max_green": 1.0, "yellow": 0.2, "red_clearance": 0.2 });
    }
    Arc::new(TestbedConfig::from_json(&v.to_string()).unwrap().intersection)
}

struct Rig {
    server: ControllerServer,
    mw: Middleware,
}

fn rig(config: MiddlewareConfig) -> Rig {
    let topo = quick_topology();
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
    let server = ControllerServer::spawn(
        SignalController::new(Arc::clone(&topo), clock.now()),
        Arc::clone(&clock),
        any_port(),
        Some(any_port()),
        Journal::in_memory(),
    )
    .unwrap();
    let mw = Middleware::start(topo, config, server.local_addr(), EventLog::in_memory(clock)).unwrap();
    Rig { server, mw }
}

fn wait_for(what: &str, limit: Duration, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + limit;
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn switch_over_udp_reaches_next_pair() {
    let mut r = rig(MiddlewareConfig::default());
    let SubmitOutcome::Dispatched(d) = r.mw.submit(&Action::Switch(1)).unwrap() else {
        panic!("not dispatched");
    };
    assert_eq!(r.mw.submit(&Action::Switch(1)).unwrap(), SubmitOutcome::Dropped);
    wait_for("hold release", Duration::from_secs(5), || r.mw.mode() == Mode::Idle);
    assert_eq!(r.mw.state().current_pair, PhasePair::from_ids(2, 6).unwrap());

    let kinds: Vec<_> =
        r.mw.log()
            .records()
            .into_iter()
            .filter(|e| e.detail.cmd == Some(d.cmd))
            .map(|e| e.event)
            .collect();
    assert_eq!(
        &kinds[..4],
        &[
            EventKind::ActionOut,
            EventKind::Converted,
            EventKind::Dispatched,
            EventKind::SetAcked
        ]
    );
    assert_eq!(
        &kinds[kinds.len() - 2..],
        &[EventKind::VerifyMatch, EventKind::HoldReleased]
    );
    let greens = r.server.inspect(|c| c.green_mask());
    assert_eq!(greens.0, 0b0010_0010);
    r.mw.shutdown();
    r.server.shutdown();
}

#[test]
fn silent_controller_then_recover_over_control_socket() {
    let config = MiddlewareConfig {
        poll_hz: 20.0,
        udp_timeout: 0.05,
        n_timeout: 2,
        ..Default::default()
    };
    let mut r = rig(config);
    let mw_ctl = r.mw.serve_control(any_port()).unwrap();
    let ctl = r.server.control_addr().unwrap();

    let reply = send_control_line(mw_ctl, "recover", LINE_TIMEOUT).unwrap();
    assert!(reply.starts_with("err precondition failed"), "{reply}");

    assert_eq!(
        send_control_line(ctl, "fault silent", LINE_TIMEOUT).unwrap(),
        "ok fault=silent"
    );
    wait_for("TIMEOUT", Duration::from_secs(5), || r.mw.mode() == Mode::Timeout);
    assert_eq!(r.mw.state().timeout_cause, Some(TimeoutCause::CommFailure));
    assert_eq!(r.mw.submit(&Action::Switch(1)).unwrap(), SubmitOutcome::InTimeout);

    let reply = send_control_line(mw_ctl, "recover", LINE_TIMEOUT).unwrap();
    assert!(reply.starts_with("err recovery failed, still TIMEOUT"), "{reply}");
    assert_eq!(r.mw.mode(), Mode::Timeout);

    send_control_line(ctl, "fault normal", LINE_TIMEOUT).unwrap();
    let reply = send_control_line(mw_ctl, "recover", LINE_TIMEOUT).unwrap();
    assert_eq!(reply, "ok RECOVERED pair=[1,5] mode=IDLE");
    assert_eq!(r.mw.mode(), Mode::Idle);

    let snap = send_control_line(mw_ctl, "snapshot", LINE_TIMEOUT).unwrap();
    let json: serde_json::Value = serde_json::from_str(snap.strip_prefix("ok ").unwrap()).unwrap();
    assert_eq!(json["mode"], "IDLE");
    r.mw.shutdown();
    r.server.shutdown();
}

#[test]
fn controller_status_line() {
    let r = rig(MiddlewareConfig::default());
    let reply = send_control_line(r.server.control_addr().unwrap(), "status", LINE_TIMEOUT).unwrap();
    assert!(reply.starts_with("ok engine="), "{reply}");
    let reply = send_control_line(r.server.control_addr().unwrap(), "bogus", LINE_TIMEOUT).unwrap();
    assert!(reply.starts_with("err unknown command"), "{reply}");
}
