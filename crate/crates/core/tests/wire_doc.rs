// SPDX-License-Identifier: Apache-2.0

// Replays the request/reply examples in docs/wire.md against the controller.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use phasebridge::controller::{FaultMode, SignalController};
use phasebridge::model::RingBarrierConfig;

fn hex(line: &str) -> Vec<u8> {
    line.split_whitespace()
        .map(|b| u8::from_str_radix(b, 16).unwrap_or_else(|_| panic!("bad hex byte {b:?}")))
        .collect()
}

#[test]
fn documented_exchanges_match_the_controller() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/wire.md");
    let doc = std::fs::read_to_string(path).unwrap();
    let mut blocks = 0;
    let mut exchanges = 0;
    let mut lines = doc.lines();
    while let Some(line) = lines.next() {
        let Some(info) = line.strip_prefix("```wire") else {
            continue;
        };
        blocks += 1;
        let mut c = SignalController::new(Arc::new(RingBarrierConfig::standard8()), Duration::ZERO);
        if let Some(mode) = info.split_whitespace().next() {
            c.set_fault(mode.parse::<FaultMode>().unwrap());
        }
        let mut now = Duration::from_secs(1);
        let mut pending: Option<Vec<u8>> = None;
        for l in lines.by_ref().take_while(|l| !l.starts_with("```")) {
            if let Some(req) = l.strip_prefix("->") {
                assert!(pending.is_none(), "request without a reply in block {blocks}");
                pending = Some(hex(req));
            } else if let Some(rep) = l.strip_prefix("<-") {
                let req = pending.take().expect("reply without a request");
                let got = c.handle_datagram(&req, now).expect("controller replied");
                assert_eq!(got, hex(rep), "block {blocks}: request {req:02x?}");
                exchanges += 1;
                now += Duration::from_millis(10);
            }
        }
        assert!(pending.is_none(), "dangling request in block {blocks}");
    }
    assert!(blocks >= 6 && exchanges >= 12, "{blocks} blocks, {exchanges} exchanges");
}
