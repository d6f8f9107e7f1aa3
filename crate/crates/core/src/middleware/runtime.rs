// SPDX-License-Identifier: Apache-2.0

//! Wall-clock middleware host.
//!
//! A poller thread keeps the signal cache fresh. Each dispatched command
//! gets a worker thread that sends the phase call and then verifies the
//! transition. Both talk to the controller over UDP. The manager sits behind
//! one mutex; the event log has its own lock, taken only while the manager
//! lock is held or not at all.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::cache::SignalCache;
use super::client::{ControllerClient, UdpTransport};
use super::config::MiddlewareConfig;
use super::events::{EventLog, Mode};
use super::manager::{Dispatch, Manager, ManagerState, RecoverError, SubmitOutcome, VerifyStep};
use crate::clock::Clock;
use crate::model::{Action, ModelError, PhasePair, RingBarrierConfig};
use crate::signal::SignalState;

const SLEEP_SLICE: Duration = Duration::from_millis(20);

struct Inner {
    manager: Mutex<Manager>,
    cache: SignalCache,
    clock: Arc<dyn Clock>,
    config: MiddlewareConfig,
    controller: SocketAddr,
    shutdown: Arc<AtomicBool>,
    command_client: Mutex<ControllerClient<UdpTransport>>,
}

impl Inner {
    fn manager(&self) -> MutexGuard<'_, Manager> {
        self.manager.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Relaxed)
    }

    /// Sleeps until `deadline` on the run clock. False if shutting down.
    fn sleep_until(&self, deadline: Duration) -> bool {
        loop {
            if self.stopping() {
                return false;
            }
            let now = self.clock.now();
            if now >= deadline {
                return true;
            }
            thread::sleep((deadline - now).min(SLEEP_SLICE));
        }
    }

    fn client(&self) -> io::Result<ControllerClient<UdpTransport>> {
        let t = UdpTransport::new(self.controller, self.config.udp_timeout())?.with_cancel(Arc::clone(&self.shutdown));
        Ok(ControllerClient::new(t))
    }

    fn recover(&self) -> Result<PhasePair, RecoverError> {
        self.manager().begin_recover()?;
        let observed = {
            let mut c = self.command_client.lock().unwrap_or_else(|e| e.into_inner());
            c.read_signal_state(self.clock.as_ref())
        };
        if let Ok(s) = &observed {
            self.cache.publish(s.clone());
        }
        self.manager().complete_recover(observed)
    }
}

/// Running middleware. Dropping it stops all threads.
pub struct Middleware {
    inner: Arc<Inner>,
    threads: Vec<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
    control_addr: Option<SocketAddr>,
}

impl Middleware {
    /// Reads the controller once to learn the served pair (falling back to
    /// the first sequence pair if it does not answer) and starts polling.
    pub fn start(
        topology: Arc<RingBarrierConfig>,
        config: MiddlewareConfig,
        controller: SocketAddr,
        log: EventLog,
    ) -> io::Result<Self> {
        let clock = Arc::clone(log.clock());
        let shutdown = Arc::new(AtomicBool::new(false));
        let client = ControllerClient::new(
            UdpTransport::new(controller, config.udp_timeout())?.with_cancel(Arc::clone(&shutdown)),
        );
        let inner = Arc::new(Inner {
            manager: Mutex::new(Manager::new(topology, config.clone(), log)),
            cache: SignalCache::new(),
            clock,
            config,
            controller,
            shutdown,
            command_client: Mutex::new(client),
        });

        let initial = inner
            .command_client
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .read_signal_state(inner.clock.as_ref());
        match initial {
            Ok(state) => {
                if inner.manager().sync_current_pair(&state).is_none() {
                    log::warn!("controller shows no admissible pair green at startup");
                }
                inner.cache.publish(state);
            }
            Err(e) => {
                log::warn!("initial controller read failed ({e}); assuming the first sequence pair")
            }
        }

        let mut poll_client = inner.client()?;
        let i = Arc::clone(&inner);
        let poller = thread::Builder::new()
            .name("mw-poller".into())
            .spawn(move || poll_loop(&i, &mut poll_client))?;
        Ok(Middleware {
            inner,
            threads: vec![poller],
            workers: Vec::new(),
            control_addr: None,
        })
    }

    /// Serves `recover` and `snapshot` line commands on a TCP socket.
    pub fn serve_control(&mut self, bind: SocketAddr) -> io::Result<SocketAddr> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let i = Arc::clone(&self.inner);
        self.threads.push(
            thread::Builder::new()
                .name("mw-control".into())
                .spawn(move || control_loop(&i, &listener))?,
        );
        self.control_addr = Some(addr);
        Ok(addr)
    }

    pub fn control_addr(&self) -> Option<SocketAddr> {
        self.control_addr
    }

    pub fn submit(&mut self, action: &Action) -> Result<SubmitOutcome, ModelError> {
        let outcome = self.inner.manager().submit(action)?;
        if let SubmitOutcome::Dispatched(d) = outcome {
            self.workers.retain(|w| !w.is_finished());
            let i = Arc::clone(&self.inner);
            match thread::Builder::new()
                .name(format!("mw-cmd-{}", d.cmd))
                .spawn(move || command_worker(&i, d))
            {
                Ok(h) => self.workers.push(h),
                Err(e) => {
                    log::error!("cannot start command worker: {e}");
                    self.inner.manager().on_set_result(d.cmd, Err(e.into()));
                }
            }
        }
        Ok(outcome)
    }

    pub fn recover(&self) -> Result<PhasePair, RecoverError> {
        self.inner.recover()
    }

    pub fn state(&self) -> ManagerState {
        self.inner.manager().snapshot()
    }

    pub fn mode(&self) -> Mode {
        self.inner.manager().mode()
    }

    pub fn signal(&self) -> Arc<SignalState> {
        self.inner.cache.load()
    }

    pub fn report_step_duration(&self, elapsed: Duration, step: Duration) -> bool {
        self.inner.manager().report_step_duration(elapsed, step)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn log(&self) -> EventLog {
        self.inner.manager().log().clone()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.inner.shutdown.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..).chain(self.workers.drain(..)) {
            let _ = t.join();
        }
        self.inner.manager().log().journal().flush();
    }
}

impl Drop for Middleware {
    fn drop(&mut self) {
        self.stop();
    }
}

fn poll_loop(inner: &Inner, client: &mut ControllerClient<UdpTransport>) {
    let period = inner.config.poll_period();
    let mut next = inner.clock.now();
    while inner.sleep_until(next) {
        if inner.manager().mode() != Mode::Timeout {
            let result = client.read_signal_state(inner.clock.as_ref());
            if inner.stopping() {
                break;
            }
            match result {
                Ok(state) => {
                    let seq = inner.cache.publish(state);
                    inner.manager().on_poll_ok(seq);
                }
                Err(e) => {
                    log::debug!("poll failed: {e}");
                    inner.manager().on_poll_timeout();
                }
            }
        }
        next += period;
        let now = inner.clock.now();
        if next < now {
            // Skip ticks missed while waiting on a silent controller.
            let behind = (now - next).as_nanos() / period.as_nanos().max(1);
            next += period * (behind as u32 + 1);
        }
    }
}

fn command_worker(inner: &Inner, d: Dispatch) {
    let sent = {
        let mut c = inner.command_client.lock().unwrap_or_else(|e| e.into_inner());
        c.call(d.mask)
    };
    inner.manager().on_set_result(d.cmd, sent);
    let mut next = d.dispatched_at + inner.config.verify_interval();
    while inner.sleep_until(next) {
        let snapshot = inner.cache.load();
        match inner.manager().verify(d.cmd, &snapshot) {
            VerifyStep::Pending { next: n } | VerifyStep::HoldUntil(n) => next = n,
            VerifyStep::Released | VerifyStep::TimedOut | VerifyStep::Stale => break,
        }
    }
}

/// Executes one control line and returns the reply line.
fn control_command(inner: &Inner, line: &str) -> String {
    match line {
        "recover" => match inner.recover() {
            Ok(pair) => format!("ok RECOVERED pair={pair} mode=IDLE"),
            Err(e @ RecoverError::NotInTimeout(_)) => format!("err precondition failed: {e}"),
            Err(e) => format!("err recovery failed, still TIMEOUT: {e}"),
        },
        "snapshot" | "status" => {
            let state = inner.manager().snapshot();
            match serde_json::to_string(&state) {
                Ok(json) => format!("ok {json}"),
                Err(e) => format!("err {e}"),
            }
        }
        other => format!("err unknown command {other:?} (try `recover` or `snapshot`)"),
    }
}

fn control_loop(inner: &Inner, listener: &TcpListener) {
    while !inner.stopping() {
        match listener.accept() {
            Ok((stream, _)) => {
                if let Err(e) = handle_conn(inner, stream) {
                    log::debug!("control connection: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(SLEEP_SLICE),
            Err(e) => {
                log::warn!("control accept: {e}");
                thread::sleep(SLEEP_SLICE);
            }
        }
    }
}

fn handle_conn(inner: &Inner, stream: TcpStream) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        writeln!(writer, "{}", control_command(inner, line))?;
    }
    Ok(())
}
