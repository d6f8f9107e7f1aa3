// SPDX-License-Identifier: Apache-2.0

//! Serves a [`SignalController`] over UDP, with a line-oriented TCP control
//! socket for switching fault modes at runtime.
//!
//! All access to the engine goes through one mutex, so datagrams, ticks and
//! control commands are applied in a single serial order.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::engine::{ControllerEvent, FaultMode, SignalController};
use crate::clock::Clock;
use crate::journal::Journal;

const POLL_SLICE: Duration = Duration::from_millis(20);
const TICK: Duration = Duration::from_millis(5);

struct Shared {
    controller: Mutex<SignalController>,
    clock: Arc<dyn Clock>,
    log: Journal<ControllerEvent>,
    shutdown: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, SignalController> {
        self.controller.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Brings the engine up to the current time and flushes its events.
    fn with_controller<R>(&self, f: impl FnOnce(&mut SignalController) -> R) -> R {
        let mut c = self.lock();
        c.advance_to(self.clock.now());
        let out = f(&mut c);
        for ev in c.drain_events() {
            self.log.push(ev);
        }
        out
    }
}

pub struct ControllerServer {
    shared: Arc<Shared>,
    local_addr: SocketAddr,
    control_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
}

impl ControllerServer {
    /// Binds the datagram socket (and the control socket, if requested) and
    /// starts serving.
    pub fn spawn(
        mut controller: SignalController,
        clock: Arc<dyn Clock>,
        bind: SocketAddr,
        control_bind: Option<SocketAddr>,
        log: Journal<ControllerEvent>,
    ) -> io::Result<Self> {
        let socket = UdpSocket::bind(bind)?;
        socket.set_read_timeout(Some(POLL_SLICE))?;
        let local_addr = socket.local_addr()?;
        let control = match control_bind {
            Some(addr) => {
                let l = TcpListener::bind(addr)?;
                l.set_nonblocking(true)?;
                Some(l)
            }
            None => None,
        };
        let control_addr = control.as_ref().map(TcpListener::local_addr).transpose()?;

        controller.advance_to(clock.now());
        for ev in controller.drain_events() {
            log.push(ev);
        }
        let shared = Arc::new(Shared {
            controller: Mutex::new(controller),
            clock,
            log,
            shutdown: AtomicBool::new(false),
        });

        let mut threads = Vec::new();
        let s = Arc::clone(&shared);
        threads.push(
            thread::Builder::new()
                .name("ctrl-udp".into())
                .spawn(move || serve_udp(&s, &socket))?,
        );
        let s = Arc::clone(&shared);
        threads.push(thread::Builder::new().name("ctrl-tick".into()).spawn(move || {
            while !s.shutdown.load(Ordering::Relaxed) {
                s.with_controller(|_| ());
                thread::sleep(TICK);
            }
        })?);
        if let Some(listener) = control {
            let s = Arc::clone(&shared);
            threads.push(
                thread::Builder::new()
                    .name("ctrl-control".into())
                    .spawn(move || serve_control(&s, &listener))?,
            );
        }
        Ok(ControllerServer {
            shared,
            local_addr,
            control_addr,
            threads,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn control_addr(&self) -> Option<SocketAddr> {
        self.control_addr
    }

    pub fn set_fault(&self, mode: FaultMode) {
        self.shared.with_controller(|c| c.set_fault(mode));
    }

    pub fn fault_mode(&self) -> FaultMode {
        self.shared.lock().fault_mode()
    }

    /// Runs `f` against the engine, brought up to the current time.
    pub fn inspect<R>(&self, f: impl FnOnce(&SignalController) -> R) -> R {
        self.shared.with_controller(|c| f(c))
    }

    pub fn log(&self) -> &Journal<ControllerEvent> {
        &self.shared.log
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.shared.with_controller(|_| ());
        self.shared.log.flush();
    }
}

impl Drop for ControllerServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_udp(shared: &Shared, socket: &UdpSocket) {
    let mut buf = [0u8; 1024];
    while !shared.shutdown.load(Ordering::Relaxed) {
        let (n, peer) = match socket.recv_from(&mut buf) {
            Ok(r) => r,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            Err(e) => {
                // ICMP port-unreachable from a departed peer surfaces here on
                // some platforms; keep serving.
                debug!("controller recv: {e}");
                continue;
            }
        };
        let now = shared.clock.now();
        let reply = shared.with_controller(|c| c.handle_datagram(&buf[..n], now));
        if let Some(bytes) = reply {
            if let Err(e) = socket.send_to(&bytes, peer) {
                warn!("controller reply to {peer}: {e}");
            }
        }
    }
}

/// Executes one control line and returns the reply line.
fn control_command(shared: &Shared, line: &str) -> String {
    let mut words = line.split_whitespace();
    match (words.next(), words.next()) {
        (Some("fault"), Some(mode)) => match mode.parse::<FaultMode>() {
            Ok(m) => {
                shared.with_controller(|c| c.set_fault(m));
                format!("ok fault={m}")
            }
            Err(e) => format!("err {e}"),
        },
        (Some("fault"), None) => format!("ok fault={}", shared.lock().fault_mode()),
        (Some("status"), None) => shared.with_controller(|c| {
            format!(
                "ok engine={:?} greens={} yellows={} reds={} fault={}",
                c.engine_phase(),
                c.green_mask(),
                c.yellow_mask(),
                c.red_mask(),
                c.fault_mode()
            )
        }),
        _ => format!("err unknown command {line:?} (try `fault silent|reject|normal` or `status`)"),
    }
}

fn serve_control(shared: &Shared, listener: &TcpListener) {
    while !shared.shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                if let Err(e) = handle_control_conn(shared, stream) {
                    debug!("control connection: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL_SLICE),
            Err(e) => {
                warn!("control accept: {e}");
                thread::sleep(POLL_SLICE);
            }
        }
    }
}

fn handle_control_conn(shared: &Shared, stream: TcpStream) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = control_command(shared, line.trim());
        writeln!(writer, "{reply}")?;
    }
    Ok(())
}

/// Sends one line to a control socket and returns the reply line.
pub fn send_control_line(addr: SocketAddr, line: &str, timeout: Duration) -> io::Result<String> {
    let stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    let mut writer = stream.try_clone()?;
    writeln!(writer, "{line}")?;
    writer.flush()?;
    let mut reply = String::new();
    BufReader::new(stream).read_line(&mut reply)?;
    writer.shutdown(std::net::Shutdown::Both).ok();
    Ok(reply.trim_end().to_string())
}
