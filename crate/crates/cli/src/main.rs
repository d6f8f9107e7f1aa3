// SPDX-License-Identifier: Apache-2.0

//! `phasebridge`: virtual controller, closed-loop runs, reports and manual
//! recovery from one binary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use phasebridge::clock::{Clock, MonotonicClock};
use phasebridge::config::TestbedConfig;
use phasebridge::controller::{send_control_line, ControllerEvent, ControllerServer, FaultMode, SignalController};
use phasebridge::harness::{run_realtime, run_virtual, AgentKind, ClockMode, RunMetrics, RunOptions, VirtualTestbed};
use phasebridge::journal::Journal;
use phasebridge::middleware::{EventLog, EventRecord, Middleware};
use phasebridge::report::{parse_events, Report};

const EXIT_TIMEOUT: u8 = 2;
const EXIT_CONFIG: u8 = 3;

const DEFAULT_PORT: u16 = 5601;
const DEFAULT_MW_CONTROL_PORT: u16 = 5603;

#[derive(Parser)]
#[command(name = "phasebridge", version, about = "Signal-controller middleware testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the virtual signal controller over UDP.
    Controller(ControllerArgs),
    /// Run a closed-loop experiment and write its logs.
    Run(RunArgs),
    /// Latency table and per-command trajectories from an events log.
    Report(ReportArgs),
    /// Ask a running middleware to leave TIMEOUT.
    Recover(RecoverArgs),
}

#[derive(Args)]
struct ControllerArgs {
    /// Testbed configuration; the bundled 8-phase intersection if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// TCP port for `fault MODE` and `status` lines; defaults to port + 1,
    /// or a free port when --port is 0.
    #[arg(long)]
    control_port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    /// Start in this fault mode: normal, silent or reject.
    #[arg(long, default_value = "normal")]
    fault: FaultMode,
    /// Write controller events to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stop after this many seconds instead of serving until killed.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// selection, switch, duration or fixed.
    #[arg(long, default_value = "switch")]
    agent: AgentKind,
    /// Simulated seconds; overrides the configuration.
    #[arg(long, allow_hyphen_values = true)]
    duration: Option<f64>,
    /// real or virtual; overrides the configuration.
    #[arg(long)]
    clock: Option<ClockMode>,
    /// Traffic seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Fault mode of the in-process controller (virtual or --embedded runs).
    #[arg(long)]
    fault: Option<FaultMode>,
    /// Real-time runs: start the controller in-process instead of
    /// connecting to one.
    #[arg(long)]
    embedded: bool,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Controller UDP port. With --embedded, 0 picks a free port.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Real-time runs: TCP port of the middleware control socket.
    #[arg(long, default_value_t = DEFAULT_MW_CONTROL_PORT)]
    control_port: u16,
    /// Real-time runs: seconds to wait for a manual recovery after TIMEOUT.
    #[arg(long, default_value_t = 0.0)]
    recovery_wait: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// events.jsonl from a run.
    events: PathBuf,
    /// Directory for trajectory.json; defaults to the events file's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Middleware control port.
    #[arg(long, default_value_t = DEFAULT_MW_CONTROL_PORT)]
    port: u16,
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
struct ConfigFailure(anyhow::Error);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    ConfigFailure(e.into()).into()
}

/// Configuration errors already carry their cause in the message.
fn flat_config_err(e: impl std::fmt::Display) -> anyhow::Error {
    config_err(anyhow::anyhow!("{e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PHASEBRIDGE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let result = match cli.command {
        Command::Controller(a) => cmd_controller(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Recover(a) => cmd_recover(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.is::<ConfigFailure>() => {
            eprintln!("phasebridge: configuration error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("phasebridge: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TestbedConfig> {
    match path {
        Some(p) => TestbedConfig::load(p).map_err(flat_config_err),
        None => Ok(TestbedConfig::standard()),
    }
}

fn log_file(path: &Path) -> Result<Box<dyn Write + Send>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn cmd_controller(a: ControllerArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let topo = Arc::new(cfg.intersection);
    let log: Journal<ControllerEvent> = match &a.log {
        Some(p) => Journal::to_writer(log_file(p)?, false),
        None => Journal::in_memory(),
    };
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
    let mut controller = SignalController::new(Arc::clone(&topo), clock.now());
    controller.set_fault(a.fault);
    let control_port = a
        .control_port
        .unwrap_or(if a.port == 0 { 0 } else { a.port.saturating_add(1) });
    let server = ControllerServer::spawn(
        controller,
        clock,
        SocketAddr::new(a.bind, a.port),
        Some(SocketAddr::new(a.bind, control_port)),
        log,
    )
    .with_context(|| format!("binding controller on {}:{}", a.bind, a.port))?;
    let greens = server.inspect(|c| c.green_mask().phases().map(|p| p.to_string()).collect::<Vec<_>>());
    println!(
        "controller listening on {} (control {}), greens [{}], fault {}",
        server.local_addr(),
        server.control_addr().map_or("-".into(), |c| c.to_string()),
        greens.join(","),
        a.fault
    );
    match a.duration {
        Some(s) if s.is_finite() && s >= 0.0 => thread::sleep(Duration::from_secs_f64(s)),
        Some(s) => return Err(config_err(anyhow::anyhow!("--duration must be non-negative, got {s}"))),
        None => loop {
            thread::park();
        },
    }
    server.log().flush();
    server.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn resolve(host: &str, port: u16) -> Result<SocketAddr> {
    (host, port)
        .to_socket_addrs()
        .with_context(|| format!("resolving {host}:{port}"))?
        .next()
        .with_context(|| format!("{host}:{port} resolves to no address"))
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.duration {
        cfg.scenario.duration = d;
    }
    if let Some(c) = a.clock {
        cfg.scenario.clock_mode = c;
    }
    if let Some(s) = a.seed {
        cfg.scenario.rng_seed = s;
    }
    cfg.scenario.validate().map_err(flat_config_err)?;
    if !(a.recovery_wait.is_finite() && a.recovery_wait >= 0.0) {
        return Err(config_err(anyhow::anyhow!("--recovery-wait must be non-negative")));
    }
    fs::create_dir_all(&a.out)
        .with_context(|| format!("output directory {} is not writable", a.out.display()))
        .map_err(config_err)?;

    let topo = Arc::new(cfg.intersection.clone());
    let events: Journal<EventRecord> = Journal::to_writer(log_file(&a.out.join("events.jsonl"))?, false);
    let metrics = match cfg.scenario.clock_mode {
        ClockMode::Virtual => {
            if a.embedded {
                log::info!("virtual runs always use an in-process controller; --embedded has no effect");
            }
            let ctrl_log: Journal<ControllerEvent> =
                Journal::to_writer(log_file(&a.out.join("controller.jsonl"))?, false);
            let mut bed =
                VirtualTestbed::with_journals(Arc::clone(&topo), cfg.middleware.clone(), events, ctrl_log.clone());
            if let Some(f) = a.fault {
                bed.set_fault(f);
            }
            let (m, _) = run_virtual(&topo, &cfg.scenario, a.agent, &mut bed, RunOptions::default());
            bed.event_log().journal().flush();
            ctrl_log.flush();
            m
        }
        ClockMode::RealTime => run_real(&a, &cfg, topo, events)?,
    };

    let path = a.out.join("metrics.json");
    let mut f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, &metrics)?;
    writeln!(f)?;
    f.flush()?;
    summarize(&metrics, &a.out);
    Ok(match metrics.timed_out {
        Some(_) => ExitCode::from(EXIT_TIMEOUT),
        None => ExitCode::SUCCESS,
    })
}

fn run_real(
    a: &RunArgs,
    cfg: &TestbedConfig,
    topo: Arc<phasebridge::model::RingBarrierConfig>,
    events: Journal<EventRecord>,
) -> Result<RunMetrics> {
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
    let mut embedded = None;
    let controller_addr = if a.embedded {
        let ctrl_log: Journal<ControllerEvent> = Journal::to_writer(log_file(&a.out.join("controller.jsonl"))?, false);
        let mut c = SignalController::new(Arc::clone(&topo), clock.now());
        if let Some(f) = a.fault {
            c.set_fault(f);
        }
        let server = ControllerServer::spawn(c, Arc::clone(&clock), resolve(&a.host, a.port)?, None, ctrl_log)
            .context("starting the embedded controller")?;
        let addr = server.local_addr();
        log::info!("embedded controller on {addr}");
        embedded = Some(server);
        addr
    } else {
        if a.fault.is_some() {
            bail!("--fault applies to an in-process controller; use the controller's control port instead");
        }
        log::info!("controller log stays with the controller process; no controller.jsonl written");
        resolve(&a.host, a.port)?
    };

    let mut mw = Middleware::start(
        topo.clone(),
        cfg.middleware.clone(),
        controller_addr,
        EventLog::new(events, clock),
    )
    .context("starting the middleware")?;
    let ctl = mw
        .serve_control(resolve(&a.host, a.control_port)?)
        .with_context(|| format!("binding the middleware control port {}", a.control_port))?;
    log::info!("middleware control socket on {ctl}");
    let opts = RunOptions {
        recovery_wait: Duration::from_secs_f64(a.recovery_wait),
        ..Default::default()
    };
    let (m, _) = run_realtime(&topo, &cfg.scenario, a.agent, &mut mw, opts);
    mw.shutdown();
    if let Some(server) = embedded {
        server.log().flush();
        server.shutdown();
    }
    Ok(m)
}

fn summarize(m: &RunMetrics, out: &Path) {
    println!(
        "{} agent, {} clock: {} steps, {:.1} s simulated, {} invocations, {} dispatched, {} dropped",
        m.agent, m.clock_mode, m.steps, m.sim_time_s, m.agent_invocations, m.outcomes.dispatched, m.outcomes.dropped
    );
    println!(
        "departures {:.2}, mean queue {:.3}, final queue {:.2}",
        m.total_departures, m.mean_queue, m.final_queue
    );
    if let Some(cause) = m.timed_out {
        println!("run ended in TIMEOUT ({cause})");
    }
    println!("logs in {}", out.display());
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let f = File::open(&a.events).with_context(|| format!("opening {}", a.events.display()))?;
    let parsed = parse_events(BufReader::new(f)).with_context(|| format!("reading {}", a.events.display()))?;
    let report = Report::from_log(&parsed);
    print!("{}", report.render());
    let dir = match a.out {
        Some(d) => d,
        None => a.events.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("trajectory.json");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, &report.trajectories)?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "\n{} command trajectories written to {}",
        report.trajectories.len(),
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_recover(a: RecoverArgs) -> Result<ExitCode> {
    let addr = resolve(&a.host, a.port)?;
    let reply = send_control_line(addr, "recover", Duration::from_secs(10))
        .with_context(|| format!("no middleware control socket at {addr}"))?;
    match reply.strip_prefix("ok ") {
        Some(rest) => {
            println!("{rest}");
            Ok(ExitCode::SUCCESS)
        }
        None => {
            println!("{}", reply.strip_prefix("err ").unwrap_or(&reply));
            Ok(ExitCode::FAILURE)
        }
    }
}
