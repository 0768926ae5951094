//! The teleoperation daemon.
//!
//! One control thread owns the session and the device link and ticks at a fixed
//! rate. Clients connect over TCP and exchange line-delimited JSON: telemetry and
//! events flow out, commands flow in and are answered with an ack. Commands reach
//! the control thread through a queue and are applied between ticks; telemetry
//! goes out through per-client bounded queues that drop snapshots rather than
//! block the loop. See `docs/service.md` for the wire schema.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use echo_core::control::FeedbackGains;
use echo_core::kinematics::DhTable;
use echo_core::recorder::{read_manifest, EpisodeManifest, Recorder, RecorderError, ThreadedRecorder};
use echo_core::sensing::{Calibration, CalibrationError};
use echo_core::session::{CommandError, ControlEvent, Session, SessionConfig, SessionEvent};
use echo_core::sim::{run_egg_scenario, Hardware, Lockstep, ScenarioConfig, ScenarioKind};
use echo_core::types::SensitivityMode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::transport::{open_hardware, TransportSpec};

pub const DEFAULT_PORT: u16 = 7420;
pub const DATASET_ENV: &str = "ECHO_DATASET_ROOT";
/// Telemetry lines buffered per client before snapshots are dropped.
const CLIENT_QUEUE: usize = 256;
const RECORDER_QUEUE: usize = 4096;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub transport: TransportSpec,
    /// Required for serial links; the simulator defaults to the built-in calibration.
    pub calibration: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub rate_hz: f64,
    pub gains: FeedbackGains,
    pub initial_mode: SensitivityMode,
    pub ff_enabled: bool,
    /// Simulator and follower-model parameters.
    pub scenario: ScenarioConfig,
    pub dh: DhTable,
    pub bind: SocketAddr,
}

impl ServiceConfig {
    pub fn new(transport: TransportSpec) -> ServiceConfig {
        ServiceConfig {
            transport,
            calibration: None,
            dataset: None,
            rate_hz: 100.0,
            gains: FeedbackGains::default(),
            initial_mode: SensitivityMode::Standard,
            ff_enabled: true,
            scenario: ScenarioConfig::default(),
            dh: DhTable::ur3(),
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(10.0..=1000.0).contains(&self.rate_hz) {
            return Err(ServiceError::InvalidConfig(format!(
                "loop rate must be within 10..=1000 Hz, got {}",
                self.rate_hz
            )));
        }
        self.gains.validate().map_err(ServiceError::InvalidConfig)?;
        self.scenario
            .validate()
            .map_err(|e| ServiceError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("transport {name} unavailable: {source}")]
    TransportUnavailable { name: String, source: io::Error },
    #[error("calibration file required for {0} (pass --calibration; run `calibrate` to create one)")]
    CalibrationMissing(String),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error("dataset: {0}")]
    Dataset(#[from] RecorderError),
    #[error("cannot listen: {0}")]
    Bind(io::Error),
}

/// Commands accepted from clients, tagged by `name`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Command {
    StartRecording,
    StopRecording,
    ToggleRecording,
    SetMode { mode: u8 },
    CycleMode,
    SetForceFeedback { enabled: bool },
    RunScenario {
        scenario: String,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        ff: Option<bool>,
    },
    ListEpisodes,
    Status,
    Shutdown,
}

/// Session state reported in every successful ack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateSummary {
    pub mode: u8,
    pub recording: bool,
    pub episode: Option<u64>,
    pub ff_enabled: bool,
}

impl StateSummary {
    fn of(session: &Session) -> StateSummary {
        StateSummary {
            mode: session.mode().divisor(),
            recording: session.recording(),
            episode: session.episode(),
            ff_enabled: session.ff_enabled(),
        }
    }
}

/// An error ack: a stable code plus a human-readable message.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandFailure {
    pub code: &'static str,
    pub message: String,
}

impl CommandFailure {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        CommandFailure {
            code,
            message: message.into(),
        }
    }
}

impl From<CommandError> for CommandFailure {
    fn from(e: CommandError) -> Self {
        let code = match e {
            CommandError::AlreadyRecording => "AlreadyRecording",
            CommandError::NotRecording => "NotRecording",
            CommandError::NoDataset => "NoDataset",
            CommandError::Storage(_) => "StorageFailure",
        };
        CommandFailure::new(code, e.to_string())
    }
}

struct Request {
    event: Option<ControlEvent>,
    reply: SyncSender<Result<StateSummary, CommandError>>,
}

type Line = Arc<str>;

/// Fan-out of outbound lines to every connected client.
#[derive(Default)]
struct Hub {
    clients: Mutex<Vec<Client>>,
}

struct Client {
    lines: SyncSender<Line>,
    stream: TcpStream,
}

impl Hub {
    /// Never blocks: a client whose queue is full misses this line.
    fn publish(&self, line: Line) {
        let mut clients = self.clients.lock().expect("hub lock");
        clients.retain(|c| !matches!(c.lines.try_send(line.clone()), Err(TrySendError::Disconnected(_))));
    }

    fn close_all(&self) {
        for c in self.clients.lock().expect("hub lock").drain(..) {
            let _ = c.stream.shutdown(Shutdown::Both);
        }
    }
}

struct Shared {
    requests: Mutex<mpsc::Sender<Request>>,
    hub: Hub,
    stop: AtomicBool,
    dataset: Option<PathBuf>,
    scenario: ScenarioConfig,
}

pub struct ServiceHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_running(&self) -> bool {
        !self.shared.stop.load(Ordering::SeqCst)
    }

    /// Stop the loop, close any open episode and disconnect clients.
    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    /// Block until a client sends `shutdown` or `limit` elapses.
    pub fn wait(mut self, limit: Option<Duration>) {
        let start = Instant::now();
        while self.is_running() && limit.is_none_or(|l| start.elapsed() < l) {
            thread::sleep(Duration::from_millis(20));
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    fn join(&mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.shared.hub.close_all();
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.join();
    }
}

/// Open the link and the dataset, bind the endpoint and start the loop.
pub fn start(cfg: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    cfg.validate()?;
    let calibration = match (&cfg.calibration, &cfg.transport) {
        (Some(path), _) => Calibration::load(path)?,
        (None, TransportSpec::Sim(_)) => Calibration::default(),
        (None, t) => return Err(ServiceError::CalibrationMissing(t.to_string())),
    };
    let mut scenario = cfg.scenario.clone();
    scenario.dt_us = (1e6 / cfg.rate_hz).round() as u64;
    scenario.k_f = cfg.gains.k_f;
    scenario.duty_max = cfg.gains.duty_max;
    scenario.deadband = cfg.gains.deadband;

    let hardware = open_hardware(&cfg.transport, &scenario, &calibration).map_err(|source| {
        ServiceError::TransportUnavailable {
            name: cfg.transport.to_string(),
            source,
        }
    })?;
    let mut session = Session::new(SessionConfig {
        calibration,
        limits: scenario.limits(),
        dh: cfg.dh,
        gains: cfg.gains,
        initial_mode: cfg.initial_mode,
        ff_enabled: cfg.ff_enabled,
        config_hash: scenario.hash(),
    });
    if let Some(dir) = &cfg.dataset {
        let recorder = Recorder::open(dir)?;
        session = session.with_sink(Box::new(ThreadedRecorder::spawn(recorder, RECORDER_QUEUE)));
    }

    let listener = TcpListener::bind(cfg.bind).map_err(ServiceError::Bind)?;
    let addr = listener.local_addr().map_err(ServiceError::Bind)?;
    listener.set_nonblocking(true).map_err(ServiceError::Bind)?;

    let (req_tx, req_rx) = mpsc::channel();
    let shared = Arc::new(Shared {
        requests: Mutex::new(req_tx),
        hub: Hub::default(),
        stop: AtomicBool::new(false),
        dataset: cfg.dataset.clone(),
        scenario: scenario.clone(),
    });
    let period = Duration::from_micros(scenario.dt_us);
    let lockstep = Lockstep::new(hardware, session, scenario.dt_us);
    let control = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("echo-control".into())
            .spawn(move || control_loop(lockstep, req_rx, &shared, period))
            .expect("spawn control thread")
    };
    let accept = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("echo-accept".into())
            .spawn(move || accept_loop(listener, shared))
            .expect("spawn accept thread")
    };
    log::info!("serving {} on {addr} at {} Hz", cfg.transport, cfg.rate_hz);
    Ok(ServiceHandle {
        addr,
        shared,
        threads: vec![control, accept],
    })
}

fn control_loop(
    mut sim: Lockstep<Box<dyn Hardware>>,
    requests: Receiver<Request>,
    shared: &Shared,
    period: Duration,
) {
    let mut next = Instant::now();
    let mut quiet_ticks = 0u32;
    while !shared.stop.load(Ordering::SeqCst) {
        let t_us = sim.t_us();
        while let Ok(req) = requests.try_recv() {
            let result = match req.event {
                Some(event) => sim.session.apply(event, t_us),
                None => Ok(()),
            };
            let _ = req.reply.send(result.map(|_| StateSummary::of(&sim.session)));
        }
        let frames_before = sim.session.link_stats().frames;
        match sim.step() {
            Ok(Some(out)) => {
                for event in &out.events {
                    shared.hub.publish(event_line(event));
                }
                let line = serde_json::to_string(&TelemetryLine {
                    kind: "telemetry",
                    telemetry: &out.telemetry,
                })
                .expect("telemetry serializes");
                shared.hub.publish(line.into());
            }
            Ok(None) => {}
            Err(e) => {
                log::error!("device link failed: {e}");
                break;
            }
        }
        // a partial frame that sits for 5 ticks is abandoned
        if sim.session.link_stats().frames == frames_before {
            quiet_ticks += 1;
            if quiet_ticks == 5 {
                sim.session.flush_link(t_us);
            }
        } else {
            quiet_ticks = 0;
        }
        next += period;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    }
    if let Some(m) = sim.session.close(sim.t_us()) {
        shared.hub.publish(event_line(&SessionEvent::RecordingStopped(m)));
    }
    shared.stop.store(true, Ordering::SeqCst);
}

#[derive(Serialize)]
struct TelemetryLine<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    telemetry: &'a echo_core::session::Telemetry,
}

fn manifest_json(m: &EpisodeManifest) -> Value {
    json!({
        "id": m.id,
        "start_unix_ms": m.start_unix_ms,
        "samples": m.samples,
        "duration_us": m.duration_us,
        "status": m.status.as_str(),
        "config_hash": m.config_hash,
        "dropped": m.dropped,
    })
}

fn event_line(event: &SessionEvent) -> Line {
    let v = match event {
        SessionEvent::ModeChanged(m) => json!({"type": "event", "event": "mode_changed", "mode": m.divisor()}),
        SessionEvent::ForceFeedback(on) => {
            json!({"type": "event", "event": "force_feedback", "enabled": on})
        }
        SessionEvent::RecordingStarted(id) => {
            json!({"type": "event", "event": "recording_started", "episode": id})
        }
        SessionEvent::RecordingStopped(m) => {
            json!({"type": "event", "event": "recording_stopped", "episode": manifest_json(m)})
        }
        SessionEvent::RecordingFailed(msg) => {
            json!({"type": "event", "event": "recording_failed", "message": msg})
        }
    };
    v.to_string().into()
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client {peer} connected");
                if let Err(e) = add_client(stream, shared.clone()) {
                    log::warn!("client {peer}: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn add_client(stream: TcpStream, shared: Arc<Shared>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::sync_channel::<Line>(CLIENT_QUEUE);
    let mut out = stream.try_clone()?;
    thread::spawn(move || {
        for line in rx {
            if out.write_all(line.as_bytes()).and_then(|_| out.write_all(b"\n")).is_err() {
                break;
            }
        }
    });
    let reader = stream.try_clone()?;
    shared.hub.clients.lock().expect("hub lock").push(Client {
        lines: tx.clone(),
        stream,
    });
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let ack = handle_line(&line, &shared);
            // acks are never dropped; this waits for the writer if needed
            if tx.send(ack.to_string().into()).is_err() {
                break;
            }
        }
    });
    Ok(())
}

/// Parse one client line and produce its ack.
fn handle_line(line: &str, shared: &Shared) -> Value {
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return failure(Value::Null, Value::Null, CommandFailure::new("BadRequest", e.to_string())),
    };
    let id = value.get("id").cloned().unwrap_or(Value::Null);
    let name = value.get("name").cloned().unwrap_or(Value::Null);
    if value.get("type").and_then(Value::as_str) != Some("cmd") {
        return failure(id, name, CommandFailure::new("BadRequest", "expected a \"cmd\" message"));
    }
    let command: Command = match serde_json::from_value(value) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.to_string().contains("unknown variant") {
                "UnknownCommand"
            } else {
                "BadRequest"
            };
            return failure(id, name, CommandFailure::new(code, e.to_string()));
        }
    };
    match execute(&command, shared) {
        Ok(mut body) => {
            body["type"] = json!("ack");
            body["ok"] = json!(true);
            body["id"] = id;
            body["name"] = name;
            body
        }
        Err(f) => failure(id, name, f),
    }
}

fn failure(id: Value, name: Value, f: CommandFailure) -> Value {
    json!({"type": "ack", "ok": false, "id": id, "name": name, "error": f.code, "message": f.message})
}

fn send_event(shared: &Shared, event: Option<ControlEvent>) -> Result<StateSummary, CommandFailure> {
    let (tx, rx) = mpsc::sync_channel(1);
    let stopped = || CommandFailure::new("ShuttingDown", "control loop is not running");
    shared
        .requests
        .lock()
        .expect("request lock")
        .send(Request { event, reply: tx })
        .map_err(|_| stopped())?;
    rx.recv().map_err(|_| stopped())?.map_err(CommandFailure::from)
}

fn state(shared: &Shared, event: Option<ControlEvent>) -> Result<Value, CommandFailure> {
    Ok(json!({ "state": send_event(shared, event)? }))
}

fn execute(command: &Command, shared: &Shared) -> Result<Value, CommandFailure> {
    match command {
        Command::StartRecording => state(shared, Some(ControlEvent::StartRecording)),
        Command::StopRecording => state(shared, Some(ControlEvent::StopRecording)),
        Command::ToggleRecording => state(shared, Some(ControlEvent::RecordToggle)),
        Command::CycleMode => state(shared, Some(ControlEvent::SensitivityCycle)),
        Command::SetMode { mode } => {
            let mode = SensitivityMode::from_divisor(*mode)
                .ok_or_else(|| CommandFailure::new("InvalidMode", format!("mode must be 1, 2 or 4, got {mode}")))?;
            state(shared, Some(ControlEvent::SetMode(mode)))
        }
        Command::SetForceFeedback { enabled } => state(shared, Some(ControlEvent::SetForceFeedback(*enabled))),
        Command::Status => state(shared, None),
        Command::Shutdown => {
            let body = state(shared, None)?;
            shared.stop.store(true, Ordering::SeqCst);
            Ok(body)
        }
        Command::ListEpisodes => {
            let dir = shared
                .dataset
                .as_ref()
                .ok_or_else(|| CommandFailure::new("NoDataset", "no dataset directory configured"))?;
            let episodes = read_manifest(dir).map_err(|e| CommandFailure::new("StorageFailure", e.to_string()))?;
            Ok(json!({ "episodes": episodes.iter().map(manifest_json).collect::<Vec<_>>() }))
        }
        Command::RunScenario { scenario, seed, ff } => {
            if ScenarioKind::from_name(scenario) != Some(ScenarioKind::Egg) {
                return Err(CommandFailure::new(
                    "UnknownScenario",
                    format!("no headless scenario named {scenario:?} (available: egg)"),
                ));
            }
            let cfg = ScenarioConfig {
                seed: seed.unwrap_or(shared.scenario.seed),
                ..shared.scenario.clone()
            };
            let arms = match ff {
                Some(on) => vec![*on],
                None => vec![true, false],
            };
            let runs = arms
                .into_iter()
                .map(|on| {
                    let r = run_egg_scenario(&cfg, on)
                        .map_err(|e| CommandFailure::new("InvalidConfig", e.to_string()))?;
                    Ok(json!({
                        "ff": r.ff_enabled,
                        "peak_force": r.peak_force,
                        "broken": r.broken,
                        "duration_s": r.duration_s,
                    }))
                })
                .collect::<Result<Vec<_>, CommandFailure>>()?;
            Ok(json!({ "scenario": scenario, "seed": cfg.seed, "runs": runs }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_schema() {
        let parse = |s: &str| serde_json::from_str::<Command>(s);
        assert_eq!(
            parse(r#"{"type":"cmd","name":"start_recording","id":3}"#).unwrap(),
            Command::StartRecording
        );
        assert_eq!(
            parse(r#"{"type":"cmd","name":"set_mode","mode":4}"#).unwrap(),
            Command::SetMode { mode: 4 }
        );
        assert_eq!(
            parse(r#"{"type":"cmd","name":"run_scenario","scenario":"egg"}"#).unwrap(),
            Command::RunScenario {
                scenario: "egg".into(),
                seed: None,
                ff: None
            }
        );
        assert!(parse(r#"{"type":"cmd","name":"set_mode"}"#).is_err());
        assert!(parse(r#"{"type":"cmd","name":"fly"}"#).is_err());
    }

    #[test]
    fn rate_bounds() {
        let mut cfg = ServiceConfig::new(TransportSpec::Sim(ScenarioKind::Wave));
        cfg.rate_hz = 5.0;
        assert!(matches!(cfg.validate(), Err(ServiceError::InvalidConfig(_))));
        cfg.rate_hz = 1000.0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn serial_without_calibration_is_refused() {
        let cfg = ServiceConfig::new(TransportSpec::Serial {
            path: "/dev/null".into(),
            baud: 115_200,
        });
        assert!(matches!(start(cfg), Err(ServiceError::CalibrationMissing(_))));
    }
}
