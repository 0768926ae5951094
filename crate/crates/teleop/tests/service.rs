use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::Command as Process;
use std::time::{Duration, Instant};

use echo_core::types::SensitivityMode;
use echo_teleop::service::{self, ServiceConfig, ServiceError, ServiceHandle};
use echo_teleop::transport::{TransportSpec, DEFAULT_BAUD};
use serde_json::{json, Value};

fn start(dataset: Option<&Path>) -> ServiceHandle {
    let mut cfg = ServiceConfig::new(TransportSpec::parse("sim", DEFAULT_BAUD).unwrap());
    cfg.bind = "127.0.0.1:0".parse().unwrap();
    cfg.dataset = dataset.map(Path::to_path_buf);
    service::start(cfg).expect("service starts")
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(h: &ServiceHandle) -> Client {
        let s = TcpStream::connect(h.addr()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        Client {
            writer: s.try_clone().unwrap(),
            reader: BufReader::new(s),
        }
    }

    fn next(&mut self) -> Value {
        let mut line = String::new();
        self.reader.read_line(&mut line).expect("line before timeout");
        assert!(line.ends_with('\n'), "connection closed");
        serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"))
    }

    fn send_raw(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    /// Send a command and return its ack, collecting the events seen meanwhile.
    fn call(&mut self, id: u64, mut cmd: Value, events: &mut Vec<Value>) -> Value {
        cmd["type"] = json!("cmd");
        cmd["id"] = json!(id);
        self.send_raw(&cmd.to_string());
        loop {
            let v = self.next();
            match v["type"].as_str() {
                Some("ack") if v["id"] == json!(id) => return v,
                Some("event") => events.push(v),
                _ => {}
            }
        }
    }

    fn wait_telemetry(&mut self, pred: impl Fn(&Value) -> bool) -> Value {
        let deadline = Instant::now() + Duration::from_secs(5);
        while Instant::now() < deadline {
            let v = self.next();
            if v["type"] == "telemetry" && pred(&v) {
                return v;
            }
        }
        panic!("no matching telemetry within 5 s");
    }
}

#[test]
fn telemetry_streams_at_the_loop_rate_in_order() {
    let h = start(None);
    let mut c = Client::connect(&h);
    let t0 = Instant::now();
    let mut last_t = 0;
    let mut n = 0;
    while t0.elapsed() < Duration::from_secs(2) {
        let v = c.next();
        if v["type"] != "telemetry" {
            continue;
        }
        let t = v["t"].as_u64().unwrap();
        assert!(t > last_t, "telemetry out of order");
        last_t = t;
        assert_eq!(v["leader_q"].as_array().unwrap().len(), 6);
        assert_eq!(v["ee_quat"].as_array().unwrap().len(), 4);
        let q: Vec<f64> = v["ee_quat"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!((q.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        n += 1;
    }
    // 100 Hz nominal over 2 s
    assert!(n >= 100, "only {n} telemetry lines in 2 s");
    h.shutdown();
}

#[test]
fn subscribers_see_the_same_sequence() {
    let h = start(None);
    let mut a = Client::connect(&h);
    let mut b = Client::connect(&h);
    let collect = |c: &mut Client| {
        let mut out = Vec::new();
        while out.len() < 100 {
            let v = c.next();
            if v["type"] == "telemetry" {
                out.push(v);
            }
        }
        out
    };
    let sa = collect(&mut a);
    let sb = collect(&mut b);
    // the second client may have joined a few ticks later; align on the first common tick
    let start = sb[0]["t"].clone();
    let offset = sa.iter().position(|v| v["t"] == start).expect("overlap");
    for (x, y) in sa[offset..].iter().zip(&sb) {
        assert_eq!(x, y);
    }
    h.shutdown();
}

#[test]
fn mode_commands_and_errors() {
    let h = start(None);
    let mut c = Client::connect(&h);
    let mut events = Vec::new();

    let ack = c.call(1, json!({"name": "set_mode", "mode": 2}), &mut events);
    assert_eq!(ack["ok"], true, "{ack}");
    assert_eq!(ack["state"]["mode"], 2);
    c.wait_telemetry(|v| v["mode"] == 2);

    let ack = c.call(2, json!({"name": "set_mode", "mode": 3}), &mut events);
    assert_eq!(ack["ok"], false);
    assert_eq!(ack["error"], "InvalidMode");

    let ack = c.call(3, json!({"name": "cycle_mode"}), &mut events);
    assert_eq!(ack["state"]["mode"], 4);

    let ack = c.call(4, json!({"name": "set_force_feedback", "enabled": false}), &mut events);
    assert_eq!(ack["state"]["ff_enabled"], false);
    c.wait_telemetry(|v| v["ff_enabled"] == false && v["duty"] == 0);

    assert_eq!(c.call(5, json!({"name": "teleport"}), &mut events)["error"], "UnknownCommand");
    assert_eq!(c.call(6, json!({"name": "set_mode"}), &mut events)["error"], "BadRequest");
    assert_eq!(c.call(7, json!({"name": "start_recording"}), &mut events)["error"], "NoDataset");
    assert_eq!(c.call(8, json!({"name": "list_episodes"}), &mut events)["error"], "NoDataset");
    assert_eq!(
        c.call(9, json!({"name": "run_scenario", "scenario": "moon"}), &mut events)["error"],
        "UnknownScenario"
    );

    c.send_raw("{not json");
    let v = loop {
        let v = c.next();
        if v["type"] == "ack" {
            break v;
        }
    };
    assert_eq!(v["error"], "BadRequest");
    assert_eq!(v["ok"], false);
    h.shutdown();
}

#[test]
fn recording_over_the_socket() {
    let dir = tempfile::tempdir().unwrap();
    let h = start(Some(dir.path()));
    let mut c = Client::connect(&h);
    let mut events = Vec::new();

    let ack = c.call(1, json!({"name": "start_recording"}), &mut events);
    assert_eq!(ack["ok"], true, "{ack}");
    assert_eq!(ack["state"]["recording"], true);
    let id = ack["state"]["episode"].as_u64().unwrap();
    let again = c.call(2, json!({"name": "start_recording"}), &mut events);
    assert_eq!(again["error"], "AlreadyRecording");

    std::thread::sleep(Duration::from_millis(300));
    let ack = c.call(3, json!({"name": "stop_recording"}), &mut events);
    assert_eq!(ack["state"]["recording"], false);
    assert_eq!(c.call(4, json!({"name": "stop_recording"}), &mut events)["error"], "NotRecording");

    let deadline = Instant::now() + Duration::from_secs(5);
    while !events.iter().any(|e| e["event"] == "recording_stopped") && Instant::now() < deadline {
        let v = c.next();
        if v["type"] == "event" {
            events.push(v);
        }
    }
    assert!(events.iter().any(|e| e["event"] == "recording_started" && e["episode"] == id));
    let stopped = events.iter().find(|e| e["event"] == "recording_stopped").expect("stop event");
    let samples = stopped["episode"]["samples"].as_u64().unwrap();
    assert!(samples >= 10, "{stopped}");
    assert_eq!(stopped["episode"]["status"], "completed");

    let list = c.call(5, json!({"name": "list_episodes"}), &mut events);
    let eps = list["episodes"].as_array().unwrap();
    assert_eq!(eps.len(), 1);
    assert_eq!(eps[0]["id"], id);

    // the threaded writer flushes before the manifest line is written
    let rows = echo_core::recorder::load_episode(&dir.path().join(echo_core::recorder::episode_file_name(id))).unwrap();
    assert_eq!(rows.len() as u64, samples);
    h.shutdown();
}

#[test]
fn scenario_runs_and_shutdown_over_the_socket() {
    let h = start(None);
    let mut c = Client::connect(&h);
    let mut events = Vec::new();
    let ack = c.call(1, json!({"name": "run_scenario", "scenario": "egg", "seed": 4}), &mut events);
    let runs = ack["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0]["ff"], true);
    assert_eq!(runs[0]["broken"], false);
    assert_eq!(runs[1]["broken"], true);

    let ack = c.call(2, json!({"name": "shutdown"}), &mut events);
    assert_eq!(ack["ok"], true);
    let deadline = Instant::now() + Duration::from_secs(5);
    while h.is_running() {
        assert!(Instant::now() < deadline, "service still running");
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn initial_settings_are_reported() {
    let mut cfg = ServiceConfig::new(TransportSpec::parse("sim:demo", DEFAULT_BAUD).unwrap());
    cfg.bind = "127.0.0.1:0".parse().unwrap();
    cfg.initial_mode = SensitivityMode::from_divisor(4).unwrap();
    cfg.ff_enabled = false;
    let h = service::start(cfg).unwrap();
    let mut c = Client::connect(&h);
    let v = c.wait_telemetry(|_| true);
    assert_eq!(v["mode"], 4);
    assert_eq!(v["ff_enabled"], false);
    h.shutdown();
}

#[test]
fn unavailable_transport_is_a_startup_error() {
    let mut cfg = ServiceConfig::new(TransportSpec::parse("/dev/echo-missing", DEFAULT_BAUD).unwrap());
    cfg.bind = "127.0.0.1:0".parse().unwrap();
    assert!(matches!(service::start(cfg.clone()), Err(ServiceError::CalibrationMissing(_))));

    let dir = tempfile::tempdir().unwrap();
    let cal = dir.path().join("cal.toml");
    echo_core::sensing::Calibration::default().save(&cal).unwrap();
    cfg.calibration = Some(cal);
    match service::start(cfg) {
        Err(ServiceError::TransportUnavailable { name, .. }) => assert!(name.contains("echo-missing")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("opened a missing port"),
    }

    let cfg = ServiceConfig {
        rate_hz: 5.0,
        ..ServiceConfig::new(TransportSpec::parse("sim", DEFAULT_BAUD).unwrap())
    };
    assert!(matches!(service::start(cfg), Err(ServiceError::InvalidConfig(_))));
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_echo-teleop"))
}

#[test]
fn cli_exit_codes() {
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["--version"]), Some(0));
    assert_eq!(code(&["simulate", "--scenario", "egg"]), Some(2));
    assert_eq!(code(&["teleop", "--rate", "fast"]), Some(2));
    assert_eq!(code(&["teleop", "--transport", "/dev/echo-missing"]), Some(1));
    assert_eq!(code(&["dataset", "inspect", "/nonexistent/echo"]), Some(1));
}

#[test]
fn cli_record_replay_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = bin().args(["record", "--out", d, "--seed", "5", "--duration", "2"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ep = dir.path().join("episode_1.csv");
    let out = bin().arg("replay").arg(&ep).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = bin().args(["dataset", "inspect", d]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("1 episodes\n"), "{text}");
    assert!(text.contains("completed"));

    // a follower with different dynamics is refused
    let cfg = dir.path().join("other.toml");
    std::fs::write(&cfg, "tau = 0.2\n").unwrap();
    let out = bin().arg("replay").arg(&ep).arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_simulate_is_deterministic() {
    let run = || {
        bin()
            .args(["simulate", "--scenario", "egg", "--ff", "on", "--seed", "11", "--json"])
            .output()
            .unwrap()
            .stdout
    };
    let a = run();
    assert_eq!(a, run());
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["broken"], false);
}

#[test]
fn cli_calibrate_sim_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cal.toml");
    let run = bin().args(["calibrate", "--out"]).arg(&out).output().unwrap();
    assert!(run.status.success());
    let cal = echo_core::sensing::Calibration::load(&out).unwrap();
    cal.validate().unwrap();
}
