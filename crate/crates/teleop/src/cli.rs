//! `echo-teleop` subcommands. Exit codes: 0 success, 1 failure, 2 usage error.

use std::ffi::OsString;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use echo_core::calibrate::{calibrate_simulated, CalibrationWizard};
use echo_core::control::FeedbackGains;
use echo_core::kinematics::DhTable;
use echo_core::protocol::{FrameParser, Message};
use echo_core::recorder::{episode_file_name, load_episode, read_manifest, replay};
use echo_core::sensing::{default_pot_scale, Calibration};
use echo_core::sim::{record_demo, run_egg_scenario, Hardware, ScenarioConfig};
use echo_core::types::{Buttons, MasterState, SensitivityMode};

use crate::inspect;
use crate::service::{self, ServiceConfig, DATASET_ENV, DEFAULT_PORT};
use crate::transport::{SerialHardware, TransportSpec, DEFAULT_BAUD};

#[derive(Parser, Debug)]
#[command(name = "echo-teleop", version, about = "Host tools for the Echo leader-follower teleoperation rig")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Capture zero posture, joint endpoints and trigger range into a calibration file
    Calibrate(CalibrateArgs),
    /// Run the teleoperation daemon
    Teleop(TeleopArgs),
    /// Run a headless scenario and print its report
    Simulate(SimulateArgs),
    /// Record a scripted demo session in the simulator
    Record(RecordArgs),
    /// Re-run an episode's commands through the follower model and compare
    Replay(ReplayArgs),
    /// Dataset utilities
    #[command(subcommand)]
    Dataset(DatasetCmd),
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Summarize the episodes in a session directory
    Inspect { dir: PathBuf },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn on(self) -> bool {
        self == OnOff::On
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Scenario {
    Egg,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// `sim` or a serial device path
    #[arg(long, default_value = "sim")]
    transport: String,
    #[arg(long, default_value_t = DEFAULT_BAUD)]
    baud: u32,
    #[arg(long, short, default_value = "echo-calibration.toml")]
    out: PathBuf,
    /// Joint reports averaged per step (serial only)
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Simulated ADC noise, counts
    #[arg(long, default_value_t = 2)]
    noise: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TeleopArgs {
    /// Serial device path, `sim` or `sim:<egg|demo|wave>`
    #[arg(long, default_value = "sim")]
    transport: String,
    #[arg(long, default_value_t = DEFAULT_BAUD)]
    baud: u32,
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Session directory for recorded episodes
    #[arg(long, env = DATASET_ENV)]
    dataset: Option<PathBuf>,
    /// Control loop rate, Hz
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    /// Initial sensitivity divisor
    #[arg(long, default_value_t = 1, value_parser = parse_mode)]
    mode: u8,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    ff: OnOff,
    /// Simulator / follower-model settings (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Follower DH table
    #[arg(long)]
    dh: Option<PathBuf>,
    /// Stop after this many seconds
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long, value_enum)]
    ff: OnOff,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct RecordArgs {
    /// Session directory
    #[arg(long, env = DATASET_ENV)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Seconds between the record presses
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Path to an episode_<id>.csv file
    episode: PathBuf,
    /// Follower settings to replay against (defaults to the built-in ones)
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<u8, String> {
    let n: u8 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    SensitivityMode::from_divisor(n)
        .map(|m| m.divisor())
        .ok_or_else(|| format!("mode must be 1, 2 or 4, got {n}"))
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Cmd::Calibrate(a) => calibrate(a),
        Cmd::Teleop(a) => teleop(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Record(a) => record(a),
        Cmd::Replay(a) => replay_cmd(a),
        Cmd::Dataset(DatasetCmd::Inspect { dir }) => dataset_inspect(&dir),
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn scenario_config(path: Option<&Path>) -> Result<ScenarioConfig, String> {
    match path {
        Some(p) => ScenarioConfig::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn simulate(a: SimulateArgs) -> Result<(), String> {
    let mut cfg = scenario_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let Scenario::Egg = a.scenario;
    let r = run_egg_scenario(&cfg, a.ff.on()).map_err(|e| e.to_string())?;
    if a.json {
        println!(
            "{}",
            serde_json::json!({
                "scenario": "egg",
                "seed": r.seed,
                "ff": r.ff_enabled,
                "peak_force": r.peak_force,
                "broken": r.broken,
                "duration_s": r.duration_s,
            })
        );
    } else {
        println!(
            "scenario egg  seed {}  ff {}  peak_force {:.3} N  broken {}  duration {:.2} s",
            r.seed,
            if r.ff_enabled { "on" } else { "off" },
            r.peak_force,
            r.broken,
            r.duration_s
        );
    }
    Ok(())
}

fn record(a: RecordArgs) -> Result<(), String> {
    let mut cfg = scenario_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(d) = a.duration {
        cfg.record_s = d;
    }
    let m = record_demo(&cfg, &a.out).map_err(|e| e.to_string())?;
    println!(
        "episode {}: {} samples, {:.3} s -> {}",
        m.id,
        m.samples,
        m.duration_us as f64 / 1e6,
        a.out.join(episode_file_name(m.id)).display()
    );
    Ok(())
}

/// `episode_<id>.csv` -> id
fn episode_id(path: &Path) -> Option<u64> {
    path.file_stem()?
        .to_str()?
        .strip_prefix("episode_")?
        .parse()
        .ok()
}

fn replay_cmd(a: ReplayArgs) -> Result<(), String> {
    let cfg = scenario_config(a.config.as_deref())?;
    let records = load_episode(&a.episode).map_err(|e| format!("{}: {e}", a.episode.display()))?;
    let recorded_hash = episode_id(&a.episode)
        .zip(a.episode.parent())
        .and_then(|(id, dir)| read_manifest(dir).ok()?.into_iter().find(|m| m.id == id))
        .map(|m| m.config_hash);
    let hash = match recorded_hash {
        Some(h) => h,
        None => {
            eprintln!("warning: no manifest entry for this episode; assuming the current follower settings");
            cfg.hash()
        }
    };
    let trajectory = replay(&records, &hash, &cfg).map_err(|e| e.to_string())?;
    let worst = trajectory
        .iter()
        .zip(&records)
        .map(|(q, r)| q.max_abs_diff(&r.measured_q))
        .fold(0.0, f64::max);
    println!("replayed {} samples, max |q - measured_q| = {worst:e} rad", records.len());
    if worst > 1e-9 {
        return Err("replay diverges from the recorded follower trajectory".into());
    }
    Ok(())
}

fn dataset_inspect(dir: &Path) -> Result<(), String> {
    let eps = inspect::summarize(dir).map_err(|e| e.to_string())?;
    print!("{}", inspect::render(&eps));
    Ok(())
}

fn teleop(a: TeleopArgs) -> Result<(), String> {
    let transport = TransportSpec::parse(&a.transport, a.baud)?;
    let scenario = scenario_config(a.config.as_deref())?;
    let mut cfg = ServiceConfig::new(transport);
    cfg.calibration = a.calibration;
    cfg.dataset = a.dataset;
    cfg.rate_hz = a.rate;
    cfg.bind = SocketAddr::new(a.bind, a.port);
    cfg.initial_mode = SensitivityMode::from_divisor(a.mode).expect("validated by clap");
    cfg.ff_enabled = a.ff.on();
    cfg.gains = FeedbackGains {
        k_f: scenario.k_f,
        duty_max: scenario.duty_max,
        deadband: scenario.deadband,
    };
    cfg.scenario = scenario;
    if let Some(p) = a.dh {
        cfg.dh = DhTable::load(&p).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    let handle = service::start(cfg).map_err(|e| e.to_string())?;
    eprintln!("listening on {}", handle.addr());
    handle.wait(a.duration.map(Duration::from_secs_f64));
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<(), String> {
    let transport = TransportSpec::parse(&a.transport, a.baud)?;
    let cal = match transport {
        TransportSpec::Sim(_) => {
            calibrate_simulated(&Calibration::default(), a.noise, a.seed).map_err(|e| e.to_string())?
        }
        TransportSpec::Serial { path, baud } => calibrate_serial(&path, baud, a.samples)?,
    };
    cal.save(&a.out).map_err(|e| e.to_string())?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn calibrate_serial(path: &str, baud: u32, samples: usize) -> Result<Calibration, String> {
    let scenario = ScenarioConfig::default();
    let mut hw = SerialHardware::open(path, baud, scenario.follower_params(), scenario.limits())
        .map_err(|e| format!("{path}: {e}"))?;
    let mut wizard = CalibrationWizard::new(default_pot_scale(), Calibration::default().force);
    let stdin = io::stdin();
    while let Some(step) = wizard.current() {
        eprint!("{}, then press Enter: ", step.prompt());
        let _ = io::stderr().flush();
        let mut line = String::new();
        stdin.lock().read_line(&mut line).map_err(|e| e.to_string())?;
        // discard whatever arrived while the operator was moving
        let _ = hw.read(0);
        let mut parser = FrameParser::new();
        let mut got = Vec::new();
        let deadline = Instant::now() + Duration::from_secs(5);
        while got.len() < samples && Instant::now() < deadline {
            let bytes = hw.read(0).map_err(|e| e.to_string())?;
            for msg in parser.feed(&bytes).messages {
                if let Message::JointReport { seq, adc, buttons } = msg {
                    got.push(MasterState {
                        seq,
                        adc,
                        buttons: Buttons(buttons),
                        rx_time_us: 0,
                    });
                }
            }
        }
        if got.len() < samples {
            return Err(format!("only {} joint reports in 5 s; is the device connected?", got.len()));
        }
        wizard.capture(&got).map_err(|e| e.to_string())?;
    }
    wizard.finish().map_err(|e| e.to_string())
}
