//! Deterministic stand-ins for the hardware: the Echo device (leader arm, trigger,
//! buttons, trigger motor), the force-sensor board, a first-order follower arm
//! and a breakable object held in the gripper.
//!
//! Everything speaks the real wire protocol, so the host stack runs unmodified.

use std::f64::consts::PI;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::FeedbackGains;
use crate::kinematics::{clamp_to_limits, JointLimits};
use crate::protocol::{encode_frame, FrameParser, Message};
use crate::recorder::{EpisodeManifest, Recorder, RecorderError};
use crate::sensing::{angle_to_counts, force_to_millivolts, Calibration, FsrModel};
use crate::session::{Session, SessionConfig, SessionEvent, TickOutput};
use crate::types::{
    Buttons, ChannelCalibration, ForceChannelParams, JointVector, SensitivityMode, SlaveCommand, ADC_CHANNELS,
    ADC_MAX, JOINTS,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    ConfigInvalid(String),
    #[error("cannot read scenario config: {0}")]
    Io(#[from] io::Error),
    #[error("malformed scenario config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("recording failed: {0}")]
    Record(RecorderError),
}

/// Scenario configuration, stored as flat TOML key/values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Control tick, microseconds.
    pub dt_us: u64,
    /// Egg scenario length, seconds.
    pub duration_s: f64,
    /// Follower tracking time constant, seconds.
    pub tau: f64,
    /// Follower joint speed limit, rad/s.
    pub v_max: f64,
    /// Gripper opening speed limit, fraction/s.
    pub gripper_v_max: f64,
    /// Object stiffness, N per unit opening.
    pub k: f64,
    /// Opening at which the gripper first touches the object.
    pub x0: f64,
    /// Force above which the object breaks, N (`inf` for unbreakable).
    pub f_break: f64,
    /// Uniform ADC noise amplitude, counts.
    pub noise: u16,
    /// Simulated operator: trigger opening added per per-mille of felt duty.
    pub operator_gain: f64,
    pub k_f: f64,
    pub duty_max: i16,
    pub deadband: f64,
    /// Egg scenario: time the operator starts closing, seconds.
    pub squeeze_start_s: f64,
    /// Egg scenario: closing time is drawn uniformly from this range, seconds.
    pub close_time_min_s: f64,
    pub close_time_max_s: f64,
    /// Egg scenario: final scripted opening is drawn from `[0, final_opening_max]`.
    pub final_opening_max: f64,
    /// Demo scenario: record button pressed at 0 s and again after this many seconds.
    pub record_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            dt_us: 10_000,
            duration_s: 3.0,
            tau: 0.05,
            v_max: PI,
            gripper_v_max: 1.5,
            k: 100.0,
            x0: 0.4,
            f_break: 16.0,
            noise: 2,
            operator_gain: 1e-3,
            k_f: 40.0,
            duty_max: 400,
            deadband: 0.5,
            squeeze_start_s: 0.5,
            close_time_min_s: 0.6,
            close_time_max_s: 1.2,
            final_opening_max: 0.25,
            record_s: 10.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<ScenarioConfig, SimError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, SimError> {
        ScenarioConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::ConfigInvalid(msg));
        if self.dt_us == 0 || self.dt_us > 100_000 {
            return bad(format!("dt_us must be in 1..=100000, got {}", self.dt_us));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("v_max", self.v_max),
            ("gripper_v_max", self.gripper_v_max),
            ("duration_s", self.duration_s),
            ("f_break", self.f_break),
            ("record_s", self.record_s),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.x0 > 0.0 && self.x0 <= 1.0) {
            return bad(format!("x0 must be in (0, 1], got {}", self.x0));
        }
        for (name, v) in [
            ("k", self.k),
            ("operator_gain", self.operator_gain),
            ("squeeze_start_s", self.squeeze_start_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.close_time_min_s > 0.0 && self.close_time_min_s <= self.close_time_max_s) {
            return bad("close_time_min_s must be positive and not above close_time_max_s".into());
        }
        if !(0.0..=1.0).contains(&self.final_opening_max) {
            return bad("final_opening_max must be in [0, 1]".into());
        }
        if self.noise > 100 {
            return bad(format!("noise above 100 counts is not a potentiometer, got {}", self.noise));
        }
        self.gains().validate().map_err(SimError::ConfigInvalid)
    }

    pub fn dt(&self) -> f64 {
        self.dt_us as f64 / 1e6
    }

    pub fn gains(&self) -> FeedbackGains {
        FeedbackGains {
            k_f: self.k_f,
            duty_max: self.duty_max,
            deadband: self.deadband,
        }
    }

    pub fn follower_params(&self) -> FollowerParams {
        FollowerParams {
            tau: self.tau,
            v_max: self.v_max,
            gripper_v_max: self.gripper_v_max,
        }
    }

    pub fn limits(&self) -> JointLimits {
        JointLimits {
            max_velocity: self.v_max,
            ..JointLimits::default()
        }
    }

    /// Fingerprint of everything that shapes the follower trajectory; stored
    /// with each episode so replays against a different follower are refused.
    pub fn hash(&self) -> String {
        let limits = self.limits();
        let text = format!(
            "dt_us={} tau={:?} v_max={:?} gripper_v_max={:?} min={:?} max={:?}",
            self.dt_us, self.tau, self.v_max, self.gripper_v_max, limits.min, limits.max
        );
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Follower tracking parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerParams {
    pub tau: f64,
    pub v_max: f64,
    pub gripper_v_max: f64,
}

/// First-order, rate-limited follower arm with a gripper.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSim {
    q: JointVector,
    gripper: f64,
    params: FollowerParams,
    limits: JointLimits,
}

fn lag_step(x: f64, target: f64, gain: f64, limit: f64) -> f64 {
    x + ((target - x) * gain).clamp(-limit, limit)
}

impl FollowerSim {
    pub fn new(params: FollowerParams, limits: JointLimits, q: JointVector, gripper: f64) -> Self {
        FollowerSim {
            q: clamp_to_limits(&q, &limits),
            gripper: gripper.clamp(0.0, 1.0),
            params,
            limits,
        }
    }

    pub fn q(&self) -> JointVector {
        self.q
    }

    pub fn gripper(&self) -> f64 {
        self.gripper
    }

    /// `q += clamp((target - q) * dt / tau, +-v_max * dt)`, then clamp to limits.
    pub fn step(&mut self, cmd: &SlaveCommand, dt: f64) {
        let gain = (dt / self.params.tau).min(1.0);
        let q = JointVector(std::array::from_fn(|i| {
            lag_step(self.q[i], cmd.q_target[i], gain, self.params.v_max * dt)
        }));
        self.q = clamp_to_limits(&q, &self.limits);
        self.gripper = lag_step(
            self.gripper,
            cmd.gripper_target,
            gain,
            self.params.gripper_v_max * dt,
        )
        .clamp(0.0, 1.0);
    }
}

/// A linear-spring object between the gripper fingers that breaks above a force threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactObject {
    /// Opening at first contact.
    pub x0: f64,
    /// N per unit opening.
    pub k: f64,
    pub f_break: f64,
    pub broken: bool,
}

impl ContactObject {
    pub fn new(x0: f64, k: f64, f_break: f64) -> Self {
        ContactObject {
            x0,
            k,
            f_break,
            broken: false,
        }
    }

    /// Contact force at `opening`. Breaking is permanent and the force drops to zero.
    pub fn contact_force(&mut self, opening: f64) -> f64 {
        if self.broken {
            return 0.0;
        }
        let force = self.k * (self.x0 - opening).max(0.0);
        if force > self.f_break {
            self.broken = true;
        }
        force
    }
}

/// Leader motion over time: joint angles plus trigger opening fraction.
#[derive(Debug, Clone, PartialEq)]
pub enum LeaderScript {
    Hold {
        q: JointVector,
        gripper: f64,
    },
    /// Piecewise-linear between keyframes `(t_s, q, gripper)`; held after the last one.
    Keyframes(Vec<(f64, JointVector, f64)>),
    /// Each joint oscillates around `center`; the trigger cycles open/closed.
    Wave {
        center: JointVector,
        amplitude: JointVector,
        period_s: f64,
        gripper_period_s: f64,
    },
    /// Hold the arm still, keep the trigger open, then close linearly to `final_opening`.
    Squeeze {
        q: JointVector,
        start_s: f64,
        close_s: f64,
        final_opening: f64,
    },
}

impl LeaderScript {
    pub fn sample(&self, t: f64) -> (JointVector, f64) {
        match self {
            LeaderScript::Hold { q, gripper } => (*q, *gripper),
            LeaderScript::Keyframes(frames) => {
                let Some(first) = frames.first() else {
                    return (JointVector::ZERO, 1.0);
                };
                if t <= first.0 {
                    return (first.1, first.2);
                }
                for w in frames.windows(2) {
                    let ((t0, q0, g0), (t1, q1, g1)) = (w[0], w[1]);
                    if t < t1 {
                        let a = (t - t0) / (t1 - t0);
                        return (q0 + (q1 - q0).scale(a), g0 + (g1 - g0) * a);
                    }
                }
                let last = frames[frames.len() - 1];
                (last.1, last.2)
            }
            LeaderScript::Wave {
                center,
                amplitude,
                period_s,
                gripper_period_s,
            } => {
                let q = JointVector(std::array::from_fn(|i| {
                    // stagger joints so they do not move in lockstep
                    let phase = 2.0 * PI * (t / period_s + i as f64 / JOINTS as f64);
                    center[i] + amplitude[i] * phase.sin()
                }));
                let g = 0.5 + 0.5 * (2.0 * PI * t / gripper_period_s).cos();
                (q, g)
            }
            LeaderScript::Squeeze {
                q,
                start_s,
                close_s,
                final_opening,
            } => {
                let a = ((t - start_s) / close_s).clamp(0.0, 1.0);
                (*q, 1.0 + (final_opening - 1.0) * a)
            }
        }
    }
}

/// A button held down for an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ButtonPress {
    pub at_us: u64,
    pub hold_us: u64,
    pub bits: u8,
}

/// The Echo board plus the leader arm in the operator's hand.
#[derive(Debug, Clone)]
pub struct VirtualDevice {
    calibration: Calibration,
    script: LeaderScript,
    presses: Vec<ButtonPress>,
    noise: u16,
    rng: ChaCha8Rng,
    seq: u16,
    operator_gain: f64,
    felt_duty: i16,
    led: Option<(u8, u8)>,
    from_host: FrameParser,
    from_force_board: FrameParser,
    forwarded: Vec<u8>,
    last_heartbeat_ms: Option<u64>,
}

impl VirtualDevice {
    pub fn new(
        calibration: Calibration,
        script: LeaderScript,
        presses: Vec<ButtonPress>,
        noise: u16,
        rng: ChaCha8Rng,
        operator_gain: f64,
    ) -> Self {
        VirtualDevice {
            calibration,
            script,
            presses,
            noise,
            rng,
            seq: 0,
            operator_gain,
            felt_duty: 0,
            led: None,
            from_host: FrameParser::new(),
            from_force_board: FrameParser::new(),
            forwarded: Vec::new(),
            last_heartbeat_ms: None,
        }
    }

    pub fn felt_duty(&self) -> i16 {
        self.felt_duty
    }

    /// Last LED state commanded by the host: (mode divisor, recording).
    pub fn led(&self) -> Option<(u8, u8)> {
        self.led
    }

    /// Trigger opening the operator actually holds: the script eased by the felt motor duty.
    pub fn trigger_opening(&self, t: f64) -> f64 {
        let (_, scripted) = self.script.sample(t);
        (scripted + self.operator_gain * f64::from(self.felt_duty)).clamp(0.0, 1.0)
    }

    fn quantize(&mut self, exact_counts: f64) -> u16 {
        let mut counts = exact_counts.round();
        if self.noise > 0 {
            let a = i32::from(self.noise);
            counts += f64::from(self.rng.gen_range(-a..=a));
        }
        counts.clamp(0.0, f64::from(ADC_MAX)) as u16
    }

    fn joint_counts(cal: &ChannelCalibration, angle: f64) -> f64 {
        angle_to_counts(angle, cal.offset, cal.scale, cal.sign)
    }

    /// Noise-free counts for the scripted pose at `t`, before rounding.
    pub fn exact_counts(&self, t: f64) -> [f64; ADC_CHANNELS] {
        let (q, _) = self.script.sample(t);
        let opening = self.trigger_opening(t);
        let tc = &self.calibration.trigger;
        let trigger_angle = tc.closed + opening * (tc.open - tc.closed);
        std::array::from_fn(|i| {
            if i < JOINTS {
                Self::joint_counts(&self.calibration.joints[i], q[i])
            } else {
                angle_to_counts(trigger_angle, tc.offset, tc.scale, tc.sign)
            }
        })
    }

    pub fn buttons_at(&self, t_us: u64) -> u8 {
        self.presses
            .iter()
            .filter(|p| t_us >= p.at_us && t_us < p.at_us + p.hold_us)
            .fold(0, |acc, p| acc | p.bits)
    }

    /// Bytes the board sends to the host for the tick at `t_us`: forwarded
    /// force reports, a heartbeat once a second and one joint report.
    pub fn device_step(&mut self, t_us: u64) -> Vec<u8> {
        let exact = self.exact_counts(t_us as f64 / 1e6);
        let adc = exact.map(|c| self.quantize(c));
        let report = Message::JointReport {
            seq: self.seq,
            adc,
            buttons: self.buttons_at(t_us),
        };
        self.seq = self.seq.wrapping_add(1);
        let mut out = std::mem::take(&mut self.forwarded);
        let uptime_ms = t_us / 1000;
        if self.last_heartbeat_ms.is_none_or(|last| uptime_ms >= last + 1000) {
            self.last_heartbeat_ms = Some(uptime_ms);
            out.extend(frame(&Message::Heartbeat {
                uptime_ms: uptime_ms as u32,
            }));
        }
        out.extend(frame(&report));
        out
    }

    /// Host -> board traffic: motor duty and LED state.
    pub fn receive_from_host(&mut self, bytes: &[u8]) {
        for msg in self.from_host.feed(bytes).messages {
            match msg {
                Message::MotorCommand { duty } => self.felt_duty = duty,
                Message::LedCommand { mode, recording } => self.led = Some((mode, recording)),
                _ => {}
            }
        }
    }

    /// Force board -> board traffic; force reports are forwarded to the host.
    pub fn receive_from_force_board(&mut self, bytes: &[u8]) {
        for msg in self.from_force_board.feed(bytes).messages {
            if let Message::ForceReport { .. } = msg {
                self.forwarded.extend(frame(&msg));
            }
        }
    }
}

fn frame(msg: &Message) -> Vec<u8> {
    encode_frame(msg).expect("sim only builds in-range messages")
}

/// The gripper force-sensor board: samples the sensor and reports `|V_OUT|` in millivolts.
#[derive(Debug, Clone)]
pub struct VirtualForceBoard {
    seq: u16,
    model: FsrModel,
    params: ForceChannelParams,
}

impl VirtualForceBoard {
    pub fn new(model: FsrModel, params: ForceChannelParams) -> Self {
        VirtualForceBoard { seq: 0, model, params }
    }

    pub fn report(&mut self, force: f64) -> Vec<u8> {
        let sensed = force.clamp(0.0, self.params.f_max);
        let millivolts = force_to_millivolts(sensed, &self.model, &self.params)
            .expect("force clamped into sensor range");
        let msg = Message::ForceReport {
            seq: self.seq,
            millivolts,
        };
        self.seq = self.seq.wrapping_add(1);
        frame(&msg)
    }
}

/// Device-side endpoint the host loop talks to, simulated or real.
pub trait Hardware: Send {
    /// Bytes received from the device for the tick at `t_us`.
    fn read(&mut self, t_us: u64) -> io::Result<Vec<u8>>;
    fn write(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Follower joint angles and gripper opening at the start of the tick.
    fn measured(&self) -> (JointVector, f64);
    fn command_follower(&mut self, cmd: &SlaveCommand, dt: f64);
}

impl<H: Hardware + ?Sized> Hardware for Box<H> {
    fn read(&mut self, t_us: u64) -> io::Result<Vec<u8>> {
        (**self).read(t_us)
    }

    fn write(&mut self, bytes: &[u8]) -> io::Result<()> {
        (**self).write(bytes)
    }

    fn measured(&self) -> (JointVector, f64) {
        (**self).measured()
    }

    fn command_follower(&mut self, cmd: &SlaveCommand, dt: f64) {
        (**self).command_follower(cmd, dt)
    }
}

/// Which built-in script drives the virtual operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// Hold the arm, squeeze the trigger onto a fragile object.
    Egg,
    /// Wave all joints, cycle the trigger, toggle sensitivity twice while recording.
    Demo,
    /// The demo motion with no button presses, for interactive sessions.
    Wave,
}

impl ScenarioKind {
    pub fn from_name(name: &str) -> Option<ScenarioKind> {
        match name {
            "egg" => Some(ScenarioKind::Egg),
            "demo" => Some(ScenarioKind::Demo),
            "wave" => Some(ScenarioKind::Wave),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Egg => "egg",
            ScenarioKind::Demo => "demo",
            ScenarioKind::Wave => "wave",
        }
    }
}

/// Leader pose held during the egg scenario.
pub const EGG_POSE: JointVector = JointVector([0.0, -1.2, 1.1, -1.5, -1.57, 0.0]);

/// All simulated hardware, connected through in-process byte links.
#[derive(Debug, Clone)]
pub struct SimRig {
    pub device: VirtualDevice,
    pub force_board: VirtualForceBoard,
    pub follower: FollowerSim,
    pub object: Option<ContactObject>,
    grip_force: f64,
    peak_force: f64,
}

impl SimRig {
    pub fn new(cfg: &ScenarioConfig, kind: ScenarioKind, calibration: &Calibration) -> SimRig {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (script, presses, object) = match kind {
            ScenarioKind::Egg => {
                let final_opening = rng.gen_range(0.0..=cfg.final_opening_max);
                let close_s = rng.gen_range(cfg.close_time_min_s..=cfg.close_time_max_s);
                let script = LeaderScript::Squeeze {
                    q: EGG_POSE,
                    start_s: cfg.squeeze_start_s,
                    close_s,
                    final_opening,
                };
                (script, Vec::new(), Some(ContactObject::new(cfg.x0, cfg.k, cfg.f_break)))
            }
            ScenarioKind::Demo | ScenarioKind::Wave => {
                let script = LeaderScript::Wave {
                    center: EGG_POSE,
                    amplitude: JointVector([0.4, 0.3, 0.3, 0.5, 0.5, 0.8]),
                    period_s: 4.0,
                    gripper_period_s: 3.0,
                };
                let record_us = (cfg.record_s * 1e6).round() as u64;
                let press = |at_us, bits| ButtonPress {
                    at_us,
                    hold_us: 50_000,
                    bits,
                };
                let presses = if kind == ScenarioKind::Demo {
                    vec![
                        press(0, Buttons::RECORD),
                        press(record_us / 3, Buttons::SENSITIVITY),
                        press(2 * record_us / 3, Buttons::SENSITIVITY),
                        press(record_us, Buttons::RECORD),
                    ]
                } else {
                    Vec::new()
                };
                (script, presses, None)
            }
        };
        let (q0, g0) = script.sample(0.0);
        let device = VirtualDevice::new(
            calibration.clone(),
            script,
            presses,
            cfg.noise,
            rng,
            cfg.operator_gain,
        );
        SimRig {
            device,
            force_board: VirtualForceBoard::new(calibration.force.model(), calibration.force.params()),
            follower: FollowerSim::new(cfg.follower_params(), cfg.limits(), q0, g0),
            object,
            grip_force: 0.0,
            peak_force: 0.0,
        }
    }

    pub fn grip_force(&self) -> f64 {
        self.grip_force
    }

    pub fn peak_force(&self) -> f64 {
        self.peak_force
    }

    pub fn broken(&self) -> bool {
        self.object.is_some_and(|o| o.broken)
    }
}

impl Hardware for SimRig {
    fn read(&mut self, t_us: u64) -> io::Result<Vec<u8>> {
        let rs485 = self.force_board.report(self.grip_force);
        self.device.receive_from_force_board(&rs485);
        Ok(self.device.device_step(t_us))
    }

    fn write(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.device.receive_from_host(bytes);
        Ok(())
    }

    fn measured(&self) -> (JointVector, f64) {
        (self.follower.q(), self.follower.gripper())
    }

    fn command_follower(&mut self, cmd: &SlaveCommand, dt: f64) {
        self.follower.step(cmd, dt);
        if let Some(obj) = self.object.as_mut() {
            self.grip_force = obj.contact_force(self.follower.gripper());
            self.peak_force = self.peak_force.max(self.grip_force);
        }
    }
}

/// Host loop and hardware advanced together on one clock.
pub struct Lockstep<H: Hardware> {
    pub hardware: H,
    pub session: Session,
    t_us: u64,
    dt_us: u64,
}

impl<H: Hardware> Lockstep<H> {
    pub fn new(hardware: H, session: Session, dt_us: u64) -> Self {
        Lockstep {
            hardware,
            session,
            t_us: 0,
            dt_us,
        }
    }

    pub fn t_us(&self) -> u64 {
        self.t_us
    }

    /// One control tick: read device, run the host, write back, move the follower.
    pub fn step(&mut self) -> io::Result<Option<TickOutput>> {
        let t = self.t_us;
        let bytes = self.hardware.read(t)?;
        self.session.ingest(&bytes);
        let (q, gripper) = self.hardware.measured();
        let out = self.session.tick(t, q, gripper);
        if let Some(o) = &out {
            self.hardware.write(&o.outbound)?;
            self.hardware.command_follower(&o.command, self.dt_us as f64 / 1e6);
        }
        self.t_us += self.dt_us;
        Ok(out)
    }
}

/// Outcome of one egg run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioReport {
    pub seed: u64,
    pub ff_enabled: bool,
    /// Largest contact force seen, N.
    pub peak_force: f64,
    pub broken: bool,
    pub duration_s: f64,
}

/// Session settings matching a scenario config.
pub fn session_config(cfg: &ScenarioConfig, calibration: &Calibration, ff_enabled: bool) -> SessionConfig {
    SessionConfig {
        calibration: calibration.clone(),
        limits: cfg.limits(),
        dh: Default::default(),
        gains: cfg.gains(),
        initial_mode: SensitivityMode::Standard,
        ff_enabled,
        config_hash: cfg.hash(),
    }
}

/// Closed-loop fragile-object grasp with or without trigger force feedback.
pub fn run_egg_scenario(cfg: &ScenarioConfig, ff_enabled: bool) -> Result<ScenarioReport, SimError> {
    cfg.validate()?;
    let calibration = Calibration::default();
    let rig = SimRig::new(cfg, ScenarioKind::Egg, &calibration);
    let session = Session::new(session_config(cfg, &calibration, ff_enabled));
    let mut sim = Lockstep::new(rig, session, cfg.dt_us);
    let ticks = (cfg.duration_s * 1e6 / cfg.dt_us as f64).round() as u64;
    for _ in 0..ticks {
        sim.step().expect("in-process links do not fail");
    }
    Ok(ScenarioReport {
        seed: cfg.seed,
        ff_enabled,
        peak_force: sim.hardware.peak_force(),
        broken: sim.hardware.broken(),
        duration_s: ticks as f64 * cfg.dt(),
    })
}

/// Run the demo scenario with a recorder on `dir`. The script presses record
/// at 0 s and again at `record_s`, so one episode of `record_s / dt` rows is written.
pub fn record_demo(cfg: &ScenarioConfig, dir: &Path) -> Result<EpisodeManifest, SimError> {
    cfg.validate()?;
    let calibration = Calibration::default();
    let rig = SimRig::new(cfg, ScenarioKind::Demo, &calibration);
    let session = Session::new(session_config(cfg, &calibration, true))
        .with_sink(Box::new(Recorder::open(dir).map_err(SimError::Record)?));
    let mut sim = Lockstep::new(rig, session, cfg.dt_us);
    let stop_us = (cfg.record_s * 1e6).round() as u64;
    let mut manifest = None;
    while manifest.is_none() && sim.t_us() <= stop_us + 10 * cfg.dt_us {
        let Some(out) = sim.step()? else { continue };
        for event in out.events {
            match event {
                SessionEvent::RecordingStopped(m) => manifest = Some(m),
                SessionEvent::RecordingFailed(msg) => return Err(SimError::Io(io::Error::other(msg))),
                _ => {}
            }
        }
    }
    manifest.ok_or_else(|| SimError::ConfigInvalid("record_s does not fall on a control tick".into()))
}
