//! The host control loop: decode device traffic, run one control tick, emit
//! motor/LED frames, a dataset row and a telemetry snapshot.
//!
//! Physical button edges and remote commands both become [`ControlEvent`]s and
//! go through [`Session::apply`], so the loop cannot tell them apart.

use serde::Serialize;

use crate::control::{force_feedback_duty, ButtonEvent, ControlState, FeedbackGains, LeaderInput};
use crate::kinematics::{clamp_to_limits, forward_kinematics, DhTable, JointLimits};
use crate::protocol::{encode_frame, FrameParser, Message, Parsed, ProtocolError};
use crate::recorder::{EpisodeManifest, EpisodeRecord, RecordSink, RecorderError};
use crate::sensing::{millivolts_to_force, trigger_angle, Calibration};
use crate::types::{Buttons, JointVector, MasterState, SensitivityMode, SlaveCommand};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub calibration: Calibration,
    pub limits: JointLimits,
    pub dh: DhTable,
    pub gains: FeedbackGains,
    pub initial_mode: SensitivityMode,
    pub ff_enabled: bool,
    /// Stored with every episode; see `ScenarioConfig::hash`.
    pub config_hash: String,
}

/// Anything that changes session state, from a button or from a remote client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlEvent {
    RecordToggle,
    SensitivityCycle,
    SetMode(SensitivityMode),
    SetForceFeedback(bool),
    StartRecording,
    StopRecording,
}

impl From<ButtonEvent> for ControlEvent {
    fn from(e: ButtonEvent) -> Self {
        match e {
            ButtonEvent::RecordToggle => ControlEvent::RecordToggle,
            ButtonEvent::SensitivityCycle => ControlEvent::SensitivityCycle,
        }
    }
}

/// What happened as a result of a [`ControlEvent`] or a tick.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    ModeChanged(SensitivityMode),
    ForceFeedback(bool),
    RecordingStarted(u64),
    RecordingStopped(EpisodeManifest),
    RecordingFailed(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommandError {
    #[error("already recording")]
    AlreadyRecording,
    #[error("not recording")]
    NotRecording,
    #[error("no dataset directory configured")]
    NoDataset,
    #[error("storage failure: {0}")]
    Storage(String),
}

/// Counters for the inbound byte stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub frames: u64,
    pub crc_errors: u64,
    pub other_errors: u64,
    /// Joint reports missing according to the sequence counter.
    pub missed: u64,
}

/// One tick's worth of state, consistent by construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Telemetry {
    /// Host clock, microseconds.
    pub t: u64,
    pub seq: u16,
    pub leader_q: JointVector,
    pub cmd_q: JointVector,
    pub measured_q: JointVector,
    pub ee_pos: [f64; 3],
    /// w, x, y, z
    pub ee_quat: [f64; 4],
    pub gripper_cmd: f64,
    pub gripper: f64,
    /// N
    pub force: f64,
    /// per mille
    pub duty: i16,
    /// Sensitivity divisor: 1, 2 or 4.
    pub mode: u8,
    pub ff_enabled: bool,
    pub recording: bool,
    pub episode: Option<u64>,
    pub dropped: u64,
    pub link: LinkStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub events: Vec<SessionEvent>,
    pub command: SlaveCommand,
    pub duty: i16,
    /// Frames for the device: always a motor command, plus LED state when it changed.
    pub outbound: Vec<u8>,
    pub record: EpisodeRecord,
    pub telemetry: Telemetry,
}

pub struct Session {
    cfg: SessionConfig,
    parser: FrameParser,
    control: ControlState,
    master: Option<MasterState>,
    grip_force: f64,
    sink: Option<Box<dyn RecordSink>>,
    episode: Option<u64>,
    episode_start_us: u64,
    events: Vec<SessionEvent>,
    stats: LinkStats,
    last_led: Option<(u8, u8)>,
    uptime_ms: Option<u32>,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Session {
        Session {
            control: ControlState::new(cfg.initial_mode, cfg.ff_enabled),
            cfg,
            parser: FrameParser::new(),
            master: None,
            grip_force: 0.0,
            sink: None,
            episode: None,
            episode_start_us: 0,
            events: Vec::new(),
            stats: LinkStats::default(),
            last_led: None,
            uptime_ms: None,
        }
    }

    pub fn with_sink(mut self, sink: Box<dyn RecordSink>) -> Session {
        self.sink = Some(sink);
        self
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn mode(&self) -> SensitivityMode {
        self.control.mode()
    }

    pub fn ff_enabled(&self) -> bool {
        self.control.ff_enabled()
    }

    pub fn recording(&self) -> bool {
        self.control.recording()
    }

    pub fn episode(&self) -> Option<u64> {
        self.episode
    }

    pub fn link_stats(&self) -> LinkStats {
        self.stats
    }

    pub fn device_uptime_ms(&self) -> Option<u32> {
        self.uptime_ms
    }

    pub fn latest_master(&self) -> Option<MasterState> {
        self.master
    }

    /// Decode bytes from the device. Joint reports replace the latest master state.
    pub fn ingest(&mut self, bytes: &[u8]) {
        self.ingest_at(bytes, 0)
    }

    pub fn ingest_at(&mut self, bytes: &[u8], rx_time_us: u64) {
        let parsed = self.parser.feed(bytes);
        self.absorb(parsed, rx_time_us);
    }

    /// Give up on a partial frame after the line has gone quiet, so a corrupted
    /// length byte cannot hold back the frames behind it.
    pub fn flush_link(&mut self, rx_time_us: u64) {
        let parsed = self.parser.flush();
        self.absorb(parsed, rx_time_us);
    }

    fn absorb(&mut self, parsed: Parsed, rx_time_us: u64) {
        for err in &parsed.errors {
            match err {
                ProtocolError::CrcError { .. } => self.stats.crc_errors += 1,
                _ => self.stats.other_errors += 1,
            }
        }
        for msg in parsed.messages {
            self.stats.frames += 1;
            match msg {
                Message::JointReport { seq, adc, buttons } => {
                    if let Some(prev) = self.master {
                        self.stats.missed += u64::from(seq.wrapping_sub(prev.seq).saturating_sub(1));
                    }
                    self.master = Some(MasterState {
                        seq,
                        adc,
                        buttons: Buttons(buttons),
                        rx_time_us,
                    });
                }
                Message::ForceReport { millivolts, .. } => {
                    let f = &self.cfg.calibration.force;
                    self.grip_force = millivolts_to_force(millivolts, &f.model(), &f.params());
                }
                Message::Heartbeat { uptime_ms } => self.uptime_ms = Some(uptime_ms),
                Message::MotorCommand { .. } | Message::LedCommand { .. } => {}
            }
        }
    }

    /// Apply an event now; also used by the tick for button edges.
    pub fn apply(&mut self, event: ControlEvent, t_us: u64) -> Result<(), CommandError> {
        match event {
            ControlEvent::RecordToggle => {
                if self.recording() {
                    self.apply(ControlEvent::StopRecording, t_us)
                } else {
                    self.apply(ControlEvent::StartRecording, t_us)
                }
            }
            ControlEvent::SensitivityCycle => {
                self.control.cycle_sensitivity();
                self.events.push(SessionEvent::ModeChanged(self.control.mode()));
                Ok(())
            }
            ControlEvent::SetMode(mode) => {
                if mode != self.control.mode() {
                    self.control.set_mode(mode);
                    self.events.push(SessionEvent::ModeChanged(mode));
                }
                Ok(())
            }
            ControlEvent::SetForceFeedback(on) => {
                if on != self.control.ff_enabled() {
                    self.control.set_ff_enabled(on);
                    self.events.push(SessionEvent::ForceFeedback(on));
                }
                Ok(())
            }
            ControlEvent::StartRecording => {
                if self.recording() {
                    return Err(CommandError::AlreadyRecording);
                }
                let sink = self.sink.as_mut().ok_or(CommandError::NoDataset)?;
                let id = sink
                    .start_episode(&self.cfg.config_hash)
                    .map_err(|e| self.fail(e))?;
                self.control.set_recording(true);
                self.episode = Some(id);
                self.episode_start_us = t_us;
                self.events.push(SessionEvent::RecordingStarted(id));
                Ok(())
            }
            ControlEvent::StopRecording => {
                if !self.recording() {
                    return Err(CommandError::NotRecording);
                }
                self.control.set_recording(false);
                self.episode = None;
                let sink = self.sink.as_mut().ok_or(CommandError::NoDataset)?;
                match sink.end_episode() {
                    Ok(manifest) => {
                        self.events.push(SessionEvent::RecordingStopped(manifest));
                        Ok(())
                    }
                    Err(e) => Err(self.fail(e)),
                }
            }
        }
    }

    fn fail(&mut self, e: RecorderError) -> CommandError {
        let msg = e.to_string();
        self.events.push(SessionEvent::RecordingFailed(msg.clone()));
        match e {
            RecorderError::AlreadyRecording => CommandError::AlreadyRecording,
            RecorderError::NotRecording => CommandError::NotRecording,
            _ => CommandError::Storage(msg),
        }
    }

    /// Calibrated leader joints (clamped to the calibrated range) and trigger opening.
    pub fn leader_input(&self, master: &MasterState) -> LeaderInput {
        let cal = &self.cfg.calibration;
        let q = JointVector(std::array::from_fn(|i| {
            let c = &cal.joints[i];
            // counts are range-checked at decode time
            let angle = cal.joint_angle(i, master.adc[i]).unwrap_or(c.offset);
            angle.clamp(c.limit_min, c.limit_max)
        }));
        let gripper = trigger_angle(master.trigger_counts(), &cal.trigger)
            .map(|a| cal.trigger.normalize(a))
            .unwrap_or(1.0);
        LeaderInput { q, gripper }
    }

    /// Run one control tick against the latest joint report. `measured_q` and
    /// `gripper` are the follower state at the start of the tick. Returns
    /// `None` until the first joint report has arrived.
    pub fn tick(&mut self, t_us: u64, measured_q: JointVector, gripper: f64) -> Option<TickOutput> {
        let master = self.master?;
        for edge in self.control.update_buttons(master.buttons) {
            // failures are reported through events
            let _ = self.apply(edge.into(), t_us);
        }

        let input = self.leader_input(&master);
        let command = self.control.teleop_step(&input, &self.cfg.limits);
        debug_assert!(self.cfg.limits.contains(&command.q_target));
        let duty = force_feedback_duty(self.grip_force, &self.cfg.gains, self.control.ff_enabled());

        let mut outbound = encode_frame(&Message::MotorCommand { duty }).expect("duty within limits");
        let led = (self.control.mode().divisor(), u8::from(self.recording()));
        if self.last_led != Some(led) {
            self.last_led = Some(led);
            outbound.extend(
                encode_frame(&Message::LedCommand {
                    mode: led.0,
                    recording: led.1,
                })
                .expect("led frame"),
            );
        }

        let measured_q = clamp_to_limits(&measured_q, &self.cfg.limits);
        let pose = forward_kinematics(&measured_q, &self.cfg.dh);
        let record = EpisodeRecord {
            t_us: t_us - self.episode_start_us.min(t_us),
            leader_q: input.q,
            cmd_q: command.q_target,
            measured_q,
            ee_pose: pose,
            gripper_cmd: command.gripper_target,
            grip_force: self.grip_force,
            mode: self.control.mode().divisor(),
            ff_enabled: self.control.ff_enabled(),
        };

        let mut dropped = 0;
        let mut storage_failed = false;
        if self.recording() {
            if let Some(sink) = self.sink.as_mut() {
                if let Err(e) = sink.append_sample(&record) {
                    storage_failed = matches!(e, RecorderError::StorageFailure(_));
                    self.events.push(SessionEvent::RecordingFailed(e.to_string()));
                }
                dropped = sink.dropped();
            }
        }
        if storage_failed {
            let _ = self.apply(ControlEvent::StopRecording, t_us);
        }

        let telemetry = Telemetry {
            t: t_us,
            seq: master.seq,
            leader_q: input.q,
            cmd_q: command.q_target,
            measured_q,
            ee_pos: pose.position,
            ee_quat: pose.orientation,
            gripper_cmd: command.gripper_target,
            gripper,
            force: self.grip_force,
            duty,
            mode: self.control.mode().divisor(),
            ff_enabled: self.control.ff_enabled(),
            recording: self.recording(),
            episode: self.episode,
            dropped,
            link: self.stats,
        };
        Some(TickOutput {
            events: std::mem::take(&mut self.events),
            command,
            duty,
            outbound,
            record,
            telemetry,
        })
    }

    /// End an open episode, e.g. on shutdown.
    pub fn close(&mut self, t_us: u64) -> Option<EpisodeManifest> {
        if self.recording() && self.apply(ControlEvent::StopRecording, t_us).is_ok() {
            return self.events.drain(..).find_map(|e| match e {
                SessionEvent::RecordingStopped(m) => Some(m),
                _ => None,
            });
        }
        None
    }
}
