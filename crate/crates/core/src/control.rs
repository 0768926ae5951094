//! Leader-to-follower mapping, button edge detection and the trigger force-feedback law.
//!
//! Scaling is clutched: the follower target moves by the leader's displacement
//! since the last anchor, divided by the sensitivity divisor. Anchors are reset
//! on every mode change so the command never jumps.

use serde::{Deserialize, Serialize};

use crate::kinematics::{clamp_to_limits, JointLimits};
use crate::protocol::DUTY_LIMIT;
use crate::types::{Buttons, JointVector, SensitivityMode, SlaveCommand};

/// A rising edge on one of the handle buttons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ButtonEvent {
    RecordToggle,
    SensitivityCycle,
}

/// One event per 0 -> 1 transition, record before sensitivity.
pub fn detect_button_events(prev: Buttons, new: Buttons) -> Vec<ButtonEvent> {
    let rising = !prev.0 & new.0;
    let mut out = Vec::new();
    if rising & Buttons::RECORD != 0 {
        out.push(ButtonEvent::RecordToggle);
    }
    if rising & Buttons::SENSITIVITY != 0 {
        out.push(ButtonEvent::SensitivityCycle);
    }
    out
}

/// Proportional trigger feedback with a deadband.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackGains {
    /// Duty per newton above the deadband, per mille / N.
    pub k_f: f64,
    /// Saturation, per mille.
    pub duty_max: i16,
    /// Newtons.
    pub deadband: f64,
}

impl Default for FeedbackGains {
    fn default() -> Self {
        FeedbackGains {
            k_f: 40.0,
            duty_max: 400,
            deadband: 0.5,
        }
    }
}

impl FeedbackGains {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_f >= 0.0 && self.k_f.is_finite()) {
            return Err(format!("k_f must be non-negative, got {}", self.k_f));
        }
        if !(1..=DUTY_LIMIT).contains(&self.duty_max) {
            return Err(format!("duty_max must be in 1..={DUTY_LIMIT}, got {}", self.duty_max));
        }
        if !(self.deadband >= 0.0 && self.deadband.is_finite()) {
            return Err(format!("deadband must be non-negative, got {}", self.deadband));
        }
        Ok(())
    }
}

/// Motor duty for a measured grip force.
///
/// Positive duty drives the trigger toward open, i.e. against the operator's squeeze.
pub fn force_feedback_duty(grip_force: f64, gains: &FeedbackGains, enabled: bool) -> i16 {
    if !enabled || !(grip_force > gains.deadband) {
        return 0;
    }
    let duty = (gains.k_f * (grip_force - gains.deadband)).round();
    duty.min(f64::from(gains.duty_max)) as i16
}

/// Calibrated leader input for one control tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LeaderInput {
    pub q: JointVector,
    /// Trigger position as a gripper opening fraction.
    pub gripper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    anchor_leader: JointVector,
    anchor_follower: JointVector,
    mode: SensitivityMode,
    ff_enabled: bool,
    prev_buttons: Buttons,
    recording: bool,
    last_leader: JointVector,
    last_command: SlaveCommand,
}

impl ControlState {
    /// Anchors start at the zero posture, so mode 1:1 begins as plain joint matching.
    pub fn new(mode: SensitivityMode, ff_enabled: bool) -> Self {
        ControlState {
            anchor_leader: JointVector::ZERO,
            anchor_follower: JointVector::ZERO,
            mode,
            ff_enabled,
            prev_buttons: Buttons::default(),
            recording: false,
            last_leader: JointVector::ZERO,
            last_command: SlaveCommand::default(),
        }
    }

    pub fn mode(&self) -> SensitivityMode {
        self.mode
    }

    pub fn ff_enabled(&self) -> bool {
        self.ff_enabled
    }

    pub fn set_ff_enabled(&mut self, enabled: bool) {
        self.ff_enabled = enabled;
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, recording: bool) {
        self.recording = recording;
    }

    pub fn anchors(&self) -> (JointVector, JointVector) {
        (self.anchor_leader, self.anchor_follower)
    }

    pub fn last_command(&self) -> SlaveCommand {
        self.last_command
    }

    /// Leader displacement since the anchor, divided by the sensitivity divisor.
    pub fn scaled_delta(&self, leader: &JointVector) -> JointVector {
        let s = f64::from(self.mode.divisor());
        (*leader - self.anchor_leader).map(|d| d / s)
    }

    pub fn teleop_step(&mut self, input: &LeaderInput, limits: &JointLimits) -> SlaveCommand {
        let raw = self.anchor_follower + self.scaled_delta(&input.q);
        let command = SlaveCommand {
            q_target: clamp_to_limits(&raw, limits),
            gripper_target: input.gripper.clamp(0.0, 1.0),
        };
        self.last_leader = input.q;
        self.last_command = command;
        command
    }

    /// Re-anchor at the last leader sample and the last emitted target.
    pub fn reanchor(&mut self) {
        self.anchor_leader = self.last_leader;
        self.anchor_follower = self.last_command.q_target;
    }

    pub fn cycle_sensitivity(&mut self) {
        self.set_mode(self.mode.next());
    }

    pub fn set_mode(&mut self, mode: SensitivityMode) {
        if mode != self.mode {
            self.mode = mode;
            self.reanchor();
        }
    }

    /// Feed the latest button bits; returns the rising edges.
    pub fn update_buttons(&mut self, buttons: Buttons) -> Vec<ButtonEvent> {
        let events = detect_button_events(self.prev_buttons, buttons);
        self.prev_buttons = buttons;
        events
    }
}
