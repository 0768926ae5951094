//! Shared domain vocabulary: device samples, calibration, modes, poses and commands.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Sub};

use serde::{Deserialize, Serialize};

/// Number of arm joints on one leader device (and on the follower).
pub const JOINTS: usize = 6;
/// ADC channels reported per sample: six joints plus the trigger.
pub const ADC_CHANNELS: usize = JOINTS + 1;
/// Largest count a 12-bit converter can report.
pub const ADC_MAX: u16 = 4095;

/// Six joint angles in radians, ordered base to wrist.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointVector(pub [f64; JOINTS]);

impl JointVector {
    pub const ZERO: JointVector = JointVector([0.0; JOINTS]);

    pub fn new(q: [f64; JOINTS]) -> Self {
        JointVector(q)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> JointVector {
        JointVector(self.0.map(f))
    }

    pub fn scale(&self, factor: f64) -> JointVector {
        self.map(|v| v * factor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.0.iter()
    }

    /// Largest absolute per-joint difference.
    pub fn max_abs_diff(&self, other: &JointVector) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for JointVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for JointVector {
    type Output = JointVector;
    fn add(self, rhs: JointVector) -> JointVector {
        JointVector(std::array::from_fn(|i| self.0[i] + rhs.0[i]))
    }
}

impl Sub for JointVector {
    type Output = JointVector;
    fn sub(self, rhs: JointVector) -> JointVector {
        JointVector(std::array::from_fn(|i| self.0[i] - rhs.0[i]))
    }
}

/// Handle buttons as reported on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct Buttons(pub u8);

impl Buttons {
    /// Dataset record button (left handle).
    pub const RECORD: u8 = 0b01;
    /// Sensitivity button (right handle).
    pub const SENSITIVITY: u8 = 0b10;

    pub fn record(self) -> bool {
        self.0 & Self::RECORD != 0
    }

    pub fn sensitivity(self) -> bool {
        self.0 & Self::SENSITIVITY != 0
    }
}

/// One sample of the leader device as seen by the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MasterState {
    pub seq: u16,
    /// Six joint channels followed by the trigger channel.
    pub adc: [u16; ADC_CHANNELS],
    pub buttons: Buttons,
    /// Host receive time in microseconds.
    pub rx_time_us: u64,
}

impl MasterState {
    pub fn joint_counts(&self) -> &[u16] {
        &self.adc[..JOINTS]
    }

    pub fn trigger_counts(&self) -> u16 {
        self.adc[JOINTS]
    }
}

/// Potentiometer direction relative to the follower joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

impl TryFrom<i8> for Sign {
    type Error = String;
    fn try_from(v: i8) -> Result<Self, String> {
        match v {
            1 => Ok(Sign::Positive),
            -1 => Ok(Sign::Negative),
            other => Err(format!("sign must be 1 or -1, got {other}")),
        }
    }
}

impl From<Sign> for i8 {
    fn from(s: Sign) -> i8 {
        match s {
            Sign::Positive => 1,
            Sign::Negative => -1,
        }
    }
}

/// Affine ADC-to-radian map for one potentiometer channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    /// Counts read at the calibrated zero posture.
    pub offset: f64,
    /// Radians per count, always positive.
    pub scale: f64,
    pub sign: Sign,
    pub limit_min: f64,
    pub limit_max: f64,
}

impl ChannelCalibration {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(format!("scale must be positive, got {}", self.scale));
        }
        if !self.offset.is_finite() {
            return Err("offset must be finite".into());
        }
        if !(self.limit_min < self.limit_max) {
            return Err(format!(
                "limit_min {} must be below limit_max {}",
                self.limit_min, self.limit_max
            ));
        }
        Ok(())
    }
}

/// Trigger channel: the affine map plus the angles captured at the closed and open stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerCalibration {
    pub offset: f64,
    pub scale: f64,
    pub sign: Sign,
    /// Trigger angle (rad) with the gripper fully closed.
    pub closed: f64,
    /// Trigger angle (rad) with the gripper fully open.
    pub open: f64,
}

impl TriggerCalibration {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(format!("trigger scale must be positive, got {}", self.scale));
        }
        if !(self.open.is_finite() && self.closed.is_finite()) || self.open == self.closed {
            return Err("trigger open and closed angles must be finite and distinct".into());
        }
        Ok(())
    }

    /// Map a trigger angle to a gripper opening fraction (0 closed, 1 open).
    pub fn normalize(&self, angle: f64) -> f64 {
        ((angle - self.closed) / (self.open - self.closed)).clamp(0.0, 1.0)
    }
}

/// Sensitivity divisor applied to leader motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SensitivityMode {
    /// 1:1
    #[default]
    Standard,
    /// 1:2
    Precise,
    /// 1:4
    SuperPrecise,
}

impl SensitivityMode {
    pub const ALL: [SensitivityMode; 3] = [
        SensitivityMode::Standard,
        SensitivityMode::Precise,
        SensitivityMode::SuperPrecise,
    ];

    pub fn divisor(self) -> u8 {
        match self {
            SensitivityMode::Standard => 1,
            SensitivityMode::Precise => 2,
            SensitivityMode::SuperPrecise => 4,
        }
    }

    pub fn from_divisor(s: u8) -> Option<Self> {
        match s {
            1 => Some(SensitivityMode::Standard),
            2 => Some(SensitivityMode::Precise),
            4 => Some(SensitivityMode::SuperPrecise),
            _ => None,
        }
    }

    /// Next mode in the 1 -> 2 -> 4 -> 1 cycle.
    pub fn next(self) -> Self {
        match self {
            SensitivityMode::Standard => SensitivityMode::Precise,
            SensitivityMode::Precise => SensitivityMode::SuperPrecise,
            SensitivityMode::SuperPrecise => SensitivityMode::Standard,
        }
    }
}

impl TryFrom<u8> for SensitivityMode {
    type Error = String;
    fn try_from(s: u8) -> Result<Self, String> {
        SensitivityMode::from_divisor(s).ok_or_else(|| format!("invalid sensitivity divisor {s}"))
    }
}

impl From<SensitivityMode> for u8 {
    fn from(m: SensitivityMode) -> u8 {
        m.divisor()
    }
}

impl fmt::Display for SensitivityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1:{}", self.divisor())
    }
}

/// Electrical constants of the force-sensor linearization stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceChannelParams {
    /// Op-amp reference voltage, volts.
    pub v_ref: f64,
    /// Feedback resistor, ohms.
    pub r_g: f64,
    /// Full-scale force, newtons.
    pub f_max: f64,
}

impl Default for ForceChannelParams {
    fn default() -> Self {
        ForceChannelParams {
            v_ref: 3.3,
            r_g: 10_000.0,
            f_max: 20.0,
        }
    }
}

impl ForceChannelParams {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("v_ref", self.v_ref), ("r_g", self.r_g), ("f_max", self.f_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be strictly positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Gripper state on the follower side.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GripperState {
    /// 1 = fully open.
    pub opening: f64,
    /// Newtons, never negative.
    pub force: f64,
}

/// Follower joint targets plus gripper opening target.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlaveCommand {
    pub q_target: JointVector,
    pub gripper_target: f64,
}

/// End-effector pose: position in meters, unit quaternion stored w-first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl Pose {
    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivity_is_a_three_cycle() {
        for m in SensitivityMode::ALL {
            assert_eq!(m.next().next().next(), m);
            assert_ne!(m.next(), m);
        }
        assert_eq!(SensitivityMode::Standard.next().divisor(), 2);
        assert_eq!(SensitivityMode::Precise.next().divisor(), 4);
        assert_eq!(SensitivityMode::SuperPrecise.next().divisor(), 1);
    }

    #[test]
    fn only_1_2_4_are_modes() {
        for s in 0..=255u8 {
            assert_eq!(SensitivityMode::from_divisor(s).is_some(), matches!(s, 1 | 2 | 4));
        }
    }

    #[test]
    fn trigger_normalization_handles_reversed_endpoints() {
        let t = TriggerCalibration {
            offset: 0.0,
            scale: 1.0,
            sign: Sign::Positive,
            closed: 0.5,
            open: 0.0,
        };
        assert_eq!(t.normalize(0.5), 0.0);
        assert_eq!(t.normalize(0.0), 1.0);
        assert_eq!(t.normalize(0.25), 0.5);
        assert_eq!(t.normalize(-3.0), 1.0);
    }

    #[test]
    fn channel_validation() {
        let mut c = ChannelCalibration {
            offset: 2048.0,
            scale: 0.001,
            sign: Sign::Negative,
            limit_min: -1.0,
            limit_max: 1.0,
        };
        assert!(c.validate().is_ok());
        c.scale = 0.0;
        assert!(c.validate().is_err());
        c.scale = 0.001;
        c.limit_max = -1.0;
        assert!(c.validate().is_err());
    }
}
