//! Guided calibration: capture the zero posture, both mechanical endpoints of
//! every joint and the squeezed trigger, then derive a [`Calibration`].
//!
//! The potentiometer scale cannot be observed without a reference angle, so it
//! is taken as given; offsets, directions, limits and the trigger range are measured.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::{FrameParser, Message};
use crate::sensing::{Calibration, ForceCalibration};
use crate::sim::{LeaderScript, VirtualDevice};
use crate::types::{
    ChannelCalibration, JointVector, MasterState, Sign, TriggerCalibration, ADC_CHANNELS, JOINTS,
};

/// Endpoints closer than this to the zero reading are treated as "did not move".
pub const MIN_TRAVEL_COUNTS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationStep {
    /// All joints at the follower's zero posture, trigger released.
    ZeroPosture,
    /// One joint at its positive mechanical stop, the others at zero.
    JointPositive(usize),
    JointNegative(usize),
    /// Zero posture with the trigger squeezed fully.
    TriggerSqueezed,
}

impl CalibrationStep {
    pub fn prompt(&self) -> String {
        match self {
            CalibrationStep::ZeroPosture => {
                "Hold the arm in the follower's zero posture with the trigger released".into()
            }
            CalibrationStep::JointPositive(j) => {
                format!("Move joint {} to its positive stop, others at zero", j + 1)
            }
            CalibrationStep::JointNegative(j) => {
                format!("Move joint {} to its negative stop, others at zero", j + 1)
            }
            CalibrationStep::TriggerSqueezed => "Return to zero and squeeze the trigger fully".into(),
        }
    }
}

pub fn calibration_steps() -> Vec<CalibrationStep> {
    let mut steps = vec![CalibrationStep::ZeroPosture];
    for j in 0..JOINTS {
        steps.push(CalibrationStep::JointPositive(j));
        steps.push(CalibrationStep::JointNegative(j));
    }
    steps.push(CalibrationStep::TriggerSqueezed);
    steps
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrateError {
    #[error("no joint reports captured for this step")]
    NoSamples,
    #[error("all steps are already captured")]
    AlreadyComplete,
    #[error("calibration incomplete: {0} steps left")]
    Incomplete(usize),
    #[error("joint {joint}: endpoints must lie on both sides of zero, at least {MIN_TRAVEL_COUNTS} counts away")]
    BadEndpoints { joint: usize },
    #[error("trigger did not move between released and squeezed")]
    TriggerNotMoved,
}

/// Step-by-step capture. Each step averages the counts of the reports it is given.
#[derive(Debug, Clone)]
pub struct CalibrationWizard {
    scale: f64,
    force: ForceCalibration,
    steps: Vec<CalibrationStep>,
    captured: Vec<[f64; ADC_CHANNELS]>,
}

impl CalibrationWizard {
    pub fn new(scale: f64, force: ForceCalibration) -> Self {
        CalibrationWizard {
            scale,
            force,
            steps: calibration_steps(),
            captured: Vec::new(),
        }
    }

    pub fn current(&self) -> Option<CalibrationStep> {
        self.steps.get(self.captured.len()).copied()
    }

    pub fn capture(&mut self, samples: &[MasterState]) -> Result<(), CalibrateError> {
        if self.current().is_none() {
            return Err(CalibrateError::AlreadyComplete);
        }
        if samples.is_empty() {
            return Err(CalibrateError::NoSamples);
        }
        let n = samples.len() as f64;
        let mean = std::array::from_fn(|i| samples.iter().map(|s| f64::from(s.adc[i])).sum::<f64>() / n);
        self.captured.push(mean);
        Ok(())
    }

    fn reading(&self, step: CalibrationStep) -> [f64; ADC_CHANNELS] {
        let idx = self.steps.iter().position(|s| *s == step).expect("known step");
        self.captured[idx]
    }

    pub fn finish(&self) -> Result<Calibration, CalibrateError> {
        let left = self.steps.len() - self.captured.len();
        if left > 0 {
            return Err(CalibrateError::Incomplete(left));
        }
        let zero = self.reading(CalibrationStep::ZeroPosture);
        let joints = (0..JOINTS)
            .map(|j| {
                let up = self.reading(CalibrationStep::JointPositive(j))[j] - zero[j];
                let down = self.reading(CalibrationStep::JointNegative(j))[j] - zero[j];
                if up * down >= 0.0 || up.abs() < MIN_TRAVEL_COUNTS || down.abs() < MIN_TRAVEL_COUNTS {
                    return Err(CalibrateError::BadEndpoints { joint: j });
                }
                Ok(ChannelCalibration {
                    offset: zero[j],
                    scale: self.scale,
                    sign: if up > 0.0 { Sign::Positive } else { Sign::Negative },
                    limit_min: -down.abs() * self.scale,
                    limit_max: up.abs() * self.scale,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let squeeze = self.reading(CalibrationStep::TriggerSqueezed)[JOINTS] - zero[JOINTS];
        if squeeze.abs() < MIN_TRAVEL_COUNTS {
            return Err(CalibrateError::TriggerNotMoved);
        }
        Ok(Calibration {
            joints,
            trigger: TriggerCalibration {
                offset: zero[JOINTS],
                scale: self.scale,
                sign: if squeeze > 0.0 { Sign::Positive } else { Sign::Negative },
                closed: squeeze.abs() * self.scale,
                open: 0.0,
            },
            force: self.force,
        })
    }
}

/// Leader motion that walks through [`calibration_steps`] for a device whose
/// true calibration is `truth`, spending `hold_s` on each step. Also returns the
/// settled capture window `(start_s, end_s)` of every step.
pub fn calibration_script(truth: &Calibration, hold_s: f64) -> (LeaderScript, Vec<(f64, f64)>) {
    let mut frames = Vec::new();
    let mut windows = Vec::new();
    for (k, step) in calibration_steps().into_iter().enumerate() {
        let mut q = JointVector::ZERO;
        let mut gripper = 1.0;
        match step {
            CalibrationStep::ZeroPosture => {}
            CalibrationStep::JointPositive(j) => q[j] = truth.joints[j].limit_max,
            CalibrationStep::JointNegative(j) => q[j] = truth.joints[j].limit_min,
            CalibrationStep::TriggerSqueezed => gripper = 0.0,
        }
        let t0 = k as f64 * hold_s;
        frames.push((t0 + 0.3 * hold_s, q, gripper));
        frames.push((t0 + hold_s, q, gripper));
        windows.push((t0 + 0.5 * hold_s, t0 + hold_s));
    }
    (LeaderScript::Keyframes(frames), windows)
}

/// Run the whole procedure against a simulated device built from `truth`.
pub fn calibrate_simulated(truth: &Calibration, noise: u16, seed: u64) -> Result<Calibration, CalibrateError> {
    const DT_US: u64 = 10_000;
    let hold_s = 1.0;
    let (script, windows) = calibration_script(truth, hold_s);
    let mut device = VirtualDevice::new(
        truth.clone(),
        script,
        Vec::new(),
        noise,
        ChaCha8Rng::seed_from_u64(seed),
        0.0,
    );
    let mut parser = FrameParser::new();
    let scale = truth.joints[0].scale;
    let mut wizard = CalibrationWizard::new(scale, truth.force);
    let mut t_us = 0;
    for (start, end) in windows {
        let mut samples = Vec::new();
        while (t_us as f64) < end * 1e6 {
            for msg in parser.feed(&device.device_step(t_us)).messages {
                if let Message::JointReport { seq, adc, buttons } = msg {
                    if t_us as f64 >= start * 1e6 {
                        samples.push(MasterState {
                            seq,
                            adc,
                            buttons: crate::types::Buttons(buttons),
                            rx_time_us: t_us,
                        });
                    }
                }
            }
            t_us += DT_US;
        }
        wizard.capture(&samples)?;
    }
    wizard.finish()
}
