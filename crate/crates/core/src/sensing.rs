//! Raw channel values to physical quantities.
//!
//! Joint potentiometers use a per-channel affine map. The grip force travels
//! through the force-sensor linearization stage: the sensor is the input of an
//! inverting current-to-voltage converter, so `V_OUT = V_REF * (-R_G / R_FS)`.
//! With the sensor conductance affine in force, the output is affine in force too.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    ChannelCalibration, ForceChannelParams, Sign, TriggerCalibration, ADC_MAX, JOINTS,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensingError {
    #[error("adc counts {0} exceed the 12-bit range")]
    CountsOutOfRange(u16),
    #[error("sensor resistance must be positive, got {0} ohm")]
    NonPositiveResistance(f64),
    #[error("force {force} N outside [0, {f_max}] N")]
    ForceOutOfRange { force: f64, f_max: f64 },
}

/// Potentiometer electrical travel assumed by the default calibration.
pub const POT_TRAVEL_DEG: f64 = 300.0;
/// Counts across the full potentiometer travel.
pub const ADC_SPAN: f64 = 4096.0;

/// Radians per count for the default potentiometer.
pub fn default_pot_scale() -> f64 {
    POT_TRAVEL_DEG.to_radians() / ADC_SPAN
}

/// Force-sensitive resistor: conductance `g0 + c * F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsrModel {
    /// Conductance at zero force, siemens.
    pub g0: f64,
    /// Siemens per newton.
    pub c: f64,
}

impl FsrModel {
    /// Model whose full-scale force drives the stage to exactly `-V_REF`, with no zero-force leakage.
    pub fn full_scale(params: &ForceChannelParams) -> FsrModel {
        FsrModel {
            g0: 0.0,
            c: 1.0 / (params.r_g * params.f_max),
        }
    }

    pub fn conductance(&self, force: f64) -> f64 {
        self.g0 + self.c * force
    }

    /// Sensor resistance at `force`; infinite when the conductance is zero.
    pub fn resistance(&self, force: f64) -> f64 {
        1.0 / self.conductance(force)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.g0 >= 0.0 && self.g0.is_finite()) {
            return Err(format!("g0 must be non-negative, got {}", self.g0));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(format!("c must be strictly positive, got {}", self.c));
        }
        Ok(())
    }
}

/// `angle = sign * (counts - offset) * scale`. Not clamped.
pub fn adc_to_angle(counts: u16, cal: &ChannelCalibration) -> Result<f64, SensingError> {
    affine(counts, cal.offset, cal.scale, cal.sign)
}

pub fn trigger_angle(counts: u16, cal: &TriggerCalibration) -> Result<f64, SensingError> {
    affine(counts, cal.offset, cal.scale, cal.sign)
}

fn affine(counts: u16, offset: f64, scale: f64, sign: Sign) -> Result<f64, SensingError> {
    if counts > ADC_MAX {
        return Err(SensingError::CountsOutOfRange(counts));
    }
    Ok(sign.value() * (f64::from(counts) - offset) * scale)
}

/// Continuous inverse of the affine map; the caller quantizes.
pub fn angle_to_counts(angle: f64, offset: f64, scale: f64, sign: Sign) -> f64 {
    offset + sign.value() * angle / scale
}

/// Output of the linearization stage for a sensor resistance.
pub fn linearized_voltage(r_fs: f64, params: &ForceChannelParams) -> Result<f64, SensingError> {
    if !(r_fs > 0.0) {
        return Err(SensingError::NonPositiveResistance(r_fs));
    }
    Ok(params.v_ref * (-params.r_g / r_fs))
}

/// Stage output for an applied force: `-V_REF * R_G * (g0 + c * f)`.
pub fn force_to_voltage(
    force: f64,
    model: &FsrModel,
    params: &ForceChannelParams,
) -> Result<f64, SensingError> {
    if !(0.0..=params.f_max).contains(&force) {
        return Err(SensingError::ForceOutOfRange {
            force,
            f_max: params.f_max,
        });
    }
    Ok(-params.v_ref * params.r_g * model.conductance(force))
}

/// Invert the stage output (either polarity) to newtons, clamped to `[0, f_max]`.
pub fn voltage_to_force(volts: f64, model: &FsrModel, params: &ForceChannelParams) -> f64 {
    let g = volts.abs() / (params.v_ref * params.r_g);
    ((g - model.g0) / model.c).clamp(0.0, params.f_max)
}

/// Wire form of [`voltage_to_force`]: the force board reports `|V_OUT|` in millivolts.
pub fn millivolts_to_force(millivolts: u16, model: &FsrModel, params: &ForceChannelParams) -> f64 {
    voltage_to_force(f64::from(millivolts) / 1000.0, model, params)
}

/// What the force board puts on the wire for a given force: rounded, saturated at `V_REF`.
pub fn force_to_millivolts(
    force: f64,
    model: &FsrModel,
    params: &ForceChannelParams,
) -> Result<u16, SensingError> {
    let v = force_to_voltage(force, model, params)?;
    let mv = (v.abs() * 1000.0).round().min(params.v_ref * 1000.0);
    Ok(mv as u16)
}

/// Everything the host needs to turn a device sample into physical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(rename = "joint")]
    pub joints: Vec<ChannelCalibration>,
    pub trigger: TriggerCalibration,
    pub force: ForceCalibration,
}

/// Force channel section of the calibration file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceCalibration {
    #[serde(default = "default_v_ref")]
    pub v_ref: f64,
    pub r_g: f64,
    pub g0: f64,
    pub c: f64,
    pub f_max: f64,
}

fn default_v_ref() -> f64 {
    3.3
}

impl ForceCalibration {
    pub fn params(&self) -> ForceChannelParams {
        ForceChannelParams {
            v_ref: self.v_ref,
            r_g: self.r_g,
            f_max: self.f_max,
        }
    }

    pub fn model(&self) -> FsrModel {
        FsrModel {
            g0: self.g0,
            c: self.c,
        }
    }
}

impl Default for ForceCalibration {
    fn default() -> Self {
        let params = ForceChannelParams::default();
        let model = FsrModel::full_scale(&params);
        ForceCalibration {
            v_ref: params.v_ref,
            r_g: params.r_g,
            g0: model.g0,
            c: model.c,
            f_max: params.f_max,
        }
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("cannot read calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed calibration file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid calibration: {0}")]
    Invalid(String),
}

impl Default for Calibration {
    /// Mid-scale zero, 300 degrees over 4096 counts, travel limited to the pot range.
    fn default() -> Self {
        let scale = default_pot_scale();
        let half_travel = POT_TRAVEL_DEG.to_radians() / 2.0;
        let joint = ChannelCalibration {
            offset: 2048.0,
            scale,
            sign: Sign::Positive,
            limit_min: -half_travel,
            limit_max: half_travel,
        };
        Calibration {
            joints: vec![joint; JOINTS],
            trigger: TriggerCalibration {
                offset: 2048.0,
                scale,
                sign: Sign::Positive,
                closed: 0.0,
                open: 0.5,
            },
            force: ForceCalibration::default(),
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.joints.len() != JOINTS {
            return Err(CalibrationError::Invalid(format!(
                "expected {JOINTS} joint sections, found {}",
                self.joints.len()
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            j.validate()
                .map_err(|e| CalibrationError::Invalid(format!("joint {i}: {e}")))?;
        }
        self.trigger.validate().map_err(CalibrationError::Invalid)?;
        self.force.params().validate().map_err(CalibrationError::Invalid)?;
        self.force.model().validate().map_err(CalibrationError::Invalid)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Calibration, CalibrationError> {
        let cal: Calibration = toml::from_str(text)?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn to_toml_string(&self) -> String {
        let body = toml::to_string(self).expect("calibration always serializes");
        format!("# Echo leader calibration\n{body}")
    }

    pub fn load(path: &Path) -> Result<Calibration, CalibrationError> {
        Calibration::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Joint angle in radians for channel `i`.
    pub fn joint_angle(&self, i: usize, counts: u16) -> Result<f64, SensingError> {
        adc_to_angle(counts, &self.joints[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn default_channel() -> ChannelCalibration {
        Calibration::default().joints[0]
    }

    #[test]
    fn offset_maps_to_zero() {
        let cal = default_channel();
        assert_eq!(adc_to_angle(2048, &cal).unwrap(), 0.0);
    }

    #[test]
    fn fifty_degrees() {
        let cal = default_channel();
        let angle = adc_to_angle(2048 + 683, &cal).unwrap();
        // independent route: count delta times degrees-per-count, then to radians
        let degrees = 683.0 * (300.0 / 4096.0);
        assert!((angle - degrees * PI / 180.0).abs() < 1e-12);
        assert!((angle - 0.8727).abs() < 1e-3);
        assert!((degrees - 50.0).abs() < 0.05);
    }

    #[test]
    fn negative_sign_mirrors() {
        let pos = default_channel();
        let neg = ChannelCalibration {
            sign: Sign::Negative,
            ..pos
        };
        for counts in [0u16, 100, 2048, 3000, 4095] {
            assert_eq!(
                adc_to_angle(counts, &neg).unwrap(),
                -adc_to_angle(counts, &pos).unwrap()
            );
        }
    }

    #[test]
    fn counts_out_of_range() {
        assert_eq!(
            adc_to_angle(4096, &default_channel()),
            Err(SensingError::CountsOutOfRange(4096))
        );
    }

    #[test]
    fn adc_map_is_affine() {
        let cal = ChannelCalibration {
            offset: 1234.5,
            scale: 0.0011,
            sign: Sign::Negative,
            limit_min: -1.0,
            limit_max: 1.0,
        };
        let zero = adc_to_angle(0, &cal).unwrap();
        for a in (0..2048u16).step_by(37) {
            for b in (0..2047u16).step_by(53) {
                let lhs = adc_to_angle(a + b, &cal).unwrap();
                let rhs = adc_to_angle(a, &cal).unwrap() + adc_to_angle(b, &cal).unwrap() - zero;
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linearized_voltage_examples() {
        let p = ForceChannelParams::default();
        assert_eq!(linearized_voltage(p.r_g, &p).unwrap(), -3.3);
        assert!((linearized_voltage(2.0 * p.r_g, &p).unwrap() + 1.65).abs() < 1e-15);
        assert!(linearized_voltage(1e9 * p.r_g, &p).unwrap().abs() < 1e-8);
        assert_eq!(
            linearized_voltage(0.0, &p),
            Err(SensingError::NonPositiveResistance(0.0))
        );
        assert!(linearized_voltage(-5.0, &p).is_err());
    }

    #[test]
    fn default_model_half_scale() {
        let p = ForceChannelParams::default();
        // c solved from the full-scale condition: V_REF * R_G * c * 20 N = 3.3 V
        let c = 3.3 / (p.v_ref * p.r_g * 20.0);
        let m = FsrModel::full_scale(&p);
        assert!((m.c - c).abs() < 1e-20);
        assert!((force_to_voltage(10.0, &m, &p).unwrap() + 1.65).abs() < 1e-12);
        assert!((force_to_voltage(20.0, &m, &p).unwrap() + 3.3).abs() < 1e-12);
        assert_eq!(force_to_voltage(0.0, &m, &p).unwrap(), 0.0);
        assert!((millivolts_to_force(3300, &m, &p) - 20.0).abs() < 1e-9);
        assert_eq!(millivolts_to_force(0, &m, &p), 0.0);
    }

    #[test]
    fn force_to_voltage_is_affine_with_leakage() {
        let p = ForceChannelParams::default();
        let m = FsrModel { g0: 2e-6, c: 4e-6 };
        let v0 = force_to_voltage(0.0, &m, &p).unwrap();
        for f in [0.5, 1.0, 3.3, 7.0] {
            let v1 = force_to_voltage(f, &m, &p).unwrap();
            let v2 = force_to_voltage(2.0 * f, &m, &p).unwrap();
            assert!(((v2 - v0) - 2.0 * (v1 - v0)).abs() < 1e-12);
        }
    }

    #[test]
    fn force_to_voltage_composes_with_resistance() {
        let p = ForceChannelParams::default();
        let m = FsrModel::full_scale(&p);
        for f in [0.1, 1.0, 5.0, 19.9] {
            let via_r = linearized_voltage(m.resistance(f), &p).unwrap();
            assert!((via_r - force_to_voltage(f, &m, &p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn force_out_of_range() {
        let p = ForceChannelParams::default();
        let m = FsrModel::full_scale(&p);
        assert!(force_to_voltage(-0.1, &m, &p).is_err());
        assert!(force_to_voltage(20.1, &m, &p).is_err());
    }

    #[test]
    fn voltage_to_force_clamps() {
        let p = ForceChannelParams::default();
        let m = FsrModel { g0: 1e-6, c: 5e-6 };
        assert_eq!(voltage_to_force(0.0, &m, &p), 0.0);
        assert_eq!(voltage_to_force(-100.0, &m, &p), p.f_max);
    }

    #[test]
    fn millivolt_encoding_saturates() {
        let p = ForceChannelParams::default();
        let m = FsrModel { g0: 1e-5, c: 5e-6 };
        assert_eq!(force_to_millivolts(20.0, &m, &p).unwrap(), 3300);
        let m = FsrModel::full_scale(&p);
        assert_eq!(force_to_millivolts(10.0, &m, &p).unwrap(), 1650);
    }

    #[test]
    fn calibration_file_round_trip() {
        let mut cal = Calibration::default();
        cal.joints[2].sign = Sign::Negative;
        cal.joints[4].offset = 1999.25;
        let text = cal.to_toml_string();
        assert!(text.contains("[[joint]]"));
        assert!(text.contains("[force]"));
        assert_eq!(Calibration::from_toml_str(&text).unwrap(), cal);
    }

    #[test]
    fn calibration_rejects_bad_sections() {
        let mut cal = Calibration::default();
        cal.joints.pop();
        assert!(Calibration::from_toml_str(&cal.to_toml_string()).is_err());
        let mut cal = Calibration::default();
        cal.force.c = 0.0;
        assert!(Calibration::from_toml_str(&cal.to_toml_string()).is_err());
        let text = Calibration::default().to_toml_string().replace("sign = 1", "sign = 0");
        assert!(Calibration::from_toml_str(&text).is_err());
    }
}
