//! Follower forward kinematics (standard Denavit-Hartenberg) and joint-limit handling.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{JointVector, Pose, JOINTS};

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("cannot read DH table: {0}")]
    Io(#[from] std::io::Error),
    #[error("DH table line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("DH table must have exactly {JOINTS} rows, found {0}")]
    RowCount(usize),
}

/// One standard DH link: `Rz(theta) * Tz(d) * Tx(a) * Rx(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DhTable {
    pub rows: [DhRow; JOINTS],
}

impl DhTable {
    /// Universal Robots UR3.
    pub fn ur3() -> DhTable {
        let row = |a, alpha, d| DhRow {
            a,
            alpha,
            d,
            theta_offset: 0.0,
        };
        DhTable {
            rows: [
                row(0.0, PI / 2.0, 0.1519),
                row(-0.24365, 0.0, 0.0),
                row(-0.21325, 0.0, 0.0),
                row(0.0, PI / 2.0, 0.11235),
                row(0.0, -PI / 2.0, 0.08535),
                row(0.0, 0.0, 0.0819),
            ],
        }
    }

    /// Upper bound on the distance from the base origin to the flange.
    pub fn reach(&self) -> f64 {
        self.rows.iter().map(|r| r.a.abs() + r.d.abs()).sum()
    }

    /// Six non-comment lines of `a alpha d theta_offset`.
    pub fn parse(text: &str) -> Result<DhTable, KinematicsError> {
        let mut rows = Vec::with_capacity(JOINTS);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let values = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| KinematicsError::Malformed {
                    line: idx + 1,
                    msg: e.to_string(),
                })?;
            let [a, alpha, d, theta_offset] = values[..] else {
                return Err(KinematicsError::Malformed {
                    line: idx + 1,
                    msg: format!("expected 4 values, found {}", values.len()),
                });
            };
            if values.iter().any(|v| !v.is_finite()) {
                return Err(KinematicsError::Malformed {
                    line: idx + 1,
                    msg: "non-finite value".into(),
                });
            }
            rows.push(DhRow {
                a,
                alpha,
                d,
                theta_offset,
            });
        }
        let rows: [DhRow; JOINTS] = rows
            .try_into()
            .map_err(|r: Vec<DhRow>| KinematicsError::RowCount(r.len()))?;
        Ok(DhTable { rows })
    }

    pub fn load(path: &Path) -> Result<DhTable, KinematicsError> {
        DhTable::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# a alpha d theta_offset (m, rad, m, rad)\n");
        for r in &self.rows {
            let _ = writeln!(out, "{} {} {} {}", r.a, r.alpha, r.d, r.theta_offset);
        }
        out
    }
}

impl Default for DhTable {
    fn default() -> Self {
        DhTable::ur3()
    }
}

fn link_transform(row: &DhRow, q: f64) -> Isometry3<f64> {
    let theta = q + row.theta_offset;
    let (s, c) = theta.sin_cos();
    let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), row.alpha);
    Isometry3::from_parts(Translation3::new(row.a * c, row.a * s, row.d), rotation)
}

/// Flange pose in the base frame. Quaternion is normalized with `w >= 0`.
pub fn forward_kinematics(q: &JointVector, dh: &DhTable) -> Pose {
    let flange = dh
        .rows
        .iter()
        .zip(q.iter())
        .fold(Isometry3::identity(), |acc, (row, &qi)| {
            acc * link_transform(row, qi)
        });
    let t = flange.translation.vector;
    let r = flange.rotation.into_inner().normalize();
    let mut orientation = [r.w, r.i, r.j, r.k];
    if orientation[0] < 0.0 {
        orientation = orientation.map(|v| -v);
    }
    Pose {
        position: [t.x, t.y, t.z],
        orientation,
    }
}

/// Per-joint position limits and a shared velocity limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub min: [f64; JOINTS],
    pub max: [f64; JOINTS],
    /// rad/s
    pub max_velocity: f64,
}

impl JointLimits {
    pub fn uniform(min: f64, max: f64, max_velocity: f64) -> JointLimits {
        JointLimits {
            min: [min; JOINTS],
            max: [max; JOINTS],
            max_velocity,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for i in 0..JOINTS {
            if !(self.min[i] < self.max[i]) {
                return Err(format!("joint {i}: min {} not below max {}", self.min[i], self.max[i]));
            }
        }
        if !(self.max_velocity > 0.0 && self.max_velocity.is_finite()) {
            return Err(format!("max velocity must be positive, got {}", self.max_velocity));
        }
        Ok(())
    }

    pub fn contains(&self, q: &JointVector) -> bool {
        (0..JOINTS).all(|i| q[i] >= self.min[i] && q[i] <= self.max[i])
    }
}

impl Default for JointLimits {
    /// UR3-style: a full turn each way, 180 deg/s.
    fn default() -> Self {
        JointLimits::uniform(-2.0 * PI, 2.0 * PI, PI)
    }
}

/// Clamp every joint into its limits. NaN inputs land on the lower limit.
pub fn clamp_to_limits(q: &JointVector, limits: &JointLimits) -> JointVector {
    JointVector(std::array::from_fn(|i| {
        let v = q[i];
        if v.is_nan() {
            limits.min[i]
        } else {
            v.clamp(limits.min[i], limits.max[i])
        }
    }))
}

/// Move each joint toward `next` by at most `v_max * dt`.
pub fn max_step(prev: &JointVector, next: &JointVector, v_max: f64, dt: f64) -> JointVector {
    let limit = v_max * dt;
    JointVector(std::array::from_fn(|i| {
        let delta = next[i] - prev[i];
        if delta.abs() <= limit {
            next[i]
        } else {
            prev[i] + limit.copysign(delta)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pose_of_ur3() {
        let p = forward_kinematics(&JointVector::ZERO, &DhTable::ur3());
        // at q = 0 the UR3 lies stretched along -x with the wrist offsets
        let expected = [-0.24365 - 0.21325, -(0.11235 + 0.0819), 0.1519 - 0.08535];
        for k in 0..3 {
            assert!((p.position[k] - expected[k]).abs() < 1e-12, "{:?}", p.position);
        }
        assert!((p.quaternion_norm() - 1.0).abs() < 1e-12);
        assert!(p.orientation[0] >= 0.0);
    }

    #[test]
    fn base_rotation_by_pi_mirrors_xy() {
        let dh = DhTable::ur3();
        let q = JointVector([0.3, -1.1, 0.7, 0.2, 1.4, -0.5]);
        let mut q_rot = q;
        q_rot[0] += PI;
        let a = forward_kinematics(&q, &dh);
        let b = forward_kinematics(&q_rot, &dh);
        assert!((b.position[0] + a.position[0]).abs() < 1e-12);
        assert!((b.position[1] + a.position[1]).abs() < 1e-12);
        assert!((b.position[2] - a.position[2]).abs() < 1e-12);
    }

    #[test]
    fn fk_is_deterministic() {
        let dh = DhTable::ur3();
        let q = JointVector([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(forward_kinematics(&q, &dh), forward_kinematics(&q, &dh));
    }

    #[test]
    fn dh_text_round_trip() {
        let dh = DhTable::ur3();
        assert_eq!(DhTable::parse(&dh.to_text()).unwrap(), dh);
    }

    #[test]
    fn dh_parse_errors() {
        assert!(matches!(
            DhTable::parse("0 0 0 0\n"),
            Err(KinematicsError::RowCount(1))
        ));
        let bad = "0 0 0\n".repeat(6);
        assert!(matches!(
            DhTable::parse(&bad),
            Err(KinematicsError::Malformed { line: 1, .. })
        ));
        let nan = format!("{}0 x 0 0\n", "0 0 0 0\n".repeat(5));
        assert!(matches!(
            DhTable::parse(&nan),
            Err(KinematicsError::Malformed { line: 6, .. })
        ));
    }

    #[test]
    fn clamp_examples() {
        let lim = JointLimits::uniform(-1.0, 1.0, 1.0);
        let inside = JointVector([0.5, -0.5, 0.0, 0.9, -0.9, 1.0]);
        assert_eq!(clamp_to_limits(&inside, &lim), inside);
        let huge = JointVector([1e300, -1e300, f64::INFINITY, f64::NEG_INFINITY, 2.0, -2.0]);
        let c = clamp_to_limits(&huge, &lim);
        assert_eq!(c, JointVector([1.0, -1.0, 1.0, -1.0, 1.0, -1.0]));
        assert_eq!(clamp_to_limits(&c, &lim), c);
    }

    #[test]
    fn max_step_examples() {
        let prev = JointVector::ZERO;
        let near = JointVector([0.005, -0.01, 0.0, 0.01, 0.0, 0.0]);
        assert_eq!(max_step(&prev, &near, 1.0, 0.01), near);
        let far = JointVector([1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let s = max_step(&prev, &far, 1.0, 0.01);
        assert_eq!(s[0], 0.01);
        assert_eq!(s[1], -0.01);
    }

    #[test]
    fn max_step_converges_in_ceil_steps() {
        // delta 0.35 rad at 2 rad/s and 0.1 s steps: ceil(0.35 / 0.2) = 2
        let target = JointVector([0.35, -0.35, 0.1, 0.0, 0.2, 0.25]);
        let mut q = JointVector::ZERO;
        let mut steps = 0;
        while q != target {
            q = max_step(&q, &target, 2.0, 0.1);
            steps += 1;
            assert!(steps < 10);
        }
        assert_eq!(steps, 2);
        // delta 1.0 rad at 1 rad/s and 0.125 s steps: exactly 8 steps
        let target = JointVector([1.0; JOINTS]);
        let mut q = JointVector::ZERO;
        let mut steps = 0;
        while q != target {
            q = max_step(&q, &target, 1.0, 0.125);
            steps += 1;
        }
        assert_eq!(steps, 8);
    }
}
