//! Host-side stack for the Echo joint-matching teleoperation rig.

pub mod calibrate;
pub mod control;
pub mod kinematics;
pub mod protocol;
pub mod recorder;
pub mod sensing;
pub mod session;
pub mod sim;
pub mod types;
