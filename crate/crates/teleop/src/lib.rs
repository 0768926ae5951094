//! Command-line tools and the teleoperation daemon for the Echo rig.

pub mod cli;
pub mod inspect;
pub mod service;
pub mod transport;
