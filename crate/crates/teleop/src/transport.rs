//! Device links: a real serial port or the in-process simulator. Both carry the
//! same protocol bytes; the session cannot tell them apart.

use std::fmt;
use std::io::{self, Read, Write};
use std::time::Duration;

use echo_core::kinematics::JointLimits;
use echo_core::sensing::Calibration;
use echo_core::sim::{FollowerParams, FollowerSim, Hardware, ScenarioConfig, ScenarioKind, SimRig};
use echo_core::types::{JointVector, SlaveCommand};

pub const DEFAULT_BAUD: u32 = 115_200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportSpec {
    Serial { path: String, baud: u32 },
    Sim(ScenarioKind),
}

impl TransportSpec {
    /// `sim`, `sim:<scenario>` or a serial device path.
    pub fn parse(text: &str, baud: u32) -> Result<TransportSpec, String> {
        match text.strip_prefix("sim") {
            Some("") => Ok(TransportSpec::Sim(ScenarioKind::Wave)),
            Some(rest) if rest.starts_with(':') => ScenarioKind::from_name(&rest[1..])
                .map(TransportSpec::Sim)
                .ok_or_else(|| format!("unknown sim scenario {:?} (egg, demo, wave)", &rest[1..])),
            _ if text.is_empty() => Err("empty transport name".into()),
            _ => Ok(TransportSpec::Serial {
                path: text.to_string(),
                baud,
            }),
        }
    }

    pub fn is_sim(&self) -> bool {
        matches!(self, TransportSpec::Sim(_))
    }
}

impl fmt::Display for TransportSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportSpec::Serial { path, baud } => write!(f, "{path}@{baud}"),
            TransportSpec::Sim(kind) => write!(f, "sim:{}", kind.name()),
        }
    }
}

/// The Echo board on a serial port. The follower arm is not driven from here,
/// so its state is mirrored by a first-order model fed with the same commands.
pub struct SerialHardware {
    port: Box<dyn serialport::SerialPort>,
    follower: FollowerSim,
    buf: Vec<u8>,
}

impl SerialHardware {
    pub fn open(path: &str, baud: u32, params: FollowerParams, limits: JointLimits) -> io::Result<Self> {
        let port = serialport::new(path, baud)
            .timeout(Duration::from_millis(1))
            .open()
            .map_err(io::Error::from)?;
        Ok(SerialHardware {
            port,
            follower: FollowerSim::new(params, limits, JointVector::ZERO, 1.0),
            buf: vec![0; 4096],
        })
    }
}

impl Hardware for SerialHardware {
    fn read(&mut self, _t_us: u64) -> io::Result<Vec<u8>> {
        let mut out = Vec::new();
        loop {
            match self.port.read(&mut self.buf) {
                Ok(0) => break,
                Ok(n) => {
                    out.extend_from_slice(&self.buf[..n]);
                    if n < self.buf.len() {
                        break;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::TimedOut => break,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn write(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.port.write_all(bytes)
    }

    fn measured(&self) -> (JointVector, f64) {
        (self.follower.q(), self.follower.gripper())
    }

    fn command_follower(&mut self, cmd: &SlaveCommand, dt: f64) {
        self.follower.step(cmd, dt);
    }
}

pub fn open_hardware(
    spec: &TransportSpec,
    scenario: &ScenarioConfig,
    calibration: &Calibration,
) -> io::Result<Box<dyn Hardware>> {
    Ok(match spec {
        TransportSpec::Sim(kind) => Box::new(SimRig::new(scenario, *kind, calibration)),
        TransportSpec::Serial { path, baud } => Box::new(SerialHardware::open(
            path,
            *baud,
            scenario.follower_params(),
            scenario.limits(),
        )?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        assert_eq!(TransportSpec::parse("sim", 9600), Ok(TransportSpec::Sim(ScenarioKind::Wave)));
        assert_eq!(
            TransportSpec::parse("sim:egg", 9600),
            Ok(TransportSpec::Sim(ScenarioKind::Egg))
        );
        assert!(TransportSpec::parse("sim:nope", 9600).is_err());
        assert!(TransportSpec::parse("", 9600).is_err());
        assert_eq!(
            TransportSpec::parse("/dev/ttyACM0", 9600),
            Ok(TransportSpec::Serial {
                path: "/dev/ttyACM0".into(),
                baud: 9600
            })
        );
        assert_eq!(TransportSpec::parse("sim:demo", 1).unwrap().to_string(), "sim:demo");
    }

    #[test]
    fn missing_port_fails_to_open() {
        let spec = TransportSpec::parse("/dev/echo-does-not-exist", DEFAULT_BAUD).unwrap();
        assert!(open_hardware(&spec, &ScenarioConfig::default(), &Calibration::default()).is_err());
    }
}
