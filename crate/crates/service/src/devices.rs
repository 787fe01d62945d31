//! The rack of emulated stepper controllers and the translation of
//! operator-level stage commands into protocol commands.

use crate::config::{MotorType, ServiceConfig, StageConfig};
use gratingscope::protocol::{
    serve_tcp, Axis, ClockMode, Command, ControllerHandle, ControllerState, Response, CONTROLLER_COUNT,
};
use serde::{Deserialize, Serialize};
use std::net::{SocketAddr, TcpListener};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageAddress {
    pub device: u8,
    pub motor_type: MotorType,
    pub axis: Axis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageAction {
    MoveRel,
    MoveAbs,
    SetVelocity,
    Query,
    HomePos,
    HomeNeg,
    Zero,
    Stop,
}

impl StageAction {
    pub fn is_motion(self) -> bool {
        matches!(
            self,
            StageAction::MoveRel | StageAction::MoveAbs | StageAction::HomePos | StageAction::HomeNeg
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            StageAction::MoveRel => "move_rel",
            StageAction::MoveAbs => "move_abs",
            StageAction::SetVelocity => "set_velocity",
            StageAction::Query => "query",
            StageAction::HomePos => "home_pos",
            StageAction::HomeNeg => "home_neg",
            StageAction::Zero => "zero",
            StageAction::Stop => "stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRequest {
    #[serde(flatten)]
    pub address: StageAddress,
    pub action: StageAction,
    /// Physical units of the stage (mm, deg, µm; per second for velocity).
    #[serde(default)]
    pub value: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum StageError {
    #[error("no stage at device {device}, {motor_type} axis {axis}")]
    Unresolved { device: u8, motor_type: MotorType, axis: Axis },
    #[error("{action} needs a finite value")]
    MissingValue { action: &'static str },
    #[error("value {value} {unit} is {steps} steps, outside the controller's range")]
    OutOfRange { value: f64, unit: String, steps: f64 },
    #[error("{0}")]
    Unsupported(String),
}

pub fn resolve<'a>(stages: &'a [StageConfig], addr: &StageAddress) -> Result<&'a StageConfig, StageError> {
    stages
        .iter()
        .find(|s| s.device == addr.device && s.motor_type == addr.motor_type && s.axis == addr.axis)
        .ok_or(StageError::Unresolved {
            device: addr.device,
            motor_type: addr.motor_type,
            axis: addr.axis,
        })
}

/// Protocol command for a motor stage; `value` is in the stage's unit.
pub fn translate(stage: &StageConfig, action: StageAction, value: Option<f64>) -> Result<Command, StageError> {
    let a = stage.axis;
    let steps = || -> Result<i64, StageError> {
        let v = value
            .filter(|v| v.is_finite())
            .ok_or(StageError::MissingValue { action: action.name() })?;
        let s = (v * stage.steps_per_unit).round();
        if s.abs() > 1e15 {
            return Err(StageError::OutOfRange {
                value: v,
                unit: stage.unit.clone(),
                steps: s,
            });
        }
        Ok(s as i64)
    };
    Ok(match action {
        StageAction::MoveRel => Command::MoveRelative(a, steps()?),
        StageAction::MoveAbs => Command::MoveAbsolute(a, steps()?),
        StageAction::SetVelocity => {
            let v = steps()?;
            if v <= 0 {
                return Err(StageError::Unsupported("velocity must be at least one step per second".into()));
            }
            Command::SetVelocity(a, v)
        }
        StageAction::Query => Command::PositionQuery(a),
        StageAction::HomePos => Command::MovePosLimit(a),
        StageAction::HomeNeg => Command::MoveNegLimit(a),
        StageAction::Zero => Command::ZeroPosition(a),
        StageAction::Stop => Command::EmergencyStopAxis(a),
    })
}

/// One command sent to a controller, as seen on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub seq: u64,
    pub device: u8,
    pub sent: String,
    pub reply: String,
    pub is_move: bool,
    /// Whether a scan was running when the bytes went out.
    pub scan_running: bool,
}

/// Controllers 1..=8, each owned by its own thread. Every command that
/// reaches a controller through the service is logged.
pub struct MotorBank {
    controllers: Vec<ControllerHandle>,
    log: Mutex<Vec<Emission>>,
    endpoints: Vec<SocketAddr>,
}

impl std::fmt::Debug for MotorBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MotorBank").field("endpoints", &self.endpoints).finish()
    }
}

impl MotorBank {
    /// Spawns and connects the controllers; opens per-controller TCP
    /// endpoints when a base port is configured.
    pub fn start(cfg: &ServiceConfig) -> std::io::Result<Self> {
        let limits = cfg.axis_limits();
        let controllers: Vec<ControllerHandle> = (1..=CONTROLLER_COUNT)
            .map(|id| ControllerHandle::spawn(ControllerState::with_limits(id, [limits; 3]), ClockMode::RealTime))
            .collect();
        for c in &controllers {
            c.execute(Command::Connect);
        }
        let mut endpoints = Vec::new();
        if cfg.network.controller_base_port != 0 {
            for (i, c) in controllers.iter().enumerate() {
                let port = cfg.network.controller_base_port + i as u16;
                let listener = TcpListener::bind((cfg.network.bind.as_str(), port))?;
                endpoints.push(serve_tcp(listener, c.clone())?);
            }
        }
        Ok(MotorBank {
            controllers,
            log: Mutex::new(Vec::new()),
            endpoints,
        })
    }

    pub fn endpoints(&self) -> &[SocketAddr] {
        &self.endpoints
    }

    pub fn handle(&self, device: u8) -> Option<&ControllerHandle> {
        self.controllers.get((device as usize).checked_sub(1)?)
    }

    /// Sends `cmd` to `device` and logs the exchange. The caller passes the
    /// scan state it holds a lock on, so the log is exact.
    pub fn send(&self, device: u8, cmd: Command, scan_running: bool) -> Option<Response> {
        let handle = self.handle(device)?;
        let mut log = self.log.lock().expect("emission log");
        let reply = handle.execute(cmd);
        let seq = log.len() as u64;
        log.push(Emission {
            seq,
            device,
            sent: cmd.to_string(),
            reply: reply.to_string(),
            is_move: cmd.is_move(),
            scan_running,
        });
        Some(reply)
    }

    pub fn emissions(&self) -> Vec<Emission> {
        self.log.lock().expect("emission log").clone()
    }

    pub fn snapshot(&self, device: u8) -> Option<ControllerState> {
        self.handle(device)?.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_stage_map;

    fn stage(device: u8, motor_type: MotorType, axis: Axis) -> StageConfig {
        resolve(&default_stage_map(), &StageAddress { device, motor_type, axis })
            .unwrap()
            .clone()
    }

    #[test]
    fn one_millimetre_is_a_thousand_steps() {
        let s = stage(1, MotorType::Translation, Axis::X);
        let cmd = translate(&s, StageAction::MoveRel, Some(1.0)).unwrap();
        assert_eq!(cmd.to_string(), "X:1000/");
        let cmd = translate(&s, StageAction::MoveAbs, Some(-0.25)).unwrap();
        assert_eq!(cmd.to_string(), "X=-250/");
    }

    #[test]
    fn every_action_maps_to_a_command() {
        let s = stage(7, MotorType::Rotary, Axis::Z);
        let forms: Vec<String> = [
            (StageAction::SetVelocity, Some(2.0)),
            (StageAction::Query, None),
            (StageAction::HomePos, None),
            (StageAction::HomeNeg, None),
            (StageAction::Zero, None),
            (StageAction::Stop, None),
        ]
        .iter()
        .map(|&(a, v)| translate(&s, a, v).unwrap().to_string())
        .collect();
        assert_eq!(forms, ["VZ=200/", "?Z/", "HMZ/", "-HMZ/", "ZZ/", "SZ/"]);
    }

    #[test]
    fn bad_addresses_and_values() {
        let map = default_stage_map();
        let addr = StageAddress {
            device: 9,
            motor_type: MotorType::Translation,
            axis: Axis::X,
        };
        assert!(matches!(resolve(&map, &addr), Err(StageError::Unresolved { device: 9, .. })));
        let wrong_type = StageAddress {
            device: 1,
            motor_type: MotorType::Goniometric,
            axis: Axis::X,
        };
        assert!(resolve(&map, &wrong_type).is_err());
        let s = stage(1, MotorType::Translation, Axis::X);
        assert!(translate(&s, StageAction::MoveRel, None).is_err());
        assert!(translate(&s, StageAction::MoveRel, Some(f64::NAN)).is_err());
        assert!(translate(&s, StageAction::SetVelocity, Some(0.0)).is_err());
    }
}
