use super::command::{parse_command, Axis, Command, Response};
use serde::{Deserialize, Serialize};

/// Static per-axis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisLimits {
    pub neg_limit: i64,
    pub pos_limit: i64,
    pub default_velocity: i64,
}

impl Default for AxisLimits {
    fn default() -> Self {
        AxisLimits {
            neg_limit: -1_000_000,
            pos_limit: 1_000_000,
            default_velocity: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisState {
    /// Physical position in steps (limits apply here).
    pub position: i64,
    pub velocity: i64,
    pub target: Option<i64>,
    pub neg_limit: i64,
    pub pos_limit: i64,
    /// Physical position that reads as zero.
    pub zero_offset: i64,
    pub estopped: bool,
    /// Set when a move target was clamped; reported once by the next position query.
    pub limit_pending: bool,
    carry: f64,
}

impl AxisState {
    pub fn new(limits: AxisLimits) -> Self {
        AxisState {
            position: 0,
            velocity: limits.default_velocity.max(1),
            target: None,
            neg_limit: limits.neg_limit,
            pos_limit: limits.pos_limit,
            zero_offset: 0,
            estopped: false,
            limit_pending: false,
            carry: 0.0,
        }
    }

    /// Position as reported to the host.
    pub fn reported(&self) -> i64 {
        self.position.saturating_sub(self.zero_offset)
    }

    pub fn is_moving(&self) -> bool {
        self.target.is_some()
    }

    fn start_move(&mut self, physical_target: i64, report_clamp: bool) {
        let clamped = physical_target.clamp(self.neg_limit, self.pos_limit);
        if report_clamp && clamped != physical_target {
            self.limit_pending = true;
        }
        self.estopped = false;
        self.carry = 0.0;
        self.target = if clamped == self.position {
            None
        } else {
            Some(clamped)
        };
    }

    fn stop(&mut self) {
        self.target = None;
        self.carry = 0.0;
        self.estopped = true;
    }

    fn tick(&mut self, dt: f64) {
        let Some(target) = self.target else {
            return;
        };
        if self.estopped || dt <= 0.0 {
            return;
        }
        let budget = self.velocity as f64 * dt + self.carry;
        let whole = budget.floor();
        let remaining = target.abs_diff(self.position);
        if whole >= remaining as f64 {
            self.position = target;
            self.target = None;
            self.carry = 0.0;
        } else {
            let steps = whole as i64;
            self.carry = budget - whole;
            if target > self.position {
                self.position += steps;
            } else {
                self.position -= steps;
            }
        }
    }
}

/// One emulated three-axis stepper controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    /// Serial channel number 1..=8 (COM1..COM8).
    pub id: u8,
    pub connected: bool,
    pub axes: [AxisState; 3],
}

impl ControllerState {
    pub fn new(id: u8) -> Self {
        ControllerState::with_limits(id, [AxisLimits::default(); 3])
    }

    pub fn with_limits(id: u8, limits: [AxisLimits; 3]) -> Self {
        ControllerState {
            id,
            connected: false,
            axes: limits.map(AxisState::new),
        }
    }

    pub fn axis(&self, a: Axis) -> &AxisState {
        &self.axes[a.index()]
    }

    fn axis_mut(&mut self, a: Axis) -> &mut AxisState {
        &mut self.axes[a.index()]
    }

    pub fn is_moving(&self) -> bool {
        self.axes.iter().any(AxisState::is_moving)
    }

    /// Applies one command and returns the controller's reply.
    pub fn execute(&mut self, cmd: Command) -> Response {
        if cmd == Command::Connect {
            self.connected = true;
            return Response::Ok;
        }
        if !self.connected {
            return Response::NotConnected;
        }
        match cmd {
            Command::Connect => unreachable!(),
            Command::PositionQuery(a) => {
                let axis = self.axis_mut(a);
                if axis.limit_pending {
                    axis.limit_pending = false;
                    Response::LimitReached
                } else {
                    Response::Position(a, axis.reported())
                }
            }
            Command::VelocityQuery(a) => Response::Velocity(a, self.axis(a).velocity),
            Command::SetVelocity(a, v) => {
                if v <= 0 {
                    return Response::BadCommand;
                }
                self.axis_mut(a).velocity = v;
                Response::Ok
            }
            Command::MoveAbsolute(a, n) => {
                let axis = self.axis_mut(a);
                let target = n.saturating_add(axis.zero_offset);
                axis.start_move(target, true);
                Response::Ok
            }
            Command::MoveRelative(a, n) => {
                let axis = self.axis_mut(a);
                let target = axis.position.saturating_add(n);
                axis.start_move(target, true);
                Response::Ok
            }
            Command::MoveNegLimit(a) => {
                let axis = self.axis_mut(a);
                let target = axis.neg_limit;
                axis.start_move(target, false);
                Response::Ok
            }
            Command::MovePosLimit(a) => {
                let axis = self.axis_mut(a);
                let target = axis.pos_limit;
                axis.start_move(target, false);
                Response::Ok
            }
            Command::ZeroPosition(a) => {
                let axis = self.axis_mut(a);
                axis.zero_offset = axis.position;
                Response::Ok
            }
            Command::EmergencyStopAll => {
                self.axes.iter_mut().for_each(AxisState::stop);
                Response::Ok
            }
            Command::EmergencyStopAxis(a) => {
                self.axis_mut(a).stop();
                Response::Ok
            }
        }
    }

    /// Parses and executes raw bytes; malformed input yields `ERR=CMD/`.
    pub fn execute_bytes(&mut self, bytes: &[u8]) -> Response {
        match parse_command(bytes) {
            Ok(cmd) => self.execute(cmd),
            Err(_) => Response::BadCommand,
        }
    }

    /// Advances every moving axis by `dt` seconds at its set velocity.
    pub fn tick(&mut self, dt: f64) {
        if dt > 0.0 && dt.is_finite() {
            self.axes.iter_mut().for_each(|a| a.tick(dt));
        }
    }
}
