use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        }
    }

    fn from_byte(b: u8) -> Option<Axis> {
        match b {
            b'X' => Some(Axis::X),
            b'Y' => Some(Axis::Y),
            b'Z' => Some(Axis::Z),
            _ => None,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "X" | "x" => Ok(Axis::X),
            "Y" | "y" => Ok(Axis::Y),
            "Z" | "z" => Ok(Axis::Z),
            other => Err(format!("unknown axis {other:?}")),
        }
    }
}

/// One controller instruction. Arguments are steps or steps/s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Connect,
    PositionQuery(Axis),
    VelocityQuery(Axis),
    SetVelocity(Axis, i64),
    MoveAbsolute(Axis, i64),
    MoveRelative(Axis, i64),
    MoveNegLimit(Axis),
    MovePosLimit(Axis),
    ZeroPosition(Axis),
    EmergencyStopAll,
    EmergencyStopAxis(Axis),
}

impl Command {
    /// Commands that start motion.
    pub fn is_move(&self) -> bool {
        matches!(
            self,
            Command::MoveAbsolute(..)
                | Command::MoveRelative(..)
                | Command::MoveNegLimit(_)
                | Command::MovePosLimit(_)
        )
    }

    pub fn is_stop(&self) -> bool {
        matches!(self, Command::EmergencyStopAll | Command::EmergencyStopAxis(_))
    }

    pub fn axis(&self) -> Option<Axis> {
        match *self {
            Command::Connect | Command::EmergencyStopAll => None,
            Command::PositionQuery(a)
            | Command::VelocityQuery(a)
            | Command::SetVelocity(a, _)
            | Command::MoveAbsolute(a, _)
            | Command::MoveRelative(a, _)
            | Command::MoveNegLimit(a)
            | Command::MovePosLimit(a)
            | Command::ZeroPosition(a)
            | Command::EmergencyStopAxis(a) => Some(a),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_string().into_bytes()
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Command::Connect => write!(f, "?R/"),
            Command::PositionQuery(a) => write!(f, "?{a}/"),
            Command::VelocityQuery(a) => write!(f, "?V{a}/"),
            Command::SetVelocity(a, n) => write!(f, "V{a}={n}/"),
            Command::MoveAbsolute(a, n) => write!(f, "{a}={n}/"),
            Command::MoveRelative(a, n) => write!(f, "{a}:{n}/"),
            Command::MoveNegLimit(a) => write!(f, "-HM{a}/"),
            Command::MovePosLimit(a) => write!(f, "HM{a}/"),
            Command::ZeroPosition(a) => write!(f, "Z{a}/"),
            Command::EmergencyStopAll => write!(f, "S0/"),
            Command::EmergencyStopAxis(a) => write!(f, "S{a}/"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {position}: {reason}")]
pub struct ParseError {
    pub position: usize,
    pub reason: &'static str,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn fail<T>(&self, reason: &'static str) -> Result<T, ParseError> {
        Err(ParseError {
            position: self.pos,
            reason,
        })
    }

    fn expect(&mut self, b: u8, reason: &'static str) -> Result<(), ParseError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(reason)
        }
    }

    fn axis(&mut self) -> Result<Axis, ParseError> {
        match self.peek().and_then(Axis::from_byte) {
            Some(a) => {
                self.pos += 1;
                Ok(a)
            }
            None => self.fail("expected axis X, Y or Z"),
        }
    }

    fn integer(&mut self) -> Result<i64, ParseError> {
        let start = self.pos;
        let negative = match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                true
            }
            Some(b'+') => {
                self.pos += 1;
                false
            }
            _ => false,
        };
        let digits_start = self.pos;
        let mut value: i64 = 0;
        while let Some(b @ b'0'..=b'9') = self.peek() {
            let digit = (b - b'0') as i64;
            value = match value
                .checked_mul(10)
                .and_then(|v| if negative { v.checked_sub(digit) } else { v.checked_add(digit) })
            {
                Some(v) => v,
                None => {
                    self.pos = start;
                    return self.fail("integer out of range");
                }
            };
            self.pos += 1;
        }
        if self.pos == digits_start {
            return self.fail("expected decimal digits");
        }
        Ok(value)
    }

    fn finish(&mut self, cmd: Command) -> Result<Command, ParseError> {
        self.expect(b'/', "expected terminating '/'")?;
        if self.pos != self.bytes.len() {
            return self.fail("trailing bytes after '/'");
        }
        Ok(cmd)
    }
}

/// Parses exactly one `/`-terminated command. Never panics.
pub fn parse_command(bytes: &[u8]) -> Result<Command, ParseError> {
    let mut c = Cursor { bytes, pos: 0 };
    match c.peek() {
        None => c.fail("empty command"),
        Some(b'?') => {
            c.pos += 1;
            match c.peek() {
                Some(b'R') => {
                    c.pos += 1;
                    c.finish(Command::Connect)
                }
                Some(b'V') => {
                    c.pos += 1;
                    let a = c.axis()?;
                    c.finish(Command::VelocityQuery(a))
                }
                _ => {
                    let a = c.axis()?;
                    c.finish(Command::PositionQuery(a))
                }
            }
        }
        Some(b'V') => {
            c.pos += 1;
            let a = c.axis()?;
            c.expect(b'=', "expected '=' after velocity axis")?;
            let n = c.integer()?;
            c.finish(Command::SetVelocity(a, n))
        }
        Some(b'-') => {
            c.pos += 1;
            c.expect(b'H', "expected 'HM' after '-'")?;
            c.expect(b'M', "expected 'HM' after '-'")?;
            let a = c.axis()?;
            c.finish(Command::MoveNegLimit(a))
        }
        Some(b'H') => {
            c.pos += 1;
            c.expect(b'M', "expected 'M' after 'H'")?;
            let a = c.axis()?;
            c.finish(Command::MovePosLimit(a))
        }
        Some(b'S') => {
            c.pos += 1;
            if c.peek() == Some(b'0') {
                c.pos += 1;
                return c.finish(Command::EmergencyStopAll);
            }
            let a = c.axis()?;
            c.finish(Command::EmergencyStopAxis(a))
        }
        Some(b) if Axis::from_byte(b).is_some() => {
            let first = c.axis()?;
            match c.peek() {
                Some(b'=') => {
                    c.pos += 1;
                    let n = c.integer()?;
                    c.finish(Command::MoveAbsolute(first, n))
                }
                Some(b':') => {
                    c.pos += 1;
                    let n = c.integer()?;
                    c.finish(Command::MoveRelative(first, n))
                }
                // `Z` followed by an axis letter zeroes that axis.
                Some(_) if first == Axis::Z => {
                    let a = c.axis()?;
                    c.finish(Command::ZeroPosition(a))
                }
                _ => c.fail("expected '=' or ':' after axis"),
            }
        }
        Some(_) => c.fail("unknown command"),
    }
}

/// Controller replies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Ok,
    Position(Axis, i64),
    Velocity(Axis, i64),
    NotConnected,
    LimitReached,
    BadCommand,
}

impl Response {
    pub fn is_error(&self) -> bool {
        matches!(
            self,
            Response::NotConnected | Response::LimitReached | Response::BadCommand
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_string().into_bytes()
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Response::Ok => write!(f, "OK/"),
            Response::Position(a, p) => write!(f, "{a}={p}/"),
            Response::Velocity(a, v) => write!(f, "V{a}={v}/"),
            Response::NotConnected => write!(f, "ERR=NC/"),
            Response::LimitReached => write!(f, "ERR=LIM/"),
            Response::BadCommand => write!(f, "ERR=CMD/"),
        }
    }
}

/// Parses a single reply token such as `X=120/` or `ERR=LIM/`.
pub fn parse_response(bytes: &[u8]) -> Option<Response> {
    let s = std::str::from_utf8(bytes).ok()?;
    let body = s.strip_suffix('/')?;
    match body {
        "OK" => return Some(Response::Ok),
        "ERR=NC" => return Some(Response::NotConnected),
        "ERR=LIM" => return Some(Response::LimitReached),
        "ERR=CMD" => return Some(Response::BadCommand),
        _ => {}
    }
    let (key, value) = body.split_once('=')?;
    let value: i64 = value.parse().ok()?;
    match key.as_bytes() {
        [b'V', a] => Some(Response::Velocity(Axis::from_byte(*a)?, value)),
        [a] => Some(Response::Position(Axis::from_byte(*a)?, value)),
        _ => None,
    }
}
