//! ASCII stepper-controller protocol and a controller emulator.
//!
//! Commands are 7-bit ASCII tokens terminated by `/`, e.g. `?R/` (connect),
//! `?X/` (position query), `VX=500/` (velocity), `X=100/` (absolute move),
//! `X:100/` (relative move), `-HMX/` / `HMX/` (limits), `ZX/` (zero),
//! `S0/` / `SX/` (emergency stop). Replies use the same style: `OK/`,
//! `X=123/`, `VX=500/`, `ERR=NC/`, `ERR=LIM/`, `ERR=CMD/`.

mod command;
mod controller;
mod link;
pub mod transcript;

pub use command::{parse_command, parse_response, Axis, Command, ParseError, Response};
pub use controller::{AxisLimits, AxisState, ControllerState};
pub use link::{
    serve_tcp, ClockMode, ControllerHandle, StreamDecoder, TcpControllerClient, MAX_TOKEN_LEN,
};

/// Number of controllers in the rack (serial channels COM1..COM8).
pub const CONTROLLER_COUNT: u8 = 8;
