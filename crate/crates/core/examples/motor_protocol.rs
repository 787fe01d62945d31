//! Drives one emulated stepper controller with raw protocol bytes and
//! replays the bundled conformance transcript.

use gratingscope::protocol::transcript::{Transcript, GOLDEN};
use gratingscope::protocol::{parse_command, AxisLimits, ControllerState};

fn main() {
    let mut ctrl = ControllerState::new(1);
    for (bytes, dt) in [
        ("?X/", 0.0),
        ("?R/", 0.0),
        ("VX=1000/", 0.0),
        ("X:500/", 0.5),
        ("?X/", 0.0),
        ("HMY/", 0.1),
        ("S0/", 1.0),
        ("?Y/", 0.0),
        ("ZX/", 0.0),
        ("?X/", 0.0),
        ("X:12", 0.0),
    ] {
        let decoded = parse_command(bytes.as_bytes()).map(|c| format!("{c:?}")).unwrap_or_else(|e| e.to_string());
        let reply = ctrl.execute_bytes(bytes.as_bytes());
        ctrl.tick(dt);
        println!("{bytes:<10} -> {:<10} {decoded}", reply.to_string());
    }

    let limits = AxisLimits {
        neg_limit: -5000,
        pos_limit: 5000,
        default_velocity: 1000,
    };
    let t = Transcript::parse(GOLDEN).unwrap();
    let bad = t.replay(&mut ControllerState::with_limits(1, [limits; 3]));
    println!("golden transcript: {} exchanges, {} mismatches", t.exchanges(), bad.len());
}
