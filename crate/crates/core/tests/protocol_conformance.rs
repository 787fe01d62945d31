use gratingscope::protocol::transcript::{Transcript, TranscriptStep, GOLDEN};
use gratingscope::protocol::{
    parse_command, serve_tcp, Axis, AxisLimits, ClockMode, Command, ControllerHandle, ControllerState,
    TcpControllerClient,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::net::TcpListener;

fn golden_limits() -> [AxisLimits; 3] {
    [AxisLimits {
        neg_limit: -5000,
        pos_limit: 5000,
        default_velocity: 1000,
    }; 3]
}

#[test]
fn golden_transcript_over_tcp() {
    let handle = ControllerHandle::spawn(ControllerState::with_limits(3, golden_limits()), ClockMode::Manual);
    let addr = serve_tcp(TcpListener::bind("127.0.0.1:0").unwrap(), handle.clone()).unwrap();
    let mut client = TcpControllerClient::connect(addr).unwrap();
    let transcript = Transcript::parse(GOLDEN).unwrap();
    for step in &transcript.steps {
        match step {
            TranscriptStep::Tick { dt, .. } => handle.advance(*dt),
            TranscriptStep::Exchange { line, send, expect } => {
                // The TCP framing needs a terminator; unterminated input is
                // completed by the next token instead.
                if !send.ends_with('/') {
                    continue;
                }
                let reply = client.request(send.as_bytes()).unwrap();
                assert_eq!(String::from_utf8(reply).unwrap(), *expect, "line {line}");
            }
        }
    }
}

#[test]
fn every_table_form_parses() {
    let forms: [(&str, Command); 11] = [
        ("?R/", Command::Connect),
        ("?X/", Command::PositionQuery(Axis::X)),
        ("?VY/", Command::VelocityQuery(Axis::Y)),
        ("VX=500/", Command::SetVelocity(Axis::X, 500)),
        ("Z=-20/", Command::MoveAbsolute(Axis::Z, -20)),
        ("X:100/", Command::MoveRelative(Axis::X, 100)),
        ("-HMY/", Command::MoveNegLimit(Axis::Y)),
        ("HMX/", Command::MovePosLimit(Axis::X)),
        ("ZZ/", Command::ZeroPosition(Axis::Z)),
        ("S0/", Command::EmergencyStopAll),
        ("SX/", Command::EmergencyStopAxis(Axis::X)),
    ];
    for (text, cmd) in forms {
        assert_eq!(parse_command(text.as_bytes()), Ok(cmd), "{text}");
        assert_eq!(cmd.to_string(), text);
    }
    assert!(parse_command(b"Q9/").is_err());
}

#[test]
fn random_bytes_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphabet = b"?RXYZV=:-+HMS0123456789/ \x00\xff";
    let mut ctrl = ControllerState::new(1);
    ctrl.execute(Command::Connect);
    for i in 0..100_000 {
        let len = rng.random_range(0..12);
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..len).map(|_| rng.random()).collect()
        } else {
            (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        };
        if let Ok(cmd) = parse_command(&bytes) {
            assert_eq!(parse_command(&cmd.to_bytes()), Ok(cmd));
        }
        let _ = ctrl.execute_bytes(&bytes);
    }
}

fn command_stream() -> impl Strategy<Value = Vec<(Command, f64)>> {
    let axis = prop_oneof![Just(Axis::X), Just(Axis::Y), Just(Axis::Z)];
    let cmd = (0usize..10, axis, -20_000i64..20_000).prop_map(|(k, a, n)| match k {
        0 => Command::MoveAbsolute(a, n),
        1 => Command::MoveRelative(a, n),
        2 => Command::MoveNegLimit(a),
        3 => Command::MovePosLimit(a),
        4 => Command::ZeroPosition(a),
        5 => Command::EmergencyStopAxis(a),
        6 => Command::EmergencyStopAll,
        7 => Command::SetVelocity(a, n.abs() + 1),
        8 => Command::PositionQuery(a),
        _ => Command::VelocityQuery(a),
    });
    proptest::collection::vec((cmd, 0.0f64..3.0), 1..60)
}

proptest! {
    #[test]
    fn position_stays_within_limits(stream in command_stream()) {
        let mut c = ControllerState::with_limits(1, golden_limits());
        c.execute(Command::Connect);
        for (cmd, dt) in stream {
            c.execute(cmd);
            c.tick(dt);
            for a in &c.axes {
                prop_assert!(a.position >= a.neg_limit && a.position <= a.pos_limit);
                prop_assert!(a.velocity > 0);
            }
        }
    }

    #[test]
    fn relative_there_and_back(start in -2000i64..2000, n in -2000i64..2000) {
        let mut c = ControllerState::with_limits(1, golden_limits());
        c.execute(Command::Connect);
        c.execute(Command::MoveAbsolute(Axis::Y, start));
        c.tick(10.0);
        c.execute(Command::MoveRelative(Axis::Y, n));
        c.tick(10.0);
        c.execute(Command::MoveRelative(Axis::Y, -n));
        c.tick(10.0);
        prop_assert_eq!(c.axis(Axis::Y).reported(), start);
    }

    #[test]
    fn zero_then_query_reads_zero(moves in proptest::collection::vec(-3000i64..3000, 0..5)) {
        let mut c = ControllerState::with_limits(1, golden_limits());
        c.execute(Command::Connect);
        for m in moves {
            c.execute(Command::MoveRelative(Axis::Z, m));
            c.tick(5.0);
        }
        c.execute(Command::ZeroPosition(Axis::Z));
        let _ = c.execute(Command::PositionQuery(Axis::Z));
        prop_assert_eq!(c.execute(Command::PositionQuery(Axis::Z)).to_string(), "Z=0/");
    }
}
