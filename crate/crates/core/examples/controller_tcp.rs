//! Serves an emulated controller on a local TCP port and talks to it over
//! the socket. Pass `--serve` to keep the endpoint up for external tools.

use gratingscope::protocol::{serve_tcp, ClockMode, ControllerHandle, ControllerState, TcpControllerClient};
use std::net::TcpListener;

fn main() {
    let handle = ControllerHandle::spawn(ControllerState::new(1), ClockMode::RealTime);
    let addr = serve_tcp(TcpListener::bind("127.0.0.1:0").unwrap(), handle.clone()).unwrap();
    println!("controller 1 listening on {addr}");

    let mut client = TcpControllerClient::connect(addr).unwrap();
    for cmd in ["?R/", "VZ=2000/", "Z=400/"] {
        let reply = client.request(cmd.as_bytes()).unwrap();
        println!("{cmd:<8} -> {}", String::from_utf8_lossy(&reply));
    }
    std::thread::sleep(std::time::Duration::from_millis(300));
    let reply = client.request(b"?Z/").unwrap();
    println!("?Z/      -> {}", String::from_utf8_lossy(&reply));

    if std::env::args().any(|a| a == "--serve") {
        println!("serving until interrupted");
        loop {
            std::thread::park();
        }
    }
}
