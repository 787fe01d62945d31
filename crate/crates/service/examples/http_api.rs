//! Starts the HTTP service on an ephemeral port and drives it the way the
//! operator console does: JSON requests with a bearer token, and the
//! scan_events stream read as server-sent events until the scan finishes.

use gratingscope_service::api;
use gratingscope_service::auth::{CredentialStore, Role};
use gratingscope_service::{Clock, Service, ServiceConfig};
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};

/// One HTTP/1.0 exchange; the server closes the connection after replying.
fn call(addr: SocketAddr, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    let mut req = format!("{method} {path} HTTP/1.0\r\nContent-Type: application/json\r\nContent-Length: {}\r\n", body.len());
    if let Some(t) = token {
        req += &format!("Authorization: Bearer {t}\r\n");
    }
    write!(s, "{req}\r\n{body}").unwrap();
    let mut text = String::new();
    s.read_to_string(&mut text).unwrap();
    let status = text[9..12].parse().unwrap();
    let payload = text.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("");
    (status, serde_json::from_str(payload).unwrap_or(Value::Null))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::default();
    cfg.detector.width = 48;
    cfg.detector.height = 48;
    cfg.data_dir = dir.path().join("data");
    cfg.credentials = dir.path().join("credentials");
    cfg.network.controller_base_port = 0;
    let mut store = CredentialStore::default();
    store.add_user("olga", Role::Operator, "stepper-7");
    let svc = Service::open_with_store(cfg, store, Clock::system()).unwrap();

    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = rt.spawn(api::serve(svc, listener, async {
        let _ = stopped.await;
    }));
    println!("serving on http://{addr}");

    let (code, body) = call(addr, "POST", "/api/login", None, Some(json!({"user": "olga", "password": "nope"})));
    println!("bad login -> {code} {body}");
    let (_, body) = call(addr, "POST", "/api/login", None, Some(json!({"user": "olga", "password": "stepper-7"})));
    let token = body["token"].as_str().unwrap().to_string();
    let t = Some(token.as_str());

    let (code, body) = call(addr, "POST", "/api/scan/start", t, Some(json!({"steps": 8})));
    println!("scan with the tube off -> {code} {}", body["error"]);
    let (code, _) = call(addr, "POST", "/api/tube", t, Some(json!({"on": true, "voltage_kv": 45.0, "current_ma": 22.5})));
    println!("tube on -> {code}");
    let move_g0 = json!({"device": 1, "motor_type": "translation", "axis": "X", "action": "move_rel", "value": 1.5});
    let (code, body) = call(addr, "POST", "/api/stages/command", t, Some(move_g0.clone()));
    println!("move g0_x -> {code} {} {}", body["command"], body["reply"]);

    // Subscribe before starting so no event is missed.
    let mut events = TcpStream::connect(addr).unwrap();
    write!(events, "GET /api/events/scan_events HTTP/1.0\r\nAuthorization: Bearer {token}\r\n\r\n").unwrap();
    let mut events = BufReader::new(events);
    // The response head arrives once the subscription exists.
    let mut line = String::new();
    while events.read_line(&mut line).unwrap() > 2 {
        line.clear();
    }
    line.clear();

    let (code, body) = call(addr, "POST", "/api/scan/start", t, Some(json!({"steps": 12, "frames_to_average": 3, "seed": 1})));
    println!("scan start -> {code} {}", body["id"]);
    let (code, body) = call(addr, "POST", "/api/stages/command", t, Some(move_g0));
    println!("move during scan -> {code} {}", body["error"]);

    // Fields arrive line by line; a blank line ends the event.
    let (mut id, mut kind, mut data) = (String::new(), String::new(), String::new());
    while events.read_line(&mut line).unwrap() > 0 {
        let l = line.trim_end().to_string();
        line.clear();
        if let Some(v) = l.strip_prefix("id:") {
            id = v.trim().into();
        } else if let Some(v) = l.strip_prefix("event:") {
            kind = v.trim().into();
        } else if let Some(v) = l.strip_prefix("data:") {
            data = v.trim().into();
        } else if l.is_empty() {
            if matches!(kind.as_str(), "started" | "finished" | "scan_finished") {
                println!("event {id:>3} {kind}: {data}");
            }
            if kind == "scan_finished" {
                break;
            }
            id.clear();
            kind.clear();
        }
    }

    let (_, status) = call(addr, "GET", "/api/scan/status", t, None);
    println!("final status: {} with {} frames", status["state"], status["frames_acquired"]);
    let (_, history) = call(addr, "GET", "/api/history?limit=10", t, None);
    for e in history.as_array().unwrap() {
        println!("  {} {} {} -> {}", e["seq"], e["user"], e["action"], e["outcome"]);
    }

    // Graceful shutdown waits for open streams.
    drop(events);
    let _ = stop.send(());
    rt.block_on(server).unwrap().unwrap();
}
