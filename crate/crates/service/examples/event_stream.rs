//! Follows a scan through the event channels: scan progress events and the
//! shift curve as it is measured, drawn as a text plot.

use gratingscope::Roi;
use gratingscope_service::auth::{CredentialStore, Role};
use gratingscope_service::service::TubeRequest;
use gratingscope_service::{Channel, Clock, ScanRequest, Service, ServiceConfig};
use std::time::Duration;

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
    let token = svc.login("olga", "stepper-7").unwrap().token;
    let t = Some(token.as_str());

    let mut progress = svc.subscribe(t, Channel::ScanEvents, None).unwrap();
    let mut curve = svc.subscribe(t, Channel::ShiftCurve, None).unwrap();
    svc.set_tube(t, &TubeRequest { on: true, voltage_kv: None, current_ma: None }).unwrap();
        // A few pixels, so the curve is not averaged flat over many fringes.
    let req = ScanRequest {
        steps: 24,
        frames_to_average: 2,
        seed: Some(3),
        roi: Some(Roi::new(20, 20, 2, 2)),
        ..Default::default()
    };
    svc.start_scan(t, &req).unwrap();

    let point = |e: &gratingscope_service::Event| {
        let arm = e.data["arm"].as_str().unwrap_or("?").to_string();
        (arm, e.data["step"].as_u64().unwrap_or(0), e.data["mean"].as_f64().unwrap_or(0.0))
    };
    let mut points = Vec::new();
    let mut finished = false;
    while !finished {
        std::thread::sleep(Duration::from_millis(10));
        for e in progress.drain() {
            finished |= e.kind == "scan_finished";
            if !matches!(e.kind.as_str(), "frame_acquired" | "shift_point" | "piezo_moved") {
                println!("[{:>3}] {} {}", e.seq, e.kind, e.data);
            }
        }
        points.extend(curve.drain().iter().map(point));
    }
    points.extend(curve.drain().iter().map(point));

    let lo = points.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    println!("shift curve ({} points, mean counts {lo:.0}..{hi:.0}):", points.len());
    for (arm, step, mean) in &points {
        let col = ((mean - lo) / (hi - lo).max(1e-9) * 50.0).round() as usize;
        let mark = if arm == "reference" { 'r' } else { 's' };
        println!("{arm:>9} {step:>3} {:>width$}", mark, width = col + 1);
    }
}
