//! One operator session against the in-process control service: log in,
//! move a stage, switch the tube on, run a scan, retrieve the maps and read
//! the audit log back.

use gratingscope::protocol::Axis;
use gratingscope_service::auth::{CredentialStore, Role};
use gratingscope_service::config::MotorType;
use gratingscope_service::service::TubeRequest;
use gratingscope_service::{
    Clock, JobState, RetrievalRequest, ScanRequest, Service, ServiceConfig, StageAction, StageAddress, StageRequest,
};
use std::time::Duration;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::default();
    cfg.detector.width = 64;
    cfg.detector.height = 64;
    cfg.data_dir = dir.path().join("data");
    cfg.credentials = dir.path().join("credentials");
    cfg.network.controller_base_port = 0;

    let mut store = CredentialStore::default();
    store.add_user("olga", Role::Operator, "stepper-7");
    let svc = Service::open_with_store(cfg, store, Clock::system()).unwrap();

    let session = svc.login("olga", "stepper-7").unwrap();
    let token = Some(session.token.as_str());
    println!("logged in as {} ({:?})", session.user, session.role);

    let g1_y = StageRequest {
        address: StageAddress { device: 3, motor_type: MotorType::Translation, axis: Axis::Y },
        action: StageAction::MoveRel,
        value: Some(0.25),
    };
    let reply = svc.stage_command(token, &g1_y).unwrap();
    println!(
        "{}: sent {} got {}, position {:?} {}",
        reply.stage,
        reply.command.as_deref().unwrap_or("-"),
        reply.reply,
        reply.position,
        reply.unit
    );

    svc.set_tube(token, &TubeRequest { on: true, voltage_kv: Some(45.0), current_ma: Some(22.5) })
        .unwrap();
    let req = ScanRequest {
        steps: 16,
        frames_to_average: 4,
        seed: Some(5),
        ..ScanRequest::default()
    };
    let started = svc.start_scan(token, &req).unwrap();
    println!("scan {} started, {} frames expected", started.id.as_deref().unwrap_or("?"), started.frames_expected);
    let done = svc.wait_for_scan(Duration::from_secs(120));
    println!("scan finished: {:?}, {} frames", done.state, done.frames_acquired);

    let job = svc
        .start_retrieval(
            token,
            &RetrievalRequest {
                sample: done.id.clone().unwrap(),
                reference: None,
                roi: None,
                drift_rows: None,
                params: None,
                window: None,
            },
        )
        .unwrap();
    let job = loop {
        let j = svc.job(token, &job.id).unwrap();
        if j.state != JobState::Running {
            break j;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    println!("retrieval {:?}, maps in {}", job.state, job.result_dir.display());
    if let Some(report) = &job.report {
        print!("{report}");
    }

    println!("audit log:");
    for e in svc.history(token, 20).unwrap() {
        println!("  #{:<3} {:<8} {:<14} {:<28} {}", e.seq, e.user, e.action, e.target, e.outcome);
    }
}
