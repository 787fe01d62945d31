mod common;

use common::*;
use gratingscope::protocol::Axis;
use gratingscope_service::config::MotorType;
use gratingscope_service::jobs::{JobState, RetrievalRequest};
use gratingscope_service::service::{AcquireRequest, TubeRequest};
use gratingscope_service::{Channel, ScanRequest, ScanState, ServiceError, StageAction};
use gratingscope::{ArmSelection, Roi, ScanMode};
use std::time::{Duration, Instant};

fn kind<T: std::fmt::Debug>(r: Result<T, ServiceError>) -> &'static str {
    r.expect_err("expected an error").kind()
}

#[test]
fn login_failures_look_the_same() {
    let f = Fixture::new();
    let unknown = f.svc.login("nobody", "x").unwrap_err();
    let wrong = f.svc.login(OPERATOR.0, "x").unwrap_err();
    assert_eq!(unknown.kind(), "auth_error");
    assert_eq!(unknown.to_string(), wrong.to_string());
}

#[test]
fn login_rate_limited_after_five_failures() {
    let f = Fixture::new();
    for _ in 0..5 {
        assert_eq!(kind(f.svc.login(OPERATOR.0, "nope")), "auth_error");
    }
    assert_eq!(kind(f.svc.login(OPERATOR.0, OPERATOR.1)), "rate_limited");
    // Other users are unaffected.
    f.login(ADMIN);
    f.clock.advance(61.0);
    f.login(OPERATOR);
}

#[test]
fn expired_token_rejected_everywhere_and_logged() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.svc.status(Some(&t)).unwrap();
    f.clock.advance(601.0);
    let t = Some(t.as_str());
    let before = f.svc.history_snapshot().len();
    let errors = [
        kind(f.svc.status(t)),
        kind(f.svc.stages(t)),
        kind(f.svc.tube(t)),
        kind(f.svc.history(t, 10)),
        kind(f.svc.datasets(t)),
        kind(f.svc.maintenance(t)),
        kind(f.svc.scan_status(t)),
        kind(f.svc.job(t, "job-1")),
        kind(f.svc.subscribe(t, Channel::ScanEvents, None)),
        kind(f.svc.stage_command(t, &g0_x(StageAction::Query, None))),
        kind(f.svc.start_scan(t, &quick_scan())),
        kind(f.svc.abort_scan(t)),
        kind(f.svc.add_note(t, "hi")),
        kind(f.svc.logout(t)),
    ];
    assert!(errors.iter().all(|&k| k == "auth_error"), "{errors:?}");
    let hist = f.svc.history_snapshot();
    assert_eq!(hist.len() - before, errors.len());
    assert!(hist[before..].iter().all(|e| e.user == "-" && e.outcome.starts_with("auth_error")));
    assert!(f.svc.status(None).is_err());
}

#[test]
fn relative_move_is_converted_to_steps() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    let r = f.svc.stage_command(Some(&t), &g0_x(StageAction::MoveRel, Some(1.0))).unwrap();
    assert_eq!(r.command.as_deref(), Some("X:1000/"));
    assert_eq!(r.reply, "OK/");
    let sent: Vec<_> = f.svc.emissions().into_iter().filter(|e| e.device == 1).map(|e| e.sent).collect();
    assert_eq!(sent, ["X:1000/"]);

    let rot = stage(1, MotorType::Rotary, Axis::Z, StageAction::MoveAbs, Some(-2.5));
    assert_eq!(f.svc.stage_command(Some(&t), &rot).unwrap().command.as_deref(), Some("Z=-250/"));
    let q = f.svc.stage_command(Some(&t), &g0_x(StageAction::Query, None)).unwrap();
    assert!(q.position.unwrap() >= 0.0 && q.position.unwrap() <= 1.0);
}

#[test]
fn bad_address_and_device_errors() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    let nine = stage(9, MotorType::Translation, Axis::X, StageAction::Query, None);
    assert_eq!(kind(f.svc.stage_command(Some(&t), &nine)), "address_error");
    let wrong_type = stage(1, MotorType::Goniometric, Axis::X, StageAction::Query, None);
    assert_eq!(kind(f.svc.stage_command(Some(&t), &wrong_type)), "address_error");
    assert_eq!(kind(f.svc.stage_command(Some(&t), &g0_x(StageAction::MoveRel, None))), "validation_error");

    // Past the soft limit: the move is accepted, the next query reports it.
    f.svc.stage_command(Some(&t), &g0_x(StageAction::MoveAbs, Some(5000.0))).unwrap();
    match f.svc.stage_command(Some(&t), &g0_x(StageAction::Query, None)) {
        Err(ServiceError::Device { reply }) => assert_eq!(reply, "ERR=LIM/"),
        other => panic!("expected a device error, got {other:?}"),
    }
    assert!(f.svc.emissions().iter().all(|e| e.device != 9));
}

#[test]
fn piezo_is_driven_through_the_stage_map() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    let p = |a, v| stage(8, MotorType::Piezo, Axis::X, a, v);
    let r = f.svc.stage_command(Some(&t), &p(StageAction::MoveAbs, Some(12.5))).unwrap();
    assert_eq!(r.position, Some(12.5));
    let r = f.svc.stage_command(Some(&t), &p(StageAction::MoveRel, Some(-2.5))).unwrap();
    assert!((r.encoder.unwrap() - 10.0).abs() < 1e-9);
    assert_eq!(kind(f.svc.stage_command(Some(&t), &p(StageAction::Zero, None))), "validation_error");
    assert_eq!(kind(f.svc.stage_command(Some(&t), &p(StageAction::MoveAbs, Some(1e6)))), "device_error");
}

#[test]
fn scan_needs_the_tube_and_rejects_bad_settings() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    assert_eq!(kind(f.svc.start_scan(Some(&t), &quick_scan())), "interlock");
    f.tube_on(&t);
    let two = ScanRequest { steps: 2, ..quick_scan() };
    assert_eq!(kind(f.svc.start_scan(Some(&t), &two)), "validation_error");
    let roi = ScanRequest { roi: Some(Roi::new(40, 40, 20, 20)), ..quick_scan() };
    assert_eq!(kind(f.svc.start_scan(Some(&t), &roi)), "validation_error");
}

#[test]
fn abort_without_scan_is_idle() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    let st = f.svc.abort_scan(Some(&t)).unwrap();
    assert_eq!(st.state, ScanState::Idle);
}

fn wait_for_frames(f: &Fixture, t: &str, n: usize) {
    let deadline = Instant::now() + Duration::from_secs(60);
    while f.svc.scan_status(Some(t)).unwrap().frames_acquired < n {
        assert!(Instant::now() < deadline, "scan made no progress");
        std::thread::sleep(Duration::from_millis(2));
    }
}

#[test]
fn interlock_while_scanning() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    f.svc.start_scan(Some(&t), &long_scan()).unwrap();
    wait_for_frames(&f, &t, 1);
    let tok = Some(t.as_str());

    assert_eq!(kind(f.svc.stage_command(tok, &g0_x(StageAction::MoveRel, Some(1.0)))), "interlock");
    assert_eq!(kind(f.svc.stage_command(tok, &g0_x(StageAction::HomePos, None))), "interlock");
    assert_eq!(kind(f.svc.stage_command(tok, &g0_x(StageAction::Zero, None))), "interlock");
    let piezo = stage(8, MotorType::Piezo, Axis::X, StageAction::MoveAbs, Some(1.0));
    assert_eq!(kind(f.svc.stage_command(tok, &piezo)), "interlock");
    f.svc.stage_command(tok, &g0_x(StageAction::Query, None)).unwrap();
    let tube = TubeRequest { on: false, voltage_kv: None, current_ma: None };
    assert_eq!(kind(f.svc.set_tube(tok, &tube)), "interlock");
    assert_eq!(kind(f.svc.acquire(tok, &AcquireRequest { frames: 1, sample_in_beam: None, seed: None })), "interlock");
    assert_eq!(kind(f.svc.start_scan(Some(&t), &quick_scan())), "busy");

    let st = f.svc.scan_status(tok).unwrap();
    assert_eq!(st.state, ScanState::Running);
    assert!(st.step.is_some() && st.arm.is_some());
    assert!(st.dataset.as_ref().unwrap().starts_with(&f.svc.config().data_dir));

    // Stop is always allowed and ends the scan.
    f.svc.stage_command(tok, &g0_x(StageAction::Stop, None)).unwrap();
    assert_eq!(wait_done(&f.svc), ScanState::Aborted);
    assert!(f.svc.emissions().iter().all(|e| !(e.is_move && e.scan_running)));
    f.svc.stage_command(tok, &g0_x(StageAction::MoveRel, Some(1.0))).unwrap();
}

#[test]
fn abort_returns_final_status() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    f.svc.start_scan(Some(&t), &long_scan()).unwrap();
    wait_for_frames(&f, &t, 2);
    let st = f.svc.abort_scan(Some(&t)).unwrap();
    assert_eq!(st.state, ScanState::Aborted);
    assert!(st.frames_acquired >= 2 && st.frames_acquired < st.frames_expected);
    let rec = f.svc.dataset_index_snapshot().pop().unwrap();
    assert!(!rec.complete);
}

#[test]
fn scan_events_are_ordered_and_complete() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    let mut events = f.svc.subscribe(Some(&t), Channel::ScanEvents, None).unwrap();
    let mut curve = f.svc.subscribe(Some(&t), Channel::ShiftCurve, None).unwrap();
    let st = f.svc.start_scan(Some(&t), &quick_scan()).unwrap();
    assert_eq!(wait_done(&f.svc), ScanState::Completed);
    let ev = events.drain();
    let seqs: Vec<u64> = ev.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=ev.len() as u64).collect::<Vec<_>>());
    assert_eq!(ev.first().unwrap().kind, "started");
    assert_eq!(ev.last().unwrap().kind, "scan_finished");
    assert!(ev.iter().all(|e| e.data["scan"] == st.id.clone().unwrap().as_str()));
    let points = curve.drain();
    assert_eq!(points.len(), st.frames_expected);
    let rec = f.svc.dataset_index_snapshot().pop().unwrap();
    assert!(rec.complete);
    assert_eq!(rec.summary["frames"], st.frames_expected);
}

#[test]
fn mode_a_scan_with_one_arm() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    let req = ScanRequest {
        mode: ScanMode::A,
        arms: ArmSelection::Reference,
        ..quick_scan()
    };
    let st = f.svc.start_scan(Some(&t), &req).unwrap();
    assert_eq!(st.frames_expected, 8);
    assert_eq!(wait_done(&f.svc), ScanState::Completed);
}

fn wait_job(f: &Fixture, t: &str, id: &str) -> gratingscope_service::JobStatus {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let j = f.svc.job(Some(t), id).unwrap();
        if j.state != JobState::Running {
            return j;
        }
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn retrieval_job_end_to_end() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    let scan = f.svc.start_scan(Some(&t), &quick_scan()).unwrap().id.unwrap();
    wait_done(&f.svc);
    let before = f.svc.history_snapshot().len();
    let req = RetrievalRequest {
        sample: scan.clone(),
        reference: None,
        roi: None,
        drift_rows: None,
        params: None,
        window: None,
    };
    let job = f.svc.start_retrieval(Some(&t), &req).unwrap();
    assert_eq!(f.svc.history_snapshot().len(), before + 1);
    let done = wait_job(&f, &t, &job.id);
    assert_eq!(done.state, JobState::Completed, "{:?}", done.error);
    assert!(done.report.unwrap().contains("mean transmission"));
    for ch in ["transmission", "dpc", "darkfield"] {
        let p = f.svc.job_preview(Some(&t), &job.id, ch).unwrap();
        assert_eq!((p.width, p.height), (48, 48));
        assert_eq!(p.pixels().unwrap().len(), 48 * 48);
        assert!(done.result_dir.join(format!("{ch}.pgm")).exists());
    }
    assert_eq!(kind(f.svc.job_preview(Some(&t), &job.id, "nonsense")), "not_found");
    let (w, h, v) = f.svc.job_values(Some(&t), &job.id, "transmission").unwrap();
    assert_eq!(v.len(), w * h);
    let recs = f.svc.datasets(Some(&t)).unwrap();
    assert!(recs.iter().any(|r| r.id == job.id));
}

#[test]
fn retrieval_inputs_validated_before_start() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    let a = f.svc.start_scan(Some(&t), &quick_scan()).unwrap().id.unwrap();
    wait_done(&f.svc);
    let b = f
        .svc
        .start_scan(Some(&t), &ScanRequest { steps: 10, ..quick_scan() })
        .unwrap()
        .id
        .unwrap();
    wait_done(&f.svc);
    let base = RetrievalRequest {
        sample: a.clone(),
        reference: Some(b),
        roi: None,
        drift_rows: None,
        params: None,
        window: None,
    };
    let e = f.svc.start_retrieval(Some(&t), &base).unwrap_err();
    assert_eq!(e.kind(), "validation_error");
    assert!(e.to_string().contains("step counts differ"), "{e}");

    let outside = RetrievalRequest {
        reference: None,
        roi: Some(Roi::new(30, 30, 30, 30)),
        ..base.clone()
    };
    assert_eq!(kind(f.svc.start_retrieval(Some(&t), &outside)), "validation_error");
    let overlap = RetrievalRequest {
        reference: None,
        drift_rows: Some(8),
        ..base.clone()
    };
    assert_eq!(kind(f.svc.start_retrieval(Some(&t), &overlap)), "validation_error");
    let missing = RetrievalRequest {
        sample: "no/such/scan".into(),
        reference: None,
        ..base
    };
    let e = f.svc.start_retrieval(Some(&t), &missing).unwrap_err();
    assert!(e.to_string().contains("manifest"), "{e}");
}

#[test]
fn single_operator_write_lock() {
    let f = Fixture::new();
    let olga = f.login(OPERATOR);
    let oscar = f.login(OPERATOR2);
    let root = f.login(ADMIN);
    f.svc.stage_command(Some(&olga), &g0_x(StageAction::MoveRel, Some(0.1))).unwrap();
    assert_eq!(kind(f.svc.stage_command(Some(&oscar), &g0_x(StageAction::MoveRel, Some(0.1)))), "control_locked");
    // Reads and stops are not locked.
    f.svc.status(Some(&oscar)).unwrap();
    f.svc.stage_command(Some(&oscar), &g0_x(StageAction::Stop, None)).unwrap();
    assert_eq!(kind(f.svc.take_control(Some(&oscar))), "forbidden");
    f.svc.take_control(Some(&root)).unwrap();
    assert_eq!(kind(f.svc.stage_command(Some(&olga), &g0_x(StageAction::MoveRel, Some(0.1)))), "control_locked");
    f.svc.logout(Some(&root)).unwrap();
    f.svc.stage_command(Some(&oscar), &g0_x(StageAction::MoveRel, Some(0.1))).unwrap();
    assert_eq!(f.svc.status(Some(&olga)).unwrap().control_holder.as_deref(), Some(OPERATOR2.0));
}

#[test]
fn control_passes_on_when_the_holder_expires() {
    let f = Fixture::new();
    let olga = f.login(OPERATOR);
    f.svc.stage_command(Some(&olga), &g0_x(StageAction::MoveRel, Some(0.1))).unwrap();
    f.clock.advance(590.0);
    let oscar = f.login(OPERATOR2);
    assert_eq!(kind(f.svc.stage_command(Some(&oscar), &g0_x(StageAction::MoveRel, Some(0.1)))), "control_locked");
    f.clock.advance(20.0);
    f.svc.stage_command(Some(&oscar), &g0_x(StageAction::MoveRel, Some(0.1))).unwrap();
}

#[test]
fn one_history_entry_per_mutating_call() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    let tok = Some(t.as_str());
    let mut expected = f.svc.history_snapshot().len();
    let mut check = |label: &str| {
        expected += 1;
        assert_eq!(f.svc.history_snapshot().len(), expected, "{label}");
    };
    let _ = f.svc.stage_command(tok, &g0_x(StageAction::MoveRel, Some(1.0)));
    check("move");
    let _ = f.svc.stage_command(tok, &stage(9, MotorType::Rotary, Axis::Z, StageAction::Query, None));
    check("bad address");
    let _ = f.svc.start_scan(Some(&t), &quick_scan());
    check("scan without tube");
    let _ = f.svc.add_note(tok, "aligned g1");
    check("note");
    let _ = f.svc.add_note(tok, "  ");
    check("empty note");
    let _ = f.svc.abort_scan(tok);
    check("abort");
    let _ = f.svc.acquire(tok, &AcquireRequest { frames: 0, sample_in_beam: None, seed: None });
    check("bad acquire");
    let _ = f.svc.reject_malformed::<()>(tok, "stage_command", ServiceError::Validation("body".into()));
    check("malformed");
    let _ = f.svc.login(OPERATOR.0, "wrong");
    check("failed login");

    let reads = f.svc.history_snapshot().len();
    f.svc.status(tok).unwrap();
    f.svc.stages(tok).unwrap();
    f.svc.history(tok, 5).unwrap();
    f.svc.maintenance(tok).unwrap();
    assert_eq!(f.svc.history_snapshot().len(), reads);
    let last = f.svc.history(tok, 1).unwrap().pop().unwrap();
    assert_eq!(last.action, "login");
    assert!(last.outcome.starts_with("auth_error"));
}

#[test]
fn acquire_publishes_a_preview() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    let mut live = f.svc.subscribe(Some(&t), Channel::LiveFrames, None).unwrap();
    let s = f
        .svc
        .acquire(Some(&t), &AcquireRequest { frames: 3, sample_in_beam: Some(true), seed: Some(1) })
        .unwrap();
    assert_eq!(s.averaged, 3);
    assert!(s.min <= s.mean && s.mean <= s.max);
    let ev = live.drain();
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].data["preview"]["width"], 48);
}

#[test]
fn live_mode_streams_frames() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    let mut live = f.svc.subscribe(Some(&t), Channel::LiveFrames, None).unwrap();
    f.svc.set_live(Some(&t), true).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut got = Vec::new();
    while got.len() < 3 && Instant::now() < deadline {
        got.extend(live.drain());
        std::thread::sleep(Duration::from_millis(10));
    }
    f.svc.set_live(Some(&t), false).unwrap();
    assert!(got.len() >= 3);
    assert!(got.iter().all(|e| e.data["source"] == "live"));
}

#[test]
fn restart_recovers_history_and_index() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    f.tube_on(&t);
    f.svc.start_scan(Some(&t), &quick_scan()).unwrap();
    wait_done(&f.svc);
    f.svc.add_note(Some(&t), "end of shift").unwrap();
    let history = f.svc.history_snapshot();
    let index = f.svc.dataset_index_snapshot();
    assert!(history.len() >= 4 && index.len() == 1);
    let again = f.reopen();
    assert_eq!(again.history_snapshot(), history);
    assert_eq!(again.dataset_index_snapshot(), index);
    // Sessions do not survive a restart; the log keeps growing from where it was.
    let t2 = again.login(OPERATOR.0, OPERATOR.1).unwrap().token;
    assert!(again.status(Some(&t)).is_err());
    let h = again.history(Some(&t2), 1000).unwrap();
    assert_eq!(h.len(), history.len() + 2);
    assert_eq!(h.last().unwrap().seq, history.len() as u64 + 1);
}

#[test]
fn maintenance_counts_calls_per_target() {
    let f = Fixture::new();
    let t = f.login(OPERATOR);
    for _ in 0..3 {
        f.svc.stage_command(Some(&t), &g0_x(StageAction::Query, None)).unwrap();
    }
    let _ = f.svc.stage_command(Some(&t), &g0_x(StageAction::MoveRel, None));
    let stats = f.svc.maintenance(Some(&t)).unwrap();
    let s = &stats["device 1 translation X"];
    assert_eq!((s.calls, s.failures), (4, 1));
}
