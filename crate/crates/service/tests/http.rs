mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::*;
use gratingscope_service::api::router;
use gratingscope_service::Channel;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use std::time::Duration;
use tower::ServiceExt;

struct Client {
    app: axum::Router,
}

impl Client {
    fn new(f: &Fixture) -> Self {
        Client { app: router(f.svc.clone()) }
    }

    async fn call(&self, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        (status, v)
    }

    async fn login(&self, who: (&str, &str)) -> String {
        let (s, v) = self
            .call("POST", "/api/login", None, Some(json!({"user": who.0, "password": who.1})))
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v["token"].as_str().unwrap().to_string()
    }
}

#[tokio::test]
async fn login_and_status() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let (s, v) = c
        .call("POST", "/api/login", None, Some(json!({"user": "olga", "password": "bad"})))
        .await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error"], "auth_error");
    let t = c.login(OPERATOR).await;
    let (s, v) = c.call("GET", "/api/status", Some(&t), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["tube"]["on"], false);
    assert_eq!(v["scan"]["state"], "idle");
    assert_eq!(v["controllers"].as_array().unwrap().len(), 8);
    let (s, _) = c.call("GET", "/api/status", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = c.call("GET", &format!("/api/status?token={t}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn rate_limit_is_429() {
    let f = Fixture::new();
    let c = Client::new(&f);
    for _ in 0..5 {
        c.call("POST", "/api/login", None, Some(json!({"user": "olga", "password": "x"}))).await;
    }
    let (s, v) = c
        .call("POST", "/api/login", None, Some(json!({"user": "olga", "password": OPERATOR.1})))
        .await;
    assert_eq!(s, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(v["error"], "rate_limited");
}

#[tokio::test]
async fn stage_commands_over_http() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let t = c.login(OPERATOR).await;
    let (s, v) = c.call("GET", "/api/stages", Some(&t), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 22);

    let cmd = json!({"device": 1, "motor_type": "translation", "axis": "X", "action": "move_rel", "value": 1.0});
    let (s, v) = c.call("POST", "/api/stages/command", Some(&t), Some(cmd)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["command"], "X:1000/");

    let bad = json!({"device": 9, "motor_type": "translation", "axis": "X", "action": "query"});
    let (s, v) = c.call("POST", "/api/stages/command", Some(&t), Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "address_error");

    let before = f.svc.history_snapshot().len();
    let (s, v) = c
        .call("POST", "/api/stages/command", Some(&t), Some(json!({"device": "one"})))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "validation_error");
    assert_eq!(f.svc.history_snapshot().len(), before + 1);

    c.call("POST", "/api/stages/command", Some(&t), Some(json!({"device": 1, "motor_type": "translation", "axis": "X", "action": "move_abs", "value": 5000.0}))).await;
    let (s, v) = c
        .call("POST", "/api/stages/command", Some(&t), Some(json!({"device": 1, "motor_type": "translation", "axis": "X", "action": "query"})))
        .await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    assert_eq!(v["error"], "device_error");
    assert_eq!(v["reply"], "ERR=LIM/");
}

#[tokio::test]
async fn scan_lifecycle_over_http() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let t = c.login(OPERATOR).await;
    let (s, v) = c.call("POST", "/api/scan/start", Some(&t), Some(json!({"steps": 8}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "interlock");
    let (s, _) = c
        .call("POST", "/api/tube", Some(&t), Some(json!({"on": true, "voltage_kv": 45.0, "current_ma": 22.5})))
        .await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = c.call("POST", "/api/scan/abort", Some(&t), None).await;
    assert_eq!((s, v["state"].as_str()), (StatusCode::OK, Some("idle")));

    let (s, v) = c
        .call("POST", "/api/scan/start", Some(&t), Some(json!({"steps": 40, "frames_to_average": 1000, "seed": 3})))
        .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["state"], "running");
    let (s, v) = c.call("POST", "/api/scan/start", Some(&t), Some(json!({"steps": 8}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("busy")));
    let (s, v) = c.call("GET", "/api/scan/status", Some(&t), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["dataset"].is_string());
    let (s, v) = c.call("POST", "/api/scan/abort", Some(&t), None).await;
    assert_eq!((s, v["state"].as_str()), (StatusCode::OK, Some("aborted")));

    let (s, v) = c.call("POST", "/api/scan/start", Some(&t), Some(json!({"steps": 2}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("validation_error")));
    let (s, _) = c.call("POST", "/api/scan/start", Some(&t), Some(json!({"stepz": 8}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn retrieval_job_over_http() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let t = c.login(OPERATOR).await;
    f.tube_on(&t);
    let (_, v) = c
        .call("POST", "/api/scan/start", Some(&t), Some(json!({"steps": 8, "frames_to_average": 2, "seed": 5})))
        .await;
    let scan = v["id"].as_str().unwrap().to_string();
    let svc = f.svc.clone();
    tokio::task::spawn_blocking(move || wait_done(&svc)).await.unwrap();

    let (s, v) = c
        .call("POST", "/api/jobs/retrieval", Some(&t), Some(json!({"sample": scan, "roi": {"x": 0, "y": 0, "width": 99, "height": 4}})))
        .await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("validation_error")), "{v}");

    let (s, v) = c
        .call("POST", "/api/jobs/retrieval", Some(&t), Some(json!({"sample": scan})))
        .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    let mut state = String::new();
    for _ in 0..2000 {
        let (_, v) = c.call("GET", &format!("/api/jobs/{id}"), Some(&t), None).await;
        state = v["state"].as_str().unwrap().to_string();
        if state != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    assert_eq!(state, "completed");
    for ch in ["transmission", "dpc", "darkfield"] {
        let (s, v) = c.call("GET", &format!("/api/jobs/{id}/preview/{ch}"), Some(&t), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["encoding"], "gray8-base64");
    }
    let (s, v) = c.call("GET", &format!("/api/jobs/{id}/channel/dpc"), Some(&t), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["values"].as_array().unwrap().len(), 48 * 48);
    let (s, _) = c.call("GET", "/api/jobs/job-404", Some(&t), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (_, v) = c.call("GET", "/api/datasets", Some(&t), None).await;
    assert_eq!(v.as_array().unwrap().len(), 2);
    let (_, v) = c.call("GET", "/api/history?limit=3", Some(&t), None).await;
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert_eq!(v[2]["action"], "retrieval_job");
}

#[tokio::test]
async fn notes_maintenance_and_control() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let t = c.login(OPERATOR).await;
    let root = c.login(ADMIN).await;
    let (s, _) = c.call("POST", "/api/notes", Some(&t), Some(json!({"text": "realigned g2"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = c.call("GET", "/api/maintenance", Some(&t), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["notes"]["calls"], 1);
    let (s, _) = c.call("POST", "/api/control/take", Some(&t), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = c.call("POST", "/api/control/take", Some(&root), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = c
        .call("POST", "/api/detector/acquire", Some(&t), Some(json!({"frames": 1})))
        .await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("control_locked")));
    c.call("POST", "/api/control/release", Some(&root), None).await;
    let (s, v) = c.call("POST", "/api/logout", Some(&t), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (s, _) = c.call("GET", "/api/status", Some(&t), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
}

/// Reads SSE text from a streaming body until `pred` holds for the parsed
/// events or the timeout passes.
async fn read_sse(body: &mut Body, timeout: Duration, pred: impl Fn(&[SseMsg]) -> bool) -> Vec<SseMsg> {
    let mut text = String::new();
    let mut msgs = Vec::new();
    let deadline = tokio::time::Instant::now() + timeout;
    while !pred(&msgs) {
        let frame = match tokio::time::timeout_at(deadline, body.frame()).await {
            Ok(Some(Ok(f))) => f,
            _ => break,
        };
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
        while let Some(end) = text.find("\n\n") {
            let block: String = text.drain(..end + 2).collect();
            msgs.push(SseMsg::parse(&block));
        }
    }
    msgs
}

#[derive(Debug, Default)]
struct SseMsg {
    id: Option<u64>,
    event: String,
    data: String,
}

impl SseMsg {
    fn parse(block: &str) -> Self {
        let mut m = SseMsg::default();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                m.id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("event:") {
                m.event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                m.data.push_str(v.trim());
            }
        }
        m
    }
}

async fn open_stream(c: &Client, path: &str) -> (StatusCode, Body) {
    let req = Request::builder().uri(path).body(Body::empty()).unwrap();
    let resp = c.app.clone().oneshot(req).await.unwrap();
    (resp.status(), resp.into_body())
}

#[tokio::test]
async fn idle_stream_sends_only_heartbeats() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let t = c.login(OPERATOR).await;
    let (s, mut body) = open_stream(&c, &format!("/api/events/live_frames?token={t}")).await;
    assert_eq!(s, StatusCode::OK);
    let msgs = read_sse(&mut body, Duration::from_secs(5), |m| m.len() >= 3).await;
    assert_eq!(msgs.len(), 3);
    assert!(msgs.iter().all(|m| m.event == "heartbeat" && m.id.is_none()));
}

#[tokio::test]
async fn stream_rejects_bad_token_and_channel() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let (s, _) = open_stream(&c, "/api/events/live_frames?token=nope").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let t = c.login(OPERATOR).await;
    let (s, _) = open_stream(&c, &format!("/api/events/everything?token={t}")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn shift_curve_stream_is_sequenced_and_resumable() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let t = c.login(OPERATOR).await;
    f.tube_on(&t);
    let (_, mut body) = open_stream(&c, &format!("/api/events/shift_curve?token={t}")).await;
    c.call("POST", "/api/scan/start", Some(&t), Some(json!({"steps": 8, "frames_to_average": 2, "seed": 1})))
        .await;
    let points = |m: &[SseMsg]| m.iter().filter(|m| m.event == "point").count();
    let msgs = read_sse(&mut body, Duration::from_secs(30), |m| points(m) >= 16).await;
    let ids: Vec<u64> = msgs.iter().filter_map(|m| m.id).collect();
    assert_eq!(ids, (1..=16).collect::<Vec<_>>());
    let first: Value = serde_json::from_str(&msgs.iter().find(|m| m.event == "point").unwrap().data).unwrap();
    assert_eq!(first["arm"], "reference");
    assert_eq!(first["step"], 0);
    drop(body);

    // Resume after event 10, by query parameter and by Last-Event-ID.
    let (_, mut body) = open_stream(&c, &format!("/api/events/shift_curve?token={t}&last_seen=10")).await;
    let msgs = read_sse(&mut body, Duration::from_secs(5), |m| points(m) >= 6).await;
    let ids: Vec<u64> = msgs.iter().filter_map(|m| m.id).collect();
    assert_eq!(ids, (11..=16).collect::<Vec<_>>());
    let req = Request::builder()
        .uri(format!("/api/events/shift_curve?token={t}"))
        .header("last-event-id", "14")
        .body(Body::empty())
        .unwrap();
    let mut body = c.app.clone().oneshot(req).await.unwrap().into_body();
    let msgs = read_sse(&mut body, Duration::from_secs(5), |m| points(m) >= 2).await;
    assert_eq!(msgs.iter().filter_map(|m| m.id).collect::<Vec<_>>(), [15, 16]);
}

#[tokio::test]
async fn live_frames_carry_previews() {
    let f = Fixture::new();
    let c = Client::new(&f);
    let t = c.login(OPERATOR).await;
    f.tube_on(&t);
    let (_, mut body) = open_stream(&c, &format!("/api/events/live_frames?token={t}")).await;
    let (s, _) = c.call("POST", "/api/detector/live", Some(&t), Some(json!({"enabled": true}))).await;
    assert_eq!(s, StatusCode::OK);
    let msgs = read_sse(&mut body, Duration::from_secs(10), |m| m.iter().any(|m| m.event == "frame")).await;
    c.call("POST", "/api/detector/live", Some(&t), Some(json!({"enabled": false}))).await;
    let frame = msgs.iter().find(|m| m.event == "frame").expect("a live frame");
    let v: Value = serde_json::from_str(&frame.data).unwrap();
    let p = &v["preview"];
    assert_eq!((p["width"].as_u64(), p["height"].as_u64()), (Some(48), Some(48)));
}

#[tokio::test]
async fn slow_consumer_is_disconnected() {
    let f = Fixture::with(|c| {
        c.events.buffer = 4;
        c.events.retain = 8;
    });
    let t = f.login(OPERATOR);
    let mut slow = f.svc.subscribe(Some(&t), Channel::ScanEvents, None).unwrap();
    for i in 0..20 {
        f.svc.events().publish(Channel::ScanEvents, "tick", json!(i));
    }
    assert_eq!(f.svc.events().disconnected(Channel::ScanEvents), 1);
    assert_eq!(slow.drain().len(), 4);
    assert!(slow.is_closed());

    // Over HTTP the stream ends with an overflow notice.
    let c = Client::new(&f);
    let (_, mut body) = open_stream(&c, &format!("/api/events/scan_events?token={t}")).await;
    for i in 0..10 {
        f.svc.events().publish(Channel::ScanEvents, "tick", json!(i));
    }
    let msgs = read_sse(&mut body, Duration::from_secs(5), |m| m.iter().any(|m| m.event == "overflow")).await;
    let ids: Vec<u64> = msgs.iter().filter_map(|m| m.id).collect();
    assert_eq!(ids, [21, 22, 23, 24]);
    assert_eq!(msgs.last().unwrap().event, "overflow");
    assert!(body.frame().await.is_none());

    // Resuming from before the retention window reports a gap first.
    let (_, mut body) = open_stream(&c, &format!("/api/events/scan_events?token={t}&last_seen=2")).await;
    let msgs = read_sse(&mut body, Duration::from_secs(5), |m| m.len() >= 2).await;
    assert_eq!(msgs[0].event, "gap");
    assert_eq!(msgs[1].id, Some(23));
}
