#![allow(dead_code)]

use gratingscope_service::auth::{CredentialStore, Role};
use gratingscope_service::config::ServiceConfig;
use gratingscope_service::service::{Clock, ManualClock, Service, TubeRequest};
use gratingscope_service::{ScanRequest, ScanState, StageAction, StageAddress, StageRequest};
use gratingscope_service::config::MotorType;
use gratingscope::protocol::Axis;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;
use tempfile::TempDir;

pub const OPERATOR: (&str, &str) = ("olga", "stepper-7");
pub const OPERATOR2: (&str, &str) = ("oscar", "fringe-9");
pub const ADMIN: (&str, &str) = ("root", "talbot-lau");

pub fn store() -> CredentialStore {
    let mut s = CredentialStore::default();
    s.add_user(OPERATOR.0, Role::Operator, OPERATOR.1);
    s.add_user(OPERATOR2.0, Role::Operator, OPERATOR2.1);
    s.add_user(ADMIN.0, Role::Admin, ADMIN.1);
    s
}

/// A small, fast instrument rooted in `dir`.
pub fn config(dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::default();
    cfg.detector.width = 48;
    cfg.detector.height = 48;
    cfg.data_dir = dir.join("data");
    cfg.credentials = dir.join("credentials");
    cfg.session_ttl_s = 600.0;
    cfg.events.heartbeat_ms = 50;
    cfg.events.preview_interval_ms = 0;
    cfg
}

pub struct Fixture {
    pub dir: TempDir,
    pub svc: Arc<Service>,
    pub clock: ManualClock,
}

impl Fixture {
    pub fn new() -> Self {
        Self::with(|_| {})
    }

    pub fn with(tweak: impl FnOnce(&mut ServiceConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        tweak(&mut cfg);
        store().save(&cfg.credentials).unwrap();
        let (clock, handle) = Clock::manual(1.7e9);
        let svc = Service::open(cfg, clock).unwrap();
        Fixture { dir, svc, clock: handle }
    }

    /// Opens a second service over the same data directory.
    pub fn reopen(&self) -> Arc<Service> {
        let (clock, _) = Clock::manual(1.8e9);
        Service::open(self.svc.config().clone(), clock).unwrap()
    }

    pub fn login(&self, who: (&str, &str)) -> String {
        self.svc.login(who.0, who.1).unwrap().token
    }

    pub fn tube_on(&self, token: &str) {
        self.svc
            .set_tube(Some(token), &TubeRequest { on: true, voltage_kv: Some(45.0), current_ma: Some(22.5) })
            .unwrap();
    }
}

pub fn stage(device: u8, motor_type: MotorType, axis: Axis, action: StageAction, value: Option<f64>) -> StageRequest {
    StageRequest {
        address: StageAddress { device, motor_type, axis },
        action,
        value,
    }
}

pub fn g0_x(action: StageAction, value: Option<f64>) -> StageRequest {
    stage(1, MotorType::Translation, Axis::X, action, value)
}

/// A scan long enough to interact with while it runs.
pub fn long_scan() -> ScanRequest {
    ScanRequest {
        steps: 40,
        frames_to_average: 200,
        seed: Some(7),
        ..ScanRequest::default()
    }
}

pub fn quick_scan() -> ScanRequest {
    ScanRequest {
        steps: 8,
        frames_to_average: 2,
        seed: Some(11),
        ..ScanRequest::default()
    }
}

pub fn wait_done(svc: &Service) -> ScanState {
    svc.wait_for_scan(Duration::from_secs(120)).state
}
