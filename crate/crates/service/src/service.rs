//! The control service: sessions, audited device commands, scans, retrieval
//! jobs and event streams over one simulated beamline.

use crate::auth::{AuthError, CredentialStore, Role, Session, SessionTable};
use crate::config::{ConfigError, MotorType, ServiceConfig, StageConfig};
use crate::devices::{resolve, translate, Emission, MotorBank, StageAction, StageRequest};
use crate::events::{Channel, EventBus, Subscription};
use crate::history::{HistoryEntry, HistoryError, HistoryLog, TargetStats};
use crate::index::{DatasetIndex, DatasetRecord};
use crate::jobs::JobStatus;
use crate::scan::{ScanSlot, ScanState, ScanStatus};
use base64::Engine;
use gratingscope::protocol::{Axis, Response};
use gratingscope::{acquire_averaged, window_image, Grid, VirtualBeamline};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("authentication failed")]
    Auth,
    #[error("{0}")]
    RateLimited(String),
    #[error("device control is held by {holder}")]
    ControlLocked { holder: String },
    #[error("{0}")]
    Interlock(String),
    #[error("{0}")]
    Busy(String),
    #[error("{0}")]
    Address(String),
    #[error("device replied {reply}")]
    Device { reply: String },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Auth => "auth_error",
            ServiceError::RateLimited(_) => "rate_limited",
            ServiceError::ControlLocked { .. } => "control_locked",
            ServiceError::Interlock(_) => "interlock",
            ServiceError::Busy(_) => "busy",
            ServiceError::Address(_) => "address_error",
            ServiceError::Device { .. } => "device_error",
            ServiceError::Validation(_) => "validation_error",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl From<AuthError> for ServiceError {
    fn from(e: AuthError) -> Self {
        match e {
            AuthError::Denied => ServiceError::Auth,
            AuthError::RateLimited { .. } => ServiceError::RateLimited(e.to_string()),
            AuthError::Store { .. } => ServiceError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Wall-clock source, replaceable in tests.
#[derive(Clone)]
pub struct Clock(Arc<dyn Fn() -> f64 + Send + Sync>);

impl Clock {
    pub fn system() -> Self {
        Clock(Arc::new(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0)
        }))
    }

    /// A clock that only moves through the returned handle.
    pub fn manual(start: f64) -> (Self, ManualClock) {
        let t = Arc::new(Mutex::new(start));
        let read = t.clone();
        (Clock(Arc::new(move || *read.lock().expect("clock"))), ManualClock(t))
    }

    pub fn now(&self) -> f64 {
        (self.0)()
    }
}

impl std::fmt::Debug for Clock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Clock")
    }
}

#[derive(Debug, Clone)]
pub struct ManualClock(Arc<Mutex<f64>>);

impl ManualClock {
    pub fn advance(&self, dt: f64) {
        *self.0.lock().expect("clock") += dt;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub token: String,
    pub user: String,
    pub role: Role,
    pub issued_at: f64,
    pub expires_at: f64,
}

impl From<Session> for SessionInfo {
    fn from(s: Session) -> Self {
        SessionInfo {
            token: s.token,
            user: s.user,
            role: s.role,
            issued_at: s.issued_at,
            expires_at: s.expires_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReply {
    pub stage: String,
    /// Protocol bytes sent, absent for the piezo.
    pub command: Option<String>,
    pub reply: String,
    pub unit: String,
    pub position: Option<f64>,
    pub velocity: Option<f64>,
    /// Piezo encoder reading (µm).
    pub encoder: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeRequest {
    pub on: bool,
    #[serde(default)]
    pub voltage_kv: Option<f64>,
    #[serde(default)]
    pub current_ma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeStatus {
    pub on: bool,
    pub voltage_kv: f64,
    pub current_ma: f64,
    pub clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquireRequest {
    #[serde(default = "one")]
    pub frames: usize,
    #[serde(default)]
    pub sample_in_beam: Option<bool>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

/// An 8-bit windowed image, row-major, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub width: usize,
    pub height: usize,
    pub encoding: String,
    pub data: String,
}

impl Preview {
    pub fn from_gray(img: &Grid<u8>) -> Self {
        Preview {
            width: img.width(),
            height: img.height(),
            encoding: "gray8-base64".into(),
            data: base64::engine::general_purpose::STANDARD.encode(img.as_slice()),
        }
    }

    pub fn pixels(&self) -> Option<Vec<u8>> {
        base64::engine::general_purpose::STANDARD.decode(&self.data).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub averaged: usize,
    pub preview: Preview,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub axis: Axis,
    pub position: i64,
    pub velocity: i64,
    pub moving: bool,
    pub estopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub device: u8,
    pub connected: bool,
    pub axes: Vec<AxisReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemStatus {
    pub tube: TubeStatus,
    pub piezo_commanded_um: f64,
    pub piezo_encoder_um: f64,
    pub sample_in_beam: bool,
    pub detector: (usize, usize),
    pub scan: ScanStatus,
    pub control_holder: Option<String>,
    pub live: bool,
    pub controllers: Vec<ControllerReport>,
}

struct ControlHolder {
    token: String,
    user: String,
}

pub struct Service {
    pub(crate) config: ServiceConfig,
    pub(crate) clock: Clock,
    sessions: Mutex<SessionTable>,
    history: Mutex<HistoryLog>,
    pub(crate) index: Mutex<DatasetIndex>,
    bank: MotorBank,
    pub(crate) beamline: Arc<Mutex<VirtualBeamline>>,
    /// Scan state. Also the interlock lock: every device mutation happens
    /// while holding it.
    pub(crate) scan: Mutex<ScanSlot>,
    /// Mirror of `scan.state == Running` readable without the lock.
    pub(crate) scan_running: AtomicBool,
    pub(crate) events: Arc<EventBus>,
    control: Mutex<Option<ControlHolder>>,
    pub(crate) jobs: Mutex<HashMap<String, JobStatus>>,
    live: Mutex<Option<Arc<AtomicBool>>>,
    ids: AtomicU64,
    pub(crate) seeds: AtomicU64,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("data_dir", &self.config.data_dir).finish()
    }
}

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Service {
    /// Starts the service with the credential store named in `config`.
    pub fn open(config: ServiceConfig, clock: Clock) -> Result<Arc<Self>, StartupError> {
        let store = CredentialStore::load(&config.credentials)?;
        Self::open_with_store(config, store, clock)
    }

    pub fn open_with_store(
        config: ServiceConfig,
        store: CredentialStore,
        clock: Clock,
    ) -> Result<Arc<Self>, StartupError> {
        config.validate()?;
        let beamline = config.build_beamline()?;
        let history = HistoryLog::open(&config.data_dir, config.history_checksum_interval)?;
        let index = DatasetIndex::open(&config.data_dir)?;
        let bank = MotorBank::start(&config)?;
        let events = Arc::new(EventBus::new(config.events.buffer, config.events.retain));
        let ids = index.records().len() as u64;
        Ok(Arc::new(Service {
            sessions: Mutex::new(SessionTable::new(store, config.session_ttl_s)),
            history: Mutex::new(history),
            index: Mutex::new(index),
            bank,
            beamline: Arc::new(Mutex::new(beamline)),
            scan: Mutex::new(ScanSlot::default()),
            scan_running: AtomicBool::new(false),
            events,
            control: Mutex::new(None),
            jobs: Mutex::new(HashMap::new()),
            live: Mutex::new(None),
            ids: AtomicU64::new(ids),
            seeds: AtomicU64::new(config.detector.rng_seed),
            config,
            clock,
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn events(&self) -> &Arc<EventBus> {
        &self.events
    }

    pub fn bank(&self) -> &MotorBank {
        &self.bank
    }

    pub fn emissions(&self) -> Vec<Emission> {
        self.bank.emissions()
    }

    pub(crate) fn next_id(&self, prefix: &str) -> String {
        let n = self.ids.fetch_add(1, Ordering::SeqCst) + 1;
        let t = (self.clock.now() * 1000.0) as u64;
        format!("{prefix}-{n:04}-{t:x}")
    }

    pub(crate) fn record(&self, user: &str, action: &str, target: &str, params: Value, outcome: String) {
        let now = self.clock.now();
        let mut h = lock(&self.history);
        if let Err(e) = h.append(now, user, action, target, params, &outcome) {
            tracing::error!("history append failed: {e}");
        }
    }

    pub(crate) fn authenticate(&self, token: Option<&str>) -> Result<Session, ServiceError> {
        let token = token.ok_or(ServiceError::Auth)?;
        let now = self.clock.now();
        let s = lock(&self.sessions).check(token, now)?;
        Ok(s)
    }

    /// Runs a state-mutating call and appends exactly one history entry,
    /// whatever the outcome.
    pub(crate) fn audited<T>(
        &self,
        token: Option<&str>,
        action: &str,
        target: &str,
        params: Value,
        f: impl FnOnce(&Session) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        let (user, result) = match self.authenticate(token) {
            Ok(s) => {
                let r = f(&s);
                (s.user, r)
            }
            Err(e) => ("-".to_string(), Err(e)),
        };
        let outcome = match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("{}: {e}", e.kind()),
        };
        self.record(&user, action, target, params, outcome);
        result
    }

    /// Records a mutating request whose body could not be parsed.
    pub fn reject_malformed<T>(&self, token: Option<&str>, action: &str, err: ServiceError) -> Result<T, ServiceError> {
        self.audited(token, action, "request", Value::Null, |_| Err(err))
    }

    /// Read-only calls; only a rejected token is recorded.
    pub(crate) fn read<T>(
        &self,
        token: Option<&str>,
        endpoint: &str,
        f: impl FnOnce(&Session) -> Result<T, ServiceError>,
    ) -> Result<T, ServiceError> {
        match self.authenticate(token) {
            Ok(s) => f(&s),
            Err(e) => {
                self.record("-", "auth_rejected", endpoint, Value::Null, format!("{}: {e}", e.kind()));
                Err(e)
            }
        }
    }

    /// Grants device control to `s` if nobody else holds it.
    pub(crate) fn require_control(&self, s: &Session) -> Result<(), ServiceError> {
        let mut holder = lock(&self.control);
        if let Some(h) = holder.as_ref() {
            if h.token == s.token {
                return Ok(());
            }
            if lock(&self.sessions).is_live(&h.token, self.clock.now()) {
                return Err(ServiceError::ControlLocked { holder: h.user.clone() });
            }
        }
        *holder = Some(ControlHolder {
            token: s.token.clone(),
            user: s.user.clone(),
        });
        Ok(())
    }

    // ---- sessions -------------------------------------------------------

    pub fn login(&self, user: &str, password: &str) -> Result<SessionInfo, ServiceError> {
        let now = self.clock.now();
        let result = lock(&self.sessions)
            .login(user, password, now)
            .map(SessionInfo::from)
            .map_err(ServiceError::from);
        let outcome = match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("{}: {e}", e.kind()),
        };
        self.record(user, "login", "session", Value::Null, outcome);
        result
    }

    pub fn logout(&self, token: Option<&str>) -> Result<(), ServiceError> {
        self.audited(token, "logout", "session", Value::Null, |s| {
            lock(&self.sessions).logout(&s.token);
            let mut holder = lock(&self.control);
            if holder.as_ref().is_some_and(|h| h.token == s.token) {
                *holder = None;
            }
            Ok(())
        })
    }

    /// Takes device control from another session. Admins only.
    pub fn take_control(&self, token: Option<&str>) -> Result<(), ServiceError> {
        self.audited(token, "take_control", "control", Value::Null, |s| {
            if s.role != Role::Admin {
                return Err(ServiceError::Forbidden("only admins can take control".into()));
            }
            *lock(&self.control) = Some(ControlHolder {
                token: s.token.clone(),
                user: s.user.clone(),
            });
            Ok(())
        })
    }

    pub fn release_control(&self, token: Option<&str>) -> Result<(), ServiceError> {
        self.audited(token, "release_control", "control", Value::Null, |s| {
            let mut holder = lock(&self.control);
            if holder.as_ref().is_some_and(|h| h.token == s.token) {
                *holder = None;
            }
            Ok(())
        })
    }

    // ---- stages ---------------------------------------------------------

    pub fn stages(&self, token: Option<&str>) -> Result<Vec<StageConfig>, ServiceError> {
        self.read(token, "stages", |_| Ok(self.config.stages.clone()))
    }

    pub fn stage_command(&self, token: Option<&str>, req: &StageRequest) -> Result<StageReply, ServiceError> {
        let a = req.address;
        let target = format!("device {} {} {}", a.device, a.motor_type, a.axis);
        let params = serde_json::to_value(req).unwrap_or(Value::Null);
        self.audited(token, "stage_command", &target, params, |s| {
            let stage = resolve(&self.config.stages, &a).map_err(|e| ServiceError::Address(e.to_string()))?;
            if req.action != StageAction::Stop {
                self.require_control(s)?;
            }
            if stage.motor_type == MotorType::Piezo {
                return self.piezo_command(stage, req.action, req.value);
            }
            let cmd = translate(stage, req.action, req.value).map_err(|e| ServiceError::Validation(e.to_string()))?;
            let slot = lock(&self.scan);
            let running = slot.status.state == ScanState::Running;
            if running {
                match req.action {
                    StageAction::Stop => slot.abort.store(true, Ordering::SeqCst),
                    StageAction::Query => {}
                    _ => return Err(ServiceError::Interlock(format!("{} rejected while a scan is running", req.action.name()))),
                }
            }
            let reply = self
                .bank
                .send(stage.device, cmd, running)
                .ok_or_else(|| ServiceError::Address(format!("no controller {}", stage.device)))?;
            drop(slot);
            if reply.is_error() {
                return Err(ServiceError::Device { reply: reply.to_string() });
            }
            let scale = stage.steps_per_unit;
            let (position, velocity) = match reply {
                Response::Position(_, p) => (Some(p as f64 / scale), None),
                Response::Velocity(_, v) => (None, Some(v as f64 / scale)),
                _ => (None, None),
            };
            Ok(StageReply {
                stage: stage.name.clone(),
                command: Some(cmd.to_string()),
                reply: reply.to_string(),
                unit: stage.unit.clone(),
                position,
                velocity,
                encoder: None,
            })
        })
    }

    fn piezo_command(&self, stage: &StageConfig, action: StageAction, value: Option<f64>) -> Result<StageReply, ServiceError> {
        let slot = lock(&self.scan);
        let running = slot.status.state == ScanState::Running;
        let reply = |commanded: f64, encoder: f64| StageReply {
            stage: stage.name.clone(),
            command: None,
            reply: "OK".into(),
            unit: "um".into(),
            position: Some(commanded),
            velocity: None,
            encoder: Some(encoder),
        };
        if running {
            return match action {
                StageAction::Stop => {
                    slot.abort.store(true, Ordering::SeqCst);
                    Ok(reply(slot.status.piezo_commanded_um, slot.status.piezo_encoder_um))
                }
                StageAction::Query => Ok(reply(slot.status.piezo_commanded_um, slot.status.piezo_encoder_um)),
                _ => Err(ServiceError::Interlock(format!("{} rejected while a scan is running", action.name()))),
            };
        }
        let mut bl = lock(&self.beamline);
        let value = || {
            value
                .filter(|v| v.is_finite())
                .ok_or_else(|| ServiceError::Validation(format!("{} needs a finite value", action.name())))
        };
        let result = match action {
            StageAction::MoveRel => {
                let target = bl.piezo.commanded_um + value()?;
                bl.move_piezo(target)
            }
            StageAction::MoveAbs => bl.move_piezo(value()?),
            StageAction::HomePos => {
                let t = bl.piezo.travel_max_um;
                bl.move_piezo(t)
            }
            StageAction::HomeNeg => {
                let t = bl.piezo.travel_min_um;
                bl.move_piezo(t)
            }
            StageAction::Query | StageAction::Stop => Ok(()),
            StageAction::Zero | StageAction::SetVelocity => {
                return Err(ServiceError::Validation(format!("the piezo does not support {}", action.name())))
            }
        };
        result.map_err(|e| ServiceError::Device { reply: e.to_string() })?;
        Ok(reply(bl.piezo.commanded_um, bl.piezo.encoder_um))
    }

    // ---- tube and detector ---------------------------------------------

    fn interlocked_beamline(&self, what: &str) -> Result<(MutexGuard<'_, ScanSlot>, MutexGuard<'_, VirtualBeamline>), ServiceError> {
        let slot = lock(&self.scan);
        if slot.status.state == ScanState::Running {
            return Err(ServiceError::Interlock(format!("{what} rejected while a scan is running")));
        }
        let bl = lock(&self.beamline);
        Ok((slot, bl))
    }

    pub fn set_tube(&self, token: Option<&str>, req: &TubeRequest) -> Result<TubeStatus, ServiceError> {
        let params = serde_json::to_value(req).unwrap_or(Value::Null);
        self.audited(token, "set_tube", "tube", params, |s| {
            self.require_control(s)?;
            let (_slot, mut bl) = self.interlocked_beamline("tube change")?;
            let kv = req.voltage_kv.unwrap_or(bl.tube.voltage_kv);
            let ma = req.current_ma.unwrap_or(bl.tube.current_ma);
            bl.set_tube(req.on, kv, ma)
                .map_err(|e| ServiceError::Validation(e.to_string()))?;
            Ok(tube_status(&bl))
        })
    }

    pub fn tube(&self, token: Option<&str>) -> Result<TubeStatus, ServiceError> {
        self.read(token, "tube", |_| self.try_beamline(tube_status))
    }

    /// Reads the beamline, or reports busy while a scan holds it.
    fn try_beamline<T>(&self, f: impl FnOnce(&VirtualBeamline) -> T) -> Result<T, ServiceError> {
        match self.beamline.try_lock() {
            Ok(bl) => Ok(f(&bl)),
            Err(std::sync::TryLockError::Poisoned(p)) => Ok(f(&p.into_inner())),
            Err(std::sync::TryLockError::WouldBlock) => Err(ServiceError::Busy("beamline busy".into())),
        }
    }

    pub fn acquire(&self, token: Option<&str>, req: &AcquireRequest) -> Result<FrameSummary, ServiceError> {
        let params = serde_json::to_value(req).unwrap_or(Value::Null);
        self.audited(token, "acquire", "detector", params, |s| {
            self.require_control(s)?;
            if req.frames == 0 || req.frames > 1000 {
                return Err(ServiceError::Validation("frames must be in 1..=1000".into()));
            }
            let (_slot, mut bl) = self.interlocked_beamline("acquisition")?;
            if let Some(v) = req.sample_in_beam {
                bl.set_sample_in_beam(v);
            }
            let seed = req.seed.unwrap_or_else(|| self.seeds.fetch_add(1 << 20, Ordering::SeqCst));
            let avg = acquire_averaged(&mut bl, req.frames, seed).map_err(|e| ServiceError::Validation(e.to_string()))?;
            drop(bl);
            let summary = self.summarize(&avg.mean, req.frames)?;
            self.events.publish(
                Channel::LiveFrames,
                "frame",
                json!({"source": "acquire", "mean": summary.mean, "preview": summary.preview}),
            );
            Ok(summary)
        })
    }

    pub(crate) fn summarize(&self, g: &Grid<f64>, averaged: usize) -> Result<FrameSummary, ServiceError> {
        let (lo, hi) = self.config.events.preview_window;
        let img = window_image(g, lo, hi).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let (min, max) = g
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Ok(FrameSummary {
            mean: g.mean(),
            min,
            max,
            averaged,
            preview: Preview::from_gray(&img),
        })
    }

    /// Starts or stops live mode: single frames rendered at the preview rate
    /// and published on `live_frames` while no scan runs.
    pub fn set_live(self: &Arc<Self>, token: Option<&str>, enabled: bool) -> Result<bool, ServiceError> {
        self.audited(token, "set_live", "detector", json!({ "enabled": enabled }), |s| {
            self.require_control(s)?;
            let mut live = lock(&self.live);
            if let Some(stop) = live.take() {
                stop.store(true, Ordering::SeqCst);
            }
            if enabled {
                let stop = Arc::new(AtomicBool::new(false));
                *live = Some(stop.clone());
                let svc = Arc::clone(self);
                std::thread::spawn(move || svc.live_loop(&stop));
            }
            Ok(enabled)
        })
    }

    fn live_loop(&self, stop: &AtomicBool) {
        let interval = Duration::from_millis(self.config.events.preview_interval_ms.max(20));
        let mut seed = self.config.detector.rng_seed ^ 0x5EED_0000;
        while !stop.load(Ordering::SeqCst) {
            if !self.scan_running.load(Ordering::SeqCst) {
                let frame = match self.beamline.try_lock() {
                    Ok(bl) if bl.tube.on => Some(bl.render_exposure(seed).values),
                    _ => None,
                };
                if let Some(values) = frame {
                    if let Ok(summary) = self.summarize(&values, 1) {
                        self.events.publish(
                            Channel::LiveFrames,
                            "frame",
                            json!({"source": "live", "mean": summary.mean, "preview": summary.preview}),
                        );
                    }
                }
                seed = seed.wrapping_add(1);
            }
            std::thread::sleep(interval);
        }
    }

    // ---- notes, history, status ----------------------------------------

    pub fn add_note(&self, token: Option<&str>, text: &str) -> Result<(), ServiceError> {
        self.audited(token, "note", "notes", json!({ "text": text }), |_| {
            if text.trim().is_empty() {
                return Err(ServiceError::Validation("note is empty".into()));
            }
            Ok(())
        })
    }

    pub fn history(&self, token: Option<&str>, limit: usize) -> Result<Vec<HistoryEntry>, ServiceError> {
        self.read(token, "history", |_| Ok(lock(&self.history).tail(limit).to_vec()))
    }

    /// Every entry, bypassing authentication. For the local operator tools.
    pub fn history_snapshot(&self) -> Vec<HistoryEntry> {
        lock(&self.history).entries().to_vec()
    }

    pub fn maintenance(&self, token: Option<&str>) -> Result<BTreeMap<String, TargetStats>, ServiceError> {
        self.read(token, "maintenance", |_| Ok(lock(&self.history).stats()))
    }

    pub fn datasets(&self, token: Option<&str>) -> Result<Vec<DatasetRecord>, ServiceError> {
        self.read(token, "datasets", |_| Ok(lock(&self.index).records().to_vec()))
    }

    pub fn dataset_index_snapshot(&self) -> Vec<DatasetRecord> {
        lock(&self.index).records().to_vec()
    }

    pub fn status(&self, token: Option<&str>) -> Result<SystemStatus, ServiceError> {
        self.read(token, "status", |_| {
            let scan = lock(&self.scan).status.clone();
            let (tube, commanded, encoder, sample_in, det) = match self.beamline.try_lock() {
                Ok(bl) => (
                    tube_status(&bl),
                    bl.piezo.commanded_um,
                    bl.piezo.encoder_um,
                    bl.sample_in_beam(),
                    (bl.detector().frame_width(), bl.detector().frame_height()),
                ),
                Err(_) => (
                    TubeStatus {
                        on: true,
                        voltage_kv: scan.tube_kv,
                        current_ma: scan.tube_ma,
                        clock_s: f64::NAN,
                    },
                    scan.piezo_commanded_um,
                    scan.piezo_encoder_um,
                    scan.arm == Some(gratingscope::Arm::Sample),
                    (self.config.detector.width / self.config.detector.binning, self.config.detector.height / self.config.detector.binning),
                ),
            };
            let controllers = (1..=gratingscope::protocol::CONTROLLER_COUNT)
                .filter_map(|d| self.bank.snapshot(d))
                .map(|c| ControllerReport {
                    device: c.id,
                    connected: c.connected,
                    axes: Axis::ALL
                        .iter()
                        .map(|&a| {
                            let st = c.axis(a);
                            AxisReport {
                                axis: a,
                                position: st.reported(),
                                velocity: st.velocity,
                                moving: st.is_moving(),
                                estopped: st.estopped,
                            }
                        })
                        .collect(),
                })
                .collect();
            Ok(SystemStatus {
                tube,
                piezo_commanded_um: commanded,
                piezo_encoder_um: encoder,
                sample_in_beam: sample_in,
                detector: det,
                scan,
                control_holder: lock(&self.control).as_ref().map(|h| h.user.clone()),
                live: lock(&self.live).is_some(),
                controllers,
            })
        })
    }

    pub fn subscribe(&self, token: Option<&str>, channel: Channel, last_seen: Option<u64>) -> Result<Subscription, ServiceError> {
        self.read(token, channel.name(), |_| Ok(self.events.subscribe(channel, last_seen)))
    }

    /// Resolves a dataset reference: an index id, or a path (relative paths
    /// are taken from the data directory).
    pub(crate) fn resolve_dataset(&self, r: &str) -> PathBuf {
        if let Some(rec) = lock(&self.index).get(r) {
            return rec.path.clone();
        }
        let p = PathBuf::from(r);
        if p.is_relative() {
            self.config.data_dir.join(p)
        } else {
            p
        }
    }
}

fn tube_status(bl: &VirtualBeamline) -> TubeStatus {
    TubeStatus {
        on: bl.tube.on,
        voltage_kv: bl.tube.voltage_kv,
        current_ma: bl.tube.current_ma,
        clock_s: bl.tube.clock_s,
    }
}
