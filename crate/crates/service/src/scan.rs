//! Scan control: one scan at a time, run on its own thread against the
//! shared beamline, streaming progress on the event bus.

use crate::index::{DatasetRecord, RecordKind};
use crate::events::Channel;
use crate::service::{lock, Preview, Service, ServiceError};
use gratingscope::{
    acquire_correction_maps, run_scan, window_image, Arm, ArmSelection, CorrectionMaps, Roi, ScanConfig,
    ScanEvent, ScanHooks, ScanMode,
};
use gratingscope::acquisition::DatasetFrame;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanState {
    #[default]
    Idle,
    Running,
    Completed,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanStatus {
    pub state: ScanState,
    pub id: Option<String>,
    pub mode: Option<ScanMode>,
    pub steps: usize,
    /// Step of the most recent frame.
    pub step: Option<usize>,
    pub arm: Option<Arm>,
    pub frames_acquired: usize,
    pub frames_expected: usize,
    pub dataset: Option<PathBuf>,
    pub piezo_commanded_um: f64,
    pub piezo_encoder_um: f64,
    pub tube_kv: f64,
    pub tube_ma: f64,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub message: Option<String>,
}

#[derive(Default)]
pub(crate) struct ScanSlot {
    pub status: ScanStatus,
    pub abort: Arc<AtomicBool>,
    pub thread: Option<JoinHandle<()>>,
}

/// Body of a scan start request. Omitted fields take the scan defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanRequest {
    pub mode: ScanMode,
    pub steps: usize,
    pub step_size_um: Option<f64>,
    pub start_um: f64,
    pub exposure_time_s: f64,
    pub frames_to_average: usize,
    pub roi: Option<Roi>,
    pub seed: Option<u64>,
    pub arms: ArmSelection,
    /// Dark and flat frames averaged for offset/gain correction; 0 skips it.
    pub flat_frames: usize,
}

impl Default for ScanRequest {
    fn default() -> Self {
        let c = ScanConfig::default();
        ScanRequest {
            mode: c.mode,
            steps: c.steps,
            step_size_um: c.step_size_um,
            start_um: c.start_um,
            exposure_time_s: c.exposure_time_s,
            frames_to_average: c.frames_to_average,
            roi: c.roi,
            seed: None,
            arms: c.arms,
            flat_frames: 0,
        }
    }
}

impl ScanRequest {
    pub fn to_config(&self, seed: u64) -> ScanConfig {
        ScanConfig {
            mode: self.mode,
            steps: self.steps,
            step_size_um: self.step_size_um,
            start_um: self.start_um,
            exposure_time_s: self.exposure_time_s,
            frames_to_average: self.frames_to_average,
            roi: self.roi,
            seed,
            arms: self.arms,
        }
    }
}

impl Service {
    pub fn start_scan(self: &Arc<Self>, token: Option<&str>, req: &ScanRequest) -> Result<ScanStatus, ServiceError> {
        let params = serde_json::to_value(req).unwrap_or_default();
        self.audited(token, "scan_start", "scan", params, |s| {
            self.require_control(s)?;
            let mut slot = lock(&self.scan);
            if slot.status.state == ScanState::Running {
                return Err(ServiceError::Busy(format!(
                    "scan {} is running",
                    slot.status.id.as_deref().unwrap_or("?")
                )));
            }
            let bl = lock(&self.beamline);
            if !bl.tube.on {
                return Err(ServiceError::Interlock("the tube is off".into()));
            }
            let seed = req.seed.unwrap_or_else(|| self.seeds.fetch_add(1 << 32, Ordering::SeqCst));
            let cfg = req.to_config(seed);
            cfg.validate(bl.fringe().piezo_period_um)
                .map_err(|e| ServiceError::Validation(e.to_string()))?;
            let (w, h) = (bl.detector().frame_width(), bl.detector().frame_height());
            if let Some(roi) = cfg.roi {
                if roi.is_empty() || !roi.fits_in(w, h) {
                    return Err(ServiceError::Validation(format!("roi {roi} outside {w}x{h} frame")));
                }
            }
            if cfg.arms != ArmSelection::Reference && bl.sample().is_none() {
                return Err(ServiceError::Validation("no sample loaded for the sample arm".into()));
            }
            if req.flat_frames > 1000 {
                return Err(ServiceError::Validation("flat_frames must be at most 1000".into()));
            }
            let (kv, ma) = (bl.tube.voltage_kv, bl.tube.current_ma);
            let (commanded, encoder) = (bl.piezo.commanded_um, bl.piezo.encoder_um);
            drop(bl);

            if let Some(t) = slot.thread.take() {
                let _ = t.join();
            }
            let id = self.next_id("scan");
            let dir = self.config.data_dir.join("scans").join(&id);
            let now = self.clock.now();
            lock(&self.index)
                .upsert(DatasetRecord {
                    id: id.clone(),
                    kind: RecordKind::Scan,
                    path: dir.clone(),
                    created: now,
                    user: s.user.clone(),
                    complete: false,
                    summary: json!({
                        "mode": cfg.mode,
                        "steps": cfg.steps,
                        "frames_to_average": cfg.frames_to_average,
                        "seed": seed,
                    }),
                })
                .map_err(|e| ServiceError::Internal(format!("dataset index: {e}")))?;
            let abort = Arc::new(AtomicBool::new(false));
            slot.abort = abort.clone();
            slot.status = ScanStatus {
                state: ScanState::Running,
                id: Some(id.clone()),
                mode: Some(cfg.mode),
                steps: cfg.steps,
                frames_expected: cfg.expected_frames(),
                dataset: Some(dir.clone()),
                piezo_commanded_um: commanded,
                piezo_encoder_um: encoder,
                tube_kv: kv,
                tube_ma: ma,
                started_at: Some(now),
                ..ScanStatus::default()
            };
            self.scan_running.store(true, Ordering::SeqCst);
            let status = slot.status.clone();
            let svc = Arc::clone(self);
            let flat = req.flat_frames;
            let user = s.user.clone();
            slot.thread = Some(std::thread::spawn(move || svc.scan_thread(id, dir, cfg, flat, abort, user)));
            Ok(status)
        })
    }

    fn scan_thread(&self, id: String, dir: PathBuf, cfg: ScanConfig, flat_frames: usize, abort: Arc<AtomicBool>, user: String) {
        let interval = Duration::from_millis(self.config.events.preview_interval_ms);
        let window = self.config.events.preview_window;
        let mut last_preview: Option<Instant> = None;
        let mut observer = |ev: &ScanEvent| {
            let mut slot = lock(&self.scan);
            let st = &mut slot.status;
            match *ev {
                ScanEvent::PiezoMoved { commanded_um, encoder_um } => {
                    st.piezo_commanded_um = commanded_um;
                    st.piezo_encoder_um = encoder_um;
                }
                ScanEvent::ShiftPoint { arm, step, mean } => {
                    st.step = Some(step);
                    st.arm = Some(arm);
                    st.frames_acquired += 1;
                    self.events.publish(
                        Channel::ShiftCurve,
                        "point",
                        json!({"scan": id, "arm": arm, "step": step, "mean": mean}),
                    );
                }
                _ => {}
            }
            drop(slot);
            let mut data = serde_json::to_value(ev).unwrap_or_default();
            let kind = data["kind"].as_str().unwrap_or("event").to_string();
            data["scan"] = json!(id);
            self.events.publish(Channel::ScanEvents, &kind, data);
        };
        let mut frame_observer = |f: &DatasetFrame| {
            if last_preview.is_some_and(|t| t.elapsed() < interval) {
                return;
            }
            last_preview = Some(Instant::now());
            let g = f.corrected.map(|&v| v as f64);
            if let Ok(img) = window_image(&g, window.0, window.1) {
                self.events.publish(
                    Channel::LiveFrames,
                    "frame",
                    json!({
                        "source": "scan",
                        "scan": id,
                        "arm": f.arm,
                        "step": f.step,
                        "mean": f.mean_intensity,
                        "preview": Preview::from_gray(&img),
                    }),
                );
            }
        };

        let mut bl = lock(&self.beamline);
        let maps = if flat_frames > 0 {
            acquire_correction_maps(&mut bl, flat_frames, cfg.seed ^ 0xF1A7)
        } else {
            let (w, h) = (bl.detector().frame_width(), bl.detector().frame_height());
            Ok(CorrectionMaps::passthrough(w, h))
        };
        let outcome = maps.and_then(|maps| {
            run_scan(
                &mut bl,
                &cfg,
                &maps,
                ScanHooks {
                    abort: Some(&abort),
                    output_dir: Some(&dir),
                    observer: Some(&mut observer),
                    frame_observer: Some(&mut frame_observer),
                },
            )
        });
        drop(bl);

        let (state, message, frames, complete) = match &outcome {
            Ok(o) if o.abort_reason.is_none() => (ScanState::Completed, None, o.dataset.frames.len(), true),
            Ok(o) => (ScanState::Aborted, o.abort_reason.clone(), o.dataset.frames.len(), false),
            Err(e) => (ScanState::Failed, Some(e.to_string()), 0, false),
        };
        let now = self.clock.now();
        {
            let mut idx = lock(&self.index);
            if let Some(mut rec) = idx.get(&id).cloned() {
                rec.complete = complete;
                rec.summary["frames"] = json!(frames);
                rec.summary["state"] = json!(state);
                if let Err(e) = idx.upsert(rec) {
                    tracing::error!("dataset index: {e}");
                }
            }
        }
        tracing::info!(scan = %id, ?state, frames, user = %user, "scan finished");
        let mut slot = lock(&self.scan);
        slot.status.state = state;
        slot.status.message = message.clone();
        slot.status.finished_at = Some(now);
        self.scan_running.store(false, Ordering::SeqCst);
        drop(slot);
        self.events.publish(
            Channel::ScanEvents,
            "scan_finished",
            json!({"scan": id, "state": state, "frames": frames, "message": message}),
        );
    }

    /// Requests an abort and waits for the scan thread. Without a running
    /// scan this does nothing and reports `idle`.
    pub fn abort_scan(&self, token: Option<&str>) -> Result<ScanStatus, ServiceError> {
        self.audited(token, "scan_abort", "scan", serde_json::Value::Null, |_| {
            let thread = {
                let mut slot = lock(&self.scan);
                if slot.status.state != ScanState::Running {
                    return Ok(ScanStatus::default());
                }
                slot.abort.store(true, Ordering::SeqCst);
                slot.thread.take()
            };
            if let Some(t) = thread {
                let _ = t.join();
            }
            Ok(lock(&self.scan).status.clone())
        })
    }

    pub fn scan_status(&self, token: Option<&str>) -> Result<ScanStatus, ServiceError> {
        self.read(token, "scan_status", |_| Ok(lock(&self.scan).status.clone()))
    }

    /// Blocks until no scan is running (or `timeout` passes).
    pub fn wait_for_scan(&self, timeout: Duration) -> ScanStatus {
        let deadline = Instant::now() + timeout;
        while self.scan_running.load(Ordering::SeqCst) && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        let thread = if self.scan_running.load(Ordering::SeqCst) {
            None
        } else {
            lock(&self.scan).thread.take()
        };
        if let Some(t) = thread {
            let _ = t.join();
        }
        lock(&self.scan).status.clone()
    }
}
