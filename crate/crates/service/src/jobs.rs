//! Asynchronous retrieval jobs over stored scans.

use crate::index::{DatasetRecord, RecordKind};
use crate::service::{lock, Preview, Service, ServiceError};
use gratingscope::retrieval::RetrievalDiagnostics;
use gratingscope::{
    load_dataset, retrieve, window_image, DriftMargin, Grid, GridBundle,
    RetrievalParams, Roi,
};
use gratingscope::retrieval::{calibrate_drift_pair, check_compatible, CHANNELS};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRequest {
    /// Dataset id from the index, or a path.
    pub sample: String,
    /// Defaults to `sample` (a paired scan holding both arms).
    #[serde(default)]
    pub reference: Option<String>,
    #[serde(default)]
    pub roi: Option<Roi>,
    /// Rows of the sample-free margin used for drift calibration; no
    /// calibration when absent.
    #[serde(default)]
    pub drift_rows: Option<usize>,
    #[serde(default)]
    pub params: Option<RetrievalParams>,
    /// Display window percentiles for the previews.
    #[serde(default)]
    pub window: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    pub sample: PathBuf,
    pub reference: PathBuf,
    pub roi: Roi,
    pub result_dir: PathBuf,
    pub channels: Vec<String>,
    pub report: Option<String>,
    pub diagnostics: Option<RetrievalDiagnostics>,
    pub error: Option<String>,
    pub created: f64,
    pub finished: Option<f64>,
}

impl Service {
    /// Validates the inputs and starts retrieval in the background. Input
    /// problems are reported here, before any job exists.
    pub fn start_retrieval(self: &Arc<Self>, token: Option<&str>, req: &RetrievalRequest) -> Result<JobStatus, ServiceError> {
        let params_json = serde_json::to_value(req).unwrap_or_default();
        self.audited(token, "retrieval_job", "retrieval", params_json, |s| {
            let sample_path = self.resolve_dataset(&req.sample);
            let reference_path = self.resolve_dataset(req.reference.as_deref().unwrap_or(&req.sample));
            let load = |p: &Path| {
                load_dataset(p).map_err(|e| ServiceError::Validation(format!("{}: {e}", p.display())))
            };
            let sample = load(&sample_path)?;
            let reference = if reference_path == sample_path {
                sample.clone()
            } else {
                load(&reference_path)?
            };
            let roi = req.roi.unwrap_or(Roi::full(sample.width, sample.height));
            check_compatible(&sample, &reference, &roi).map_err(|e| ServiceError::Validation(e.to_string()))?;
            let margin = req.drift_rows.map(|rows| DriftMargin { rows });
            if let Some(m) = &margin {
                m.validate(sample.width, sample.height, Some(&roi))
                    .map_err(|e| ServiceError::Validation(e.to_string()))?;
            }
            let window = req.window.unwrap_or(self.config.events.preview_window);
            if !(0.0..100.0).contains(&window.0) || !(window.0 < window.1 && window.1 <= 100.0) {
                return Err(ServiceError::Validation(format!("bad window {window:?}")));
            }
            let params = req.params.unwrap_or_default();

            let id = self.next_id("job");
            let dir = self.config.data_dir.join("results").join(&id);
            let now = self.clock.now();
            let status = JobStatus {
                id: id.clone(),
                state: JobState::Running,
                sample: sample_path,
                reference: reference_path,
                roi,
                result_dir: dir.clone(),
                channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
                report: None,
                diagnostics: None,
                error: None,
                created: now,
                finished: None,
            };
            lock(&self.jobs).insert(id.clone(), status.clone());
            let svc = Arc::clone(self);
            let user = s.user.clone();
            let job = status.clone();
            std::thread::spawn(move || {
                let result = (|| {
                    let (sample, reference) = match margin {
                        Some(m) => calibrate_drift_pair(&sample, &reference, &m, Some(&roi))?,
                        None => (sample, reference),
                    };
                    let r = retrieve(&sample, &reference, &roi, &params)?;
                    r.save(&dir, window)?;
                    Ok::<_, gratingscope::retrieval::RetrievalError>(r)
                })();
                svc.finish_job(job, user, result);
            });
            Ok(status)
        })
    }

    fn finish_job(
        &self,
        mut job: JobStatus,
        user: String,
        result: Result<gratingscope::RetrievalResult, gratingscope::retrieval::RetrievalError>,
    ) {
        job.finished = Some(self.clock.now());
        match result {
            Ok(r) => {
                job.state = JobState::Completed;
                job.report = Some(r.report());
                job.diagnostics = Some(r.diagnostics.clone());
                let rec = DatasetRecord {
                    id: job.id.clone(),
                    kind: RecordKind::Retrieval,
                    path: job.result_dir.clone(),
                    created: job.created,
                    user,
                    complete: true,
                    summary: json!({
                        "sample": job.sample,
                        "reference": job.reference,
                        "roi": job.roi.to_string(),
                        "valid_pixels": r.diagnostics.valid_pixels,
                    }),
                };
                if let Err(e) = lock(&self.index).upsert(rec) {
                    tracing::error!("dataset index: {e}");
                }
            }
            Err(e) => {
                job.state = JobState::Failed;
                job.error = Some(e.to_string());
            }
        }
        lock(&self.jobs).insert(job.id.clone(), job);
    }

    pub fn job(&self, token: Option<&str>, id: &str) -> Result<JobStatus, ServiceError> {
        self.read(token, "job", |_| self.lookup_job(id))
    }

    fn lookup_job(&self, id: &str) -> Result<JobStatus, ServiceError> {
        if let Some(j) = lock(&self.jobs).get(id) {
            return Ok(j.clone());
        }
        // Jobs from before a restart survive through the dataset index.
        let rec = lock(&self.index)
            .get(id)
            .filter(|r| r.kind == RecordKind::Retrieval)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no job {id}")))?;
        let path = |k: &str| PathBuf::from(rec.summary[k].as_str().unwrap_or_default());
        Ok(JobStatus {
            id: rec.id.clone(),
            state: JobState::Completed,
            sample: path("sample"),
            reference: path("reference"),
            roi: rec.summary["roi"].as_str().and_then(|s| s.parse().ok()).unwrap_or(Roi::new(0, 0, 0, 0)),
            result_dir: rec.path.clone(),
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
            report: std::fs::read_to_string(rec.path.join("report.txt")).ok(),
            diagnostics: None,
            error: None,
            created: rec.created,
            finished: None,
        })
    }

    fn job_channel(&self, id: &str, channel: &str) -> Result<Grid<f64>, ServiceError> {
        let job = self.lookup_job(id)?;
        if job.state != JobState::Completed {
            return Err(ServiceError::Busy(format!("job {id} is {:?}", job.state).to_lowercase()));
        }
        let bundle = GridBundle::load(&job.result_dir).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let g = bundle
            .get(channel)
            .ok_or_else(|| ServiceError::NotFound(format!("no channel {channel}")))?;
        Ok(g.map(|&v| v as f64))
    }

    /// The windowed 8-bit preview of one channel.
    pub fn job_preview(&self, token: Option<&str>, id: &str, channel: &str) -> Result<Preview, ServiceError> {
        self.read(token, "job_preview", |_| {
            let g = self.job_channel(id, channel)?;
            let (lo, hi) = self.config.events.preview_window;
            let img = window_image(&g, lo, hi).map_err(|e| ServiceError::Internal(e.to_string()))?;
            Ok(Preview::from_gray(&img))
        })
    }

    /// Raw float values of one channel (NaN as null).
    pub fn job_values(&self, token: Option<&str>, id: &str, channel: &str) -> Result<(usize, usize, Vec<Option<f64>>), ServiceError> {
        self.read(token, "job_values", |_| {
            let g = self.job_channel(id, channel)?;
            let v = g.as_slice().iter().map(|&x| x.is_finite().then_some(x)).collect();
            Ok((g.width(), g.height(), v))
        })
    }
}
