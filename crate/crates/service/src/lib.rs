//! Control service for the gratingscope simulated beamline: authenticated,
//! audited device control, scans, retrieval jobs and live event streams,
//! served over HTTP with server-sent events.

pub mod api;
pub mod auth;
pub mod cli;
pub mod config;
pub mod devices;
pub mod events;
pub mod history;
pub mod index;
pub mod jobs;
pub mod scan;
pub mod service;

pub use auth::{CredentialStore, Role};
pub use config::ServiceConfig;
pub use devices::{StageAction, StageAddress, StageRequest};
pub use events::{Channel, Event, EventBus};
pub use jobs::{JobState, JobStatus, RetrievalRequest};
pub use scan::{ScanRequest, ScanState, ScanStatus};
pub use service::{Clock, ManualClock, Service, ServiceError};
