//! Simulated grating-interferometer (Talbot-Lau) X-ray phase-contrast
//! beamline.
//!
//! * [`geometry`]: grating periods, distances and the closed-form relations
//!   between them.
//! * [`beamline`]: tube, piezo stage, detector and phantom, plus the
//!   stepping-curve forward model that renders frames.
//! * [`protocol`]: the ASCII stepper-controller command set and an emulated
//!   controller (in-process or over TCP).
//! * [`acquisition`]: averaging, offset/gain correction and the two
//!   phase-stepping scan modes.
//! * [`retrieval`]: transmission, differential-phase and dark-field
//!   retrieval, drift calibration and display windowing.
//! * [`dataset`]: the on-disk dataset and float-grid formats.

pub mod acquisition;
pub mod beamline;
pub mod dataset;
pub mod geometry;
pub mod grid;
pub mod protocol;
pub mod retrieval;
pub mod scenario;

pub use acquisition::{
    acquire_averaged, acquire_correction_maps, correct, run_scan, shift_curve, Arm, ArmSelection,
    CorrectionMaps, ScanConfig, ScanEvent, ScanHooks, ScanMode, SteppingDataset,
};
pub use beamline::{DetectorConfig, Frame, ReadoutModel, SampleModel, VirtualBeamline};
pub use dataset::{load_dataset, save_dataset, GridBundle};
pub use geometry::{complete_geometry, validate_geometry, BeamlineGeometry, PartialGeometry};
pub use grid::{Grid, Roi};
pub use retrieval::{
    analyze_reference, calibrate_drift, fourier_components, retrieve, window_image, DriftMargin,
    RetrievalParams, RetrievalResult,
};
pub use scenario::{Phantom, Scenario};
