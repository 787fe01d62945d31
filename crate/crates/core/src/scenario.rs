//! Ready-made simulation setups: the default instrument at the tube
//! settings used for phase-stepping experiments (45 kV, 22.5 mA, 50 steps,
//! 30 averaged images), with a configurable phantom.

use crate::acquisition::{
    acquire_correction_maps, run_scan, AcquisitionError, ArmSelection, CorrectionMaps, ScanConfig,
    ScanHooks, ScanMode, ScanOutcome,
};
use crate::beamline::{BeamlineError, DetectorConfig, ReadoutModel, SampleModel, VirtualBeamline};
use crate::grid::{Grid, Roi};
use serde::{Deserialize, Serialize};

pub const NOMINAL_KV: f64 = 45.0;
pub const NOMINAL_MA: f64 = 22.5;
pub const NOMINAL_STEPS: usize = 50;
pub const NOMINAL_AVERAGES: usize = 30;

/// Detector pixel pitch used for phantoms (m).
pub const PIXEL_PITCH: f64 = 50e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phantom {
    /// The same transmission, fringe shift and scatter everywhere.
    Uniform {
        transmission: f64,
        fringe_shift: f64,
        scatter: f64,
    },
    /// A rectangular object in empty space.
    Slab {
        object: Roi,
        transmission: f64,
        fringe_shift: f64,
        scatter: f64,
    },
}

impl Phantom {
    /// The phantom with T = 0.8, Δφ = 0.3 rad and σ = 0.9.
    pub fn standard() -> Self {
        Phantom::Uniform {
            transmission: 0.8,
            fringe_shift: 0.3,
            scatter: 0.9,
        }
    }

    pub fn build(&self, bl: &VirtualBeamline) -> SampleModel {
        let g = bl.geometry();
        let w = bl.detector().frame_width();
        let h = bl.detector().frame_height();
        match *self {
            Phantom::Uniform {
                transmission,
                fringe_shift,
                scatter,
            } => SampleModel::uniform(w, h, transmission, fringe_shift, scatter, g, PIXEL_PITCH),
            Phantom::Slab {
                object,
                transmission,
                fringe_shift,
                scatter,
            } => SampleModel::slab(w, h, object, transmission, fringe_shift, scatter, g, PIXEL_PITCH),
        }
    }

    /// Ground-truth (transmission, fringe shift, scatter) maps on `bl`'s
    /// detector. The fringe shift follows the phantom's phase gradient, so
    /// it is halved on the columns just outside a slab's edges.
    pub fn truth(&self, bl: &VirtualBeamline) -> [Grid<f64>; 3] {
        let sample = self.build(bl);
        let mut probe = bl.clone();
        probe.set_sample(sample.clone()).expect("phantom matches detector");
        let shift = probe.sample_fringe_shift().expect("phantom loaded").clone();
        [sample.transmission, shift, sample.scatter]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub width: usize,
    pub height: usize,
    pub readout: ReadoutModel,
    pub phantom: Phantom,
    pub steps: usize,
    pub averages: usize,
    pub return_error_um: f64,
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
    pub seed: u64,
    /// Frames averaged for the dark and flat calibration images.
    pub calibration_frames: usize,
}

impl Scenario {
    /// Noise-free detector at the standard tube settings.
    pub fn noiseless(width: usize, height: usize) -> Self {
        Scenario {
            width,
            height,
            readout: ReadoutModel::Ideal,
            phantom: Phantom::standard(),
            steps: NOMINAL_STEPS,
            averages: NOMINAL_AVERAGES,
            return_error_um: 0.0,
            drift_amplitude: 0.0,
            drift_period_s: 600.0,
            seed: 1,
            calibration_frames: 8,
        }
    }

    /// Shot and read noise enabled.
    pub fn noisy(width: usize, height: usize) -> Self {
        Scenario {
            readout: ReadoutModel::Digitized,
            calibration_frames: NOMINAL_AVERAGES,
            ..Scenario::noiseless(width, height)
        }
    }

    pub fn beamline(&self) -> Result<VirtualBeamline, BeamlineError> {
        let det = DetectorConfig {
            readout: self.readout,
            dark_sigma: match self.readout {
                ReadoutModel::Ideal => 0.0,
                ReadoutModel::Digitized => 2.0,
            },
            rng_seed: self.seed,
            ..DetectorConfig::uniform(self.width, self.height)
        };
        let mut bl = VirtualBeamline::with_detector(det)?;
        bl.set_tube(true, NOMINAL_KV, NOMINAL_MA)?;
        bl.tube.drift_amplitude = self.drift_amplitude;
        bl.tube.drift_period_s = self.drift_period_s;
        bl.piezo.return_error_um = self.return_error_um;
        let sample = self.phantom.build(&bl);
        bl.set_sample(sample)?;
        Ok(bl)
    }

    pub fn scan_config(&self, mode: ScanMode) -> ScanConfig {
        ScanConfig {
            mode,
            steps: self.steps,
            frames_to_average: self.averages,
            seed: self.seed,
            arms: ArmSelection::Both,
            ..ScanConfig::default()
        }
    }

    /// Builds the instrument, records dark and flat images, then scans both
    /// arms in `mode`.
    pub fn run(&self, mode: ScanMode) -> Result<ScenarioRun, AcquisitionError> {
        let mut beamline = self.beamline()?;
        let maps = acquire_correction_maps(&mut beamline, self.calibration_frames, self.seed ^ 0xCA11)?;
        // Calibration time does not count towards the drift phase of the scan.
        beamline.tube.clock_s = 0.0;
        let outcome = run_scan(&mut beamline, &self.scan_config(mode), &maps, ScanHooks::default())?;
        Ok(ScenarioRun {
            beamline,
            maps,
            outcome,
        })
    }
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub beamline: VirtualBeamline,
    pub maps: CorrectionMaps,
    pub outcome: ScanOutcome,
}
