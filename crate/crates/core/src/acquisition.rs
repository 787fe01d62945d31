//! Frame capture on the virtual beamline: integration (averaging), offset and
//! gain correction, the two phase-stepping scan procedures, and the live
//! shift curve.
//!
//! Step positions cover exactly one fringe period, endpoint exclusive:
//! `x_k = start + k·P/N` for `k = 0..N`.
//!
//! * Mode A acquires one arm per pass. The first pass steps forward; when both
//!   arms are requested the piezo then moves to the end of the period and the
//!   second pass steps back down through the same positions. The piezo
//!   reverses between the passes, so the second arm carries the stage's
//!   return error.
//! * Mode B acquires reference and sample frames at every position (the
//!   sample stage swaps the sample out and in) before stepping forward. The
//!   piezo never reverses.

use crate::beamline::{BeamlineError, Exposure, Frame, FrameMeta, VirtualBeamline};
use crate::dataset::{DatasetError, DatasetWriter};
use crate::geometry::BeamlineGeometry;
use crate::grid::{Grid, Roi};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("invalid scan configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Beamline(#[from] BeamlineError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanMode {
    A,
    B,
}

impl std::str::FromStr for ScanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(ScanMode::A),
            "b" | "B" => Ok(ScanMode::B),
            other => Err(format!("unknown scan mode {other:?} (expected a or b)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Reference,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmSelection {
    Reference,
    Sample,
    Both,
}

impl ArmSelection {
    pub fn arms(self) -> &'static [Arm] {
        match self {
            ArmSelection::Reference => &[Arm::Reference],
            ArmSelection::Sample => &[Arm::Sample],
            ArmSelection::Both => &[Arm::Reference, Arm::Sample],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub mode: ScanMode,
    pub steps: usize,
    /// Piezo increment (µm); `None` means one period divided by `steps`.
    pub step_size_um: Option<f64>,
    /// Piezo position of step 0 (µm).
    pub start_um: f64,
    pub exposure_time_s: f64,
    pub frames_to_average: usize,
    /// Region for the live shift curve; whole frame when absent.
    pub roi: Option<Roi>,
    pub seed: u64,
    pub arms: ArmSelection,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            mode: ScanMode::B,
            steps: 50,
            step_size_um: None,
            start_um: 5.0,
            exposure_time_s: 0.1,
            frames_to_average: 30,
            roi: None,
            seed: 0,
            arms: ArmSelection::Both,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self, piezo_period_um: f64) -> Result<(), AcquisitionError> {
        let bad = |m: String| Err(AcquisitionError::InvalidConfig(m));
        if self.steps < 3 {
            return bad(format!("steps must be at least 3, got {}", self.steps));
        }
        if self.frames_to_average < 1 {
            return bad("frames_to_average must be at least 1".into());
        }
        if !(self.exposure_time_s > 0.0 && self.exposure_time_s.is_finite()) {
            return bad("exposure time must be positive".into());
        }
        if !self.start_um.is_finite() {
            return bad("start position must be finite".into());
        }
        if let Some(s) = self.step_size_um {
            let span = s * self.steps as f64;
            if !((span - piezo_period_um).abs() <= 1e-9 * piezo_period_um) {
                return bad(format!(
                    "steps × step size = {span} µm must equal one fringe period ({piezo_period_um} µm)"
                ));
            }
        }
        if self.mode == ScanMode::B && self.arms != ArmSelection::Both {
            return bad("mode B acquires both arms".into());
        }
        if let Some(roi) = &self.roi {
            if roi.is_empty() {
                return bad("roi is empty".into());
            }
        }
        Ok(())
    }

    pub fn step_size(&self, piezo_period_um: f64) -> f64 {
        self.step_size_um
            .unwrap_or(piezo_period_um / self.steps as f64)
    }

    /// Commanded piezo position of step `k`.
    pub fn position(&self, k: usize, piezo_period_um: f64) -> f64 {
        self.start_um + k as f64 * self.step_size(piezo_period_um)
    }

    pub fn expected_frames(&self) -> usize {
        self.steps * self.arms.arms().len()
    }
}

/// One averaged, corrected frame of a stepping dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub step: usize,
    pub arm: Arm,
    /// Averaged frame as 16-bit counts.
    pub raw: Frame,
    /// Offset/gain corrected image.
    pub corrected: Grid<f32>,
    /// Mean of `corrected` over the whole frame.
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteppingDataset {
    pub width: usize,
    pub height: usize,
    pub config: ScanConfig,
    pub geometry: BeamlineGeometry,
    pub piezo_period_um: f64,
    /// In acquisition order.
    pub frames: Vec<DatasetFrame>,
    /// False when the scan was aborted.
    pub complete: bool,
}

/// The frames of one arm as float images, ordered by step.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmStack {
    pub arm: Arm,
    pub frames: Vec<Grid<f64>>,
}

impl ArmStack {
    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, Grid::width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, Grid::height)
    }

    /// Values of pixel `(x, y)` across the steps.
    pub fn curve(&self, x: usize, y: usize) -> Vec<f64> {
        self.frames.iter().map(|f| *f.get(x, y)).collect()
    }

    /// Mean over `roi` for every step.
    pub fn roi_curve(&self, roi: &Roi) -> Vec<f64> {
        self.frames.iter().map(|f| f.roi_mean(roi)).collect()
    }
}

impl SteppingDataset {
    pub fn empty(
        width: usize,
        height: usize,
        config: ScanConfig,
        geometry: BeamlineGeometry,
        piezo_period_um: f64,
    ) -> Self {
        SteppingDataset {
            width,
            height,
            config,
            geometry,
            piezo_period_um,
            frames: Vec::new(),
            complete: false,
        }
    }

    pub fn has_arm(&self, arm: Arm) -> bool {
        self.frames.iter().any(|f| f.arm == arm)
    }

    pub fn arms_present(&self) -> Vec<Arm> {
        [Arm::Reference, Arm::Sample]
            .into_iter()
            .filter(|a| self.has_arm(*a))
            .collect()
    }

    /// Frames of `arm` sorted by step.
    pub fn frames_of(&self, arm: Arm) -> Vec<&DatasetFrame> {
        let mut v: Vec<&DatasetFrame> = self.frames.iter().filter(|f| f.arm == arm).collect();
        v.sort_by_key(|f| f.step);
        v
    }

    /// All `steps` corrected frames of `arm`, or `None` if any step is missing.
    pub fn arm_stack(&self, arm: Arm) -> Option<ArmStack> {
        let frames = self.frames_of(arm);
        if frames.len() != self.config.steps
            || frames.iter().enumerate().any(|(k, f)| f.step != k)
        {
            return None;
        }
        Some(ArmStack {
            arm,
            frames: frames
                .iter()
                .map(|f| f.corrected.map(|&v| v as f64))
                .collect(),
        })
    }

    /// The arm to use when this dataset supplies `wanted`: that arm if
    /// recorded, otherwise the dataset's only arm.
    pub fn stack_for(&self, wanted: Arm) -> Option<ArmStack> {
        if self.has_arm(wanted) {
            return self.arm_stack(wanted);
        }
        match self.arms_present().as_slice() {
            [only] => self.arm_stack(*only),
            _ => None,
        }
    }
}

/// Offset (dark) and gain (flat) calibration frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionMaps {
    pub offset: Grid<f64>,
    pub gain_flat: Grid<f64>,
    pub valid: bool,
}

impl CorrectionMaps {
    /// Maps that leave frames unchanged.
    pub fn passthrough(width: usize, height: usize) -> Self {
        CorrectionMaps {
            offset: Grid::filled(width, height, 0.0),
            gain_flat: Grid::filled(width, height, 1.0),
            valid: true,
        }
    }

    /// Pixels where `gain_flat − offset ≤ 0`.
    pub fn defect_mask(&self) -> Grid<bool> {
        Grid::from_fn(self.offset.width(), self.offset.height(), |x, y| {
            !(self.gain_flat.get(x, y) - self.offset.get(x, y) > 0.0)
        })
    }
}

/// Integration-mode result: the rounded 16-bit frame and the exact mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedFrame {
    pub frame: Frame,
    pub mean: Grid<f64>,
}

/// Pixel-wise mean of `n` consecutive readouts.
pub fn acquire_averaged(
    beamline: &mut VirtualBeamline,
    n: usize,
    seed: u64,
) -> Result<AveragedFrame, AcquisitionError> {
    if n == 0 {
        return Err(AcquisitionError::InvalidInput("average count must be at least 1".into()));
    }
    let exposures = beamline.expose_series(n, seed);
    Ok(average_exposures(&exposures, beamline.detector().full_well))
}

fn average_exposures(exposures: &[Exposure], full_well: f64) -> AveragedFrame {
    let first = &exposures[0];
    let n = exposures.len();
    let mut sum = vec![0.0f64; first.values.len()];
    for e in exposures {
        for (s, v) in sum.iter_mut().zip(e.values.as_slice()) {
            *s += v;
        }
    }
    let mean = Grid::from_vec(
        first.values.width(),
        first.values.height(),
        sum.into_iter().map(|s| s / n as f64).collect(),
    );
    let meta = FrameMeta {
        averaged_count: n as u32,
        ..first.meta.clone()
    };
    let frame = Exposure {
        values: mean.clone(),
        meta,
    }
    .to_frame(full_well);
    AveragedFrame { frame, mean }
}

/// Averages `n` dark frames (tube off) and `n` open-beam flats (analyzer and
/// sample out). The beamline state is restored afterwards.
pub fn acquire_correction_maps(
    beamline: &mut VirtualBeamline,
    n: usize,
    seed: u64,
) -> Result<CorrectionMaps, AcquisitionError> {
    if !beamline.tube.on {
        return Err(AcquisitionError::InvalidInput(
            "flat-field calibration requires the tube to be on".into(),
        ));
    }
    let sample_in = beamline.sample_in_beam();
    let analyzer_in = beamline.analyzer_in_beam;

    beamline.tube.on = false;
    let dark = acquire_averaged(beamline, n, seed);
    beamline.tube.on = true;
    let dark = dark?;

    beamline.set_sample_in_beam(false);
    beamline.analyzer_in_beam = false;
    let flat = acquire_averaged(beamline, n, seed.wrapping_add(0x5EED_0F1A));
    beamline.analyzer_in_beam = analyzer_in;
    beamline.set_sample_in_beam(sample_in);
    let flat = flat?;

    Ok(CorrectionMaps {
        offset: dark.mean,
        gain_flat: flat.mean,
        valid: true,
    })
}

/// `(frame − offset) / (gain_flat − offset) · mean(gain_flat − offset)`.
/// Pixels with a non-positive denominator are replaced by the mean of their
/// valid 4-neighbours.
pub fn correct(frame: &Grid<f64>, maps: &CorrectionMaps) -> Result<Grid<f64>, AcquisitionError> {
    if !maps.valid {
        return Err(AcquisitionError::InvalidInput("correction maps are not valid".into()));
    }
    if !frame.same_shape(&maps.offset) || !frame.same_shape(&maps.gain_flat) {
        return Err(AcquisitionError::ShapeMismatch(format!(
            "frame {}x{} vs maps {}x{}",
            frame.width(),
            frame.height(),
            maps.offset.width(),
            maps.offset.height()
        )));
    }
    let w = frame.width();
    let h = frame.height();
    let defective = maps.defect_mask();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (g, o) in maps.gain_flat.as_slice().iter().zip(maps.offset.as_slice()) {
        if g - o > 0.0 {
            sum += g - o;
            count += 1;
        }
    }
    let norm = if count > 0 { sum / count as f64 } else { 1.0 };
    let mut out = Grid::from_fn(w, h, |x, y| {
        if *defective.get(x, y) {
            0.0
        } else {
            (frame.get(x, y) - maps.offset.get(x, y)) / (maps.gain_flat.get(x, y) - maps.offset.get(x, y)) * norm
        }
    });
    for y in 0..h {
        for x in 0..w {
            if !*defective.get(x, y) {
                continue;
            }
            let mut acc = 0.0;
            let mut k = 0;
            let neighbours = [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ];
            for (nx, ny) in neighbours {
                if nx < w && ny < h && !*defective.get(nx, ny) {
                    acc += out.get(nx, ny);
                    k += 1;
                }
            }
            *out.get_mut(x, y) = if k > 0 { acc / k as f64 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Progress notifications emitted during a scan, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanEvent {
    Started {
        mode: ScanMode,
        steps: usize,
        frames_expected: usize,
    },
    PiezoMoved {
        commanded_um: f64,
        encoder_um: f64,
    },
    /// Mean corrected intensity over the scan roi for one step of one arm.
    ShiftPoint { arm: Arm, step: usize, mean: f64 },
    Finished { complete: bool, frames: usize },
}

/// Optional scan collaborators.
#[derive(Default)]
pub struct ScanHooks<'a> {
    /// Checked before every frame; setting it aborts the scan.
    pub abort: Option<&'a AtomicBool>,
    /// Directory the dataset is written to as it grows.
    pub output_dir: Option<&'a Path>,
    pub observer: Option<&'a mut dyn FnMut(&ScanEvent)>,
    /// Sees every stored frame before its shift point is emitted.
    pub frame_observer: Option<&'a mut dyn FnMut(&DatasetFrame)>,
}

/// A piezo move issued during the scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiezoMove {
    pub commanded_um: f64,
    pub encoder_um: f64,
}

#[derive(Debug)]
pub struct ScanOutcome {
    pub dataset: SteppingDataset,
    pub motion_log: Vec<PiezoMove>,
    /// Why the scan stopped early, if it did.
    pub abort_reason: Option<String>,
}

fn frame_seed(base: u64, arm: Arm, step: usize, steps: usize) -> u64 {
    // splitmix64 of the frame index
    let index = (arm as u64) * steps as u64 + step as u64;
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ScanRun<'a, 'h> {
    beamline: &'a mut VirtualBeamline,
    config: &'a ScanConfig,
    maps: &'a CorrectionMaps,
    hooks: ScanHooks<'h>,
    dataset: SteppingDataset,
    writer: Option<DatasetWriter>,
    motion_log: Vec<PiezoMove>,
    roi: Roi,
    period: f64,
}

enum Stop {
    Aborted(String),
    Failed(AcquisitionError),
}

impl From<AcquisitionError> for Stop {
    fn from(e: AcquisitionError) -> Self {
        Stop::Failed(e)
    }
}

impl ScanRun<'_, '_> {
    fn emit(&mut self, ev: ScanEvent) {
        if let Some(obs) = self.hooks.observer.as_mut() {
            obs(&ev);
        }
    }

    fn check_abort(&self) -> Result<(), Stop> {
        match self.hooks.abort {
            Some(flag) if flag.load(Ordering::SeqCst) => Err(Stop::Aborted("abort requested".into())),
            _ => Ok(()),
        }
    }

    fn move_piezo(&mut self, target: f64) -> Result<(), Stop> {
        self.beamline
            .move_piezo(target)
            .map_err(|e| Stop::Aborted(format!("piezo fault: {e}")))?;
        let mv = PiezoMove {
            commanded_um: self.beamline.piezo.commanded_um,
            encoder_um: self.beamline.piezo.encoder_um,
        };
        self.motion_log.push(mv);
        self.emit(ScanEvent::PiezoMoved {
            commanded_um: mv.commanded_um,
            encoder_um: mv.encoder_um,
        });
        Ok(())
    }

    fn acquire(&mut self, arm: Arm, step: usize) -> Result<(), Stop> {
        self.check_abort()?;
        self.beamline.set_sample_in_beam(arm == Arm::Sample);
        let seed = frame_seed(self.config.seed, arm, step, self.config.steps);
        let averaged = acquire_averaged(self.beamline, self.config.frames_to_average, seed)?;
        let corrected = correct(&averaged.mean, self.maps)?.map(|&v| v as f32);
        let as_f64 = corrected.map(|&v| v as f64);
        let frame = DatasetFrame {
            step,
            arm,
            raw: averaged.frame,
            mean_intensity: as_f64.mean(),
            corrected,
        };
        if let Some(w) = self.writer.as_mut() {
            w.append(&frame).map_err(AcquisitionError::from)?;
        }
        let mean = as_f64.roi_mean(&self.roi);
        if let Some(obs) = self.hooks.frame_observer.as_mut() {
            obs(&frame);
        }
        self.dataset.frames.push(frame);
        self.emit(ScanEvent::ShiftPoint { arm, step, mean });
        Ok(())
    }

    fn run(&mut self) -> Result<(), Stop> {
        let n = self.config.steps;
        self.beamline
            .piezo
            .home(self.config.start_um)
            .map_err(|e| Stop::Aborted(format!("piezo fault: {e}")))?;
        match self.config.mode {
            ScanMode::A => {
                let arms = self.config.arms.arms();
                for k in 0..n {
                    self.move_piezo(self.config.position(k, self.period))?;
                    self.acquire(arms[0], k)?;
                }
                if let Some(&second) = arms.get(1) {
                    self.move_piezo(self.config.position(n, self.period))?;
                    for k in (0..n).rev() {
                        self.move_piezo(self.config.position(k, self.period))?;
                        self.acquire(second, k)?;
                    }
                }
            }
            ScanMode::B => {
                for k in 0..n {
                    self.move_piezo(self.config.position(k, self.period))?;
                    self.acquire(Arm::Reference, k)?;
                    self.acquire(Arm::Sample, k)?;
                }
            }
        }
        Ok(())
    }
}

/// Runs a phase-stepping scan on `beamline`, correcting every averaged frame
/// with `maps`. An abort request or a device fault ends the scan early and
/// yields an incomplete dataset with the frames acquired so far.
pub fn run_scan(
    beamline: &mut VirtualBeamline,
    config: &ScanConfig,
    maps: &CorrectionMaps,
    hooks: ScanHooks<'_>,
) -> Result<ScanOutcome, AcquisitionError> {
    let period = beamline.fringe().piezo_period_um;
    config.validate(period)?;
    if !beamline.tube.on {
        return Err(AcquisitionError::InvalidInput("scan requires the tube to be on".into()));
    }
    if config.arms != ArmSelection::Reference && beamline.sample().is_none() {
        return Err(AcquisitionError::InvalidInput("no sample loaded for the sample arm".into()));
    }
    let width = beamline.detector().frame_width();
    let height = beamline.detector().frame_height();
    if !maps.offset.same_shape(&Grid::<u8>::filled(width, height, 0)) {
        return Err(AcquisitionError::ShapeMismatch("correction maps do not match the detector".into()));
    }
    let roi = config.roi.unwrap_or(Roi::full(width, height));
    if !roi.fits_in(width, height) {
        return Err(AcquisitionError::InvalidConfig(format!("roi {roi} outside {width}x{height} frame")));
    }
    beamline.set_exposure_time(config.exposure_time_s)?;

    let dataset = SteppingDataset::empty(width, height, config.clone(), *beamline.geometry(), period);
    let writer = match hooks.output_dir {
        Some(dir) => Some(DatasetWriter::create(dir, &dataset)?),
        None => None,
    };
    let sample_was_in = beamline.sample_in_beam();
    let mut run = ScanRun {
        beamline,
        config,
        maps,
        hooks,
        dataset,
        writer,
        motion_log: Vec::new(),
        roi,
        period,
    };
    run.emit(ScanEvent::Started {
        mode: config.mode,
        steps: config.steps,
        frames_expected: config.expected_frames(),
    });
    let result = run.run();
    run.beamline.set_sample_in_beam(sample_was_in);
    let abort_reason = match result {
        Ok(()) => None,
        Err(Stop::Aborted(reason)) => Some(reason),
        Err(Stop::Failed(e)) => return Err(e),
    };
    run.dataset.complete = abort_reason.is_none();
    let frames = run.dataset.frames.len();
    if let Some(w) = run.writer.take() {
        w.finish(run.dataset.complete)?;
    }
    let complete = run.dataset.complete;
    run.emit(ScanEvent::Finished { complete, frames });
    Ok(ScanOutcome {
        dataset: run.dataset,
        motion_log: run.motion_log,
        abort_reason,
    })
}

/// `(step, mean corrected intensity over roi)` for each recorded step of `arm`.
pub fn shift_curve(
    ds: &SteppingDataset,
    arm: Arm,
    roi: &Roi,
) -> Result<Vec<(usize, f64)>, AcquisitionError> {
    if roi.is_empty() {
        return Err(AcquisitionError::InvalidInput("roi is empty".into()));
    }
    if !roi.fits_in(ds.width, ds.height) {
        return Err(AcquisitionError::InvalidInput(format!(
            "roi {roi} outside {}x{} frame",
            ds.width, ds.height
        )));
    }
    let frames = ds.frames_of(arm);
    if frames.is_empty() {
        return Err(AcquisitionError::InvalidInput(format!("no {arm:?} frames recorded")));
    }
    Ok(frames
        .iter()
        .map(|f| (f.step, f.corrected.map(|&v| v as f64).roi_mean(roi)))
        .collect())
}
