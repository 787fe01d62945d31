//! Virtual instruments: X-ray tube, piezo stepping stage, flat-panel detector
//! and a phantom, combined into a phenomenological stepping-curve model.
//!
//! Each detector pixel sees
//!
//! ```text
//! I = F(t) · T · I0 · current · exposure · [1 + V0 · σ · cos(2π·x/P + φ_ref + Δφ)]
//! ```
//!
//! where `x` is the true piezo position, `P` the piezo travel per fringe
//! period, `F(t)` the tube drift factor, and `T`, `σ`, `Δφ` come from the
//! phantom (transmission, visibility reduction, refraction-induced fringe shift).

use crate::geometry::{
    fringe_phase_shift, refraction_angle, validate_geometry, BeamlineGeometry, GeometryError,
};
use crate::grid::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeamlineError {
    #[error("tube {name} = {value} outside [{min}, {max}]")]
    TubeOutOfBounds {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("piezo target {target} µm outside travel range [{min}, {max}] µm")]
    PiezoOutOfRange { target: f64, min: f64, max: f64 },
    #[error("invalid detector configuration: {0}")]
    Detector(String),
    #[error("invalid phantom: {0}")]
    Phantom(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Operating bounds enforced by [`TubeState::set`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeLimits {
    pub min_kv: f64,
    pub max_kv: f64,
    pub min_ma: f64,
    pub max_ma: f64,
}

impl Default for TubeLimits {
    fn default() -> Self {
        TubeLimits {
            min_kv: 20.0,
            max_kv: 60.0,
            min_ma: 0.0,
            max_ma: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeState {
    pub on: bool,
    pub voltage_kv: f64,
    pub current_ma: f64,
    /// Relative amplitude of the sinusoidal flux drift.
    pub drift_amplitude: f64,
    /// Period of the flux drift (s).
    pub drift_period_s: f64,
    /// Simulation clock (s), advanced by every detector readout.
    pub clock_s: f64,
    pub limits: TubeLimits,
}

impl Default for TubeState {
    fn default() -> Self {
        TubeState {
            on: false,
            voltage_kv: 45.0,
            current_ma: 22.5,
            drift_amplitude: 0.0,
            drift_period_s: 600.0,
            clock_s: 0.0,
            limits: TubeLimits::default(),
        }
    }
}

impl TubeState {
    /// Switches the tube and sets voltage and current. Values are checked
    /// against the configured limits when switching on; a rejected request
    /// leaves the state untouched.
    pub fn set(&mut self, on: bool, kv: f64, ma: f64) -> Result<(), BeamlineError> {
        if on {
            let lim = self.limits;
            if !(kv.is_finite() && kv >= lim.min_kv && kv <= lim.max_kv) {
                return Err(BeamlineError::TubeOutOfBounds {
                    name: "voltage_kv",
                    value: kv,
                    min: lim.min_kv,
                    max: lim.max_kv,
                });
            }
            if !(ma.is_finite() && ma >= lim.min_ma && ma <= lim.max_ma) {
                return Err(BeamlineError::TubeOutOfBounds {
                    name: "current_ma",
                    value: ma,
                    min: lim.min_ma,
                    max: lim.max_ma,
                });
            }
            self.voltage_kv = kv;
            self.current_ma = ma;
        }
        self.on = on;
        Ok(())
    }

    /// `F(t) = 1 + A·sin(2π·t/T)`.
    pub fn drift_factor(&self) -> f64 {
        if self.drift_amplitude == 0.0 || self.drift_period_s <= 0.0 {
            return 1.0;
        }
        1.0 + self.drift_amplitude * (2.0 * PI * self.clock_s / self.drift_period_s).sin()
    }

    /// Drift-scaled tube current; zero when the tube is off.
    pub fn flux_factor(&self) -> f64 {
        if self.on {
            self.current_ma * self.drift_factor()
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Direction {
    Forward,
    Backward,
}

/// Piezo translation stage with an encoder and a direction-dependent return
/// error.
///
/// The direction of the first move after [`PiezoState::home`] is the reference
/// direction. While the stage travels against it, the carriage stops
/// `return_error` short of the commanded target; each direction reversal thus
/// shifts the encoder reading by exactly `return_error`, and monotone motion
/// from home shows none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiezoState {
    pub commanded_um: f64,
    /// Encoder reading, quantized to `resolution_um`.
    pub encoder_um: f64,
    pub travel_min_um: f64,
    pub travel_max_um: f64,
    pub return_error_um: f64,
    pub resolution_um: f64,
    position_um: f64,
    reference_direction: Option<Direction>,
    last_direction: Option<Direction>,
    move_count: u64,
}

impl Default for PiezoState {
    fn default() -> Self {
        PiezoState::new(0.0, 100.0, 0.0, 0.001)
    }
}

impl PiezoState {
    pub fn new(travel_min_um: f64, travel_max_um: f64, return_error_um: f64, resolution_um: f64) -> Self {
        PiezoState {
            commanded_um: travel_min_um,
            encoder_um: travel_min_um,
            travel_min_um,
            travel_max_um,
            return_error_um,
            resolution_um,
            position_um: travel_min_um,
            reference_direction: None,
            last_direction: None,
            move_count: 0,
        }
    }

    /// True carriage position (µm), which the detector sees.
    pub fn position_um(&self) -> f64 {
        self.position_um
    }

    pub fn move_count(&self) -> u64 {
        self.move_count
    }

    fn quantize(&self, v: f64) -> f64 {
        if self.resolution_um > 0.0 {
            (v / self.resolution_um).round() * self.resolution_um
        } else {
            v
        }
    }

    fn check_target(&self, target: f64) -> Result<(), BeamlineError> {
        if target.is_finite() && target >= self.travel_min_um && target <= self.travel_max_um {
            Ok(())
        } else {
            Err(BeamlineError::PiezoOutOfRange {
                target,
                min: self.travel_min_um,
                max: self.travel_max_um,
            })
        }
    }

    /// Reference run: drives to `target` and clears the direction history.
    pub fn home(&mut self, target: f64) -> Result<(), BeamlineError> {
        self.check_target(target)?;
        self.commanded_um = target;
        self.position_um = target;
        self.encoder_um = self.quantize(target);
        self.reference_direction = None;
        self.last_direction = None;
        self.move_count += 1;
        Ok(())
    }

    /// Moves to `target` (µm). Out-of-range targets are rejected and leave
    /// the state unchanged.
    pub fn move_to(&mut self, target: f64) -> Result<(), BeamlineError> {
        self.check_target(target)?;
        let direction = if target > self.commanded_um {
            Some(Direction::Forward)
        } else if target < self.commanded_um {
            Some(Direction::Backward)
        } else {
            None
        };
        if let Some(dir) = direction {
            if self.reference_direction.is_none() {
                self.reference_direction = Some(dir);
            }
            self.last_direction = Some(dir);
        }
        let against_reference = matches!(
            (self.reference_direction, self.last_direction),
            (Some(r), Some(l)) if r != l
        );
        let offset = if against_reference {
            self.return_error_um
        } else {
            0.0
        };
        self.commanded_um = target;
        self.position_um = target - offset;
        self.encoder_um = self
            .quantize(self.position_um)
            .clamp(self.travel_min_um, self.travel_max_um);
        self.move_count += 1;
        Ok(())
    }
}

/// How a detector exposure is turned into pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutModel {
    /// Poisson shot noise plus Gaussian dark noise, digitized to integer counts.
    #[default]
    Digitized,
    /// Expected counts without noise or digitization.
    Ideal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Dead,
    Hot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Defect {
    pub x: usize,
    pub y: usize,
    pub kind: DefectKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Sensor size in physical pixels.
    pub width: usize,
    pub height: usize,
    pub exposure_time_s: f64,
    /// 1 or 2; frames are `width/binning × height/binning`.
    pub binning: usize,
    pub dark_mean: f64,
    pub dark_sigma: f64,
    /// Per output pixel multiplicative gain, normalized to mean 1.
    pub gain_map: Grid<f64>,
    pub full_well: f64,
    pub defects: Vec<Defect>,
    pub rng_seed: u64,
    pub readout: ReadoutModel,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::uniform(512, 512)
    }
}

impl DetectorConfig {
    /// Unit gain, 100-count dark level with 2 counts of read noise, 0.1 s exposure.
    pub fn uniform(width: usize, height: usize) -> Self {
        DetectorConfig {
            width,
            height,
            exposure_time_s: 0.1,
            binning: 1,
            dark_mean: 100.0,
            dark_sigma: 2.0,
            gain_map: Grid::filled(width, height, 1.0),
            full_well: 65535.0,
            defects: Vec::new(),
            rng_seed: 0,
            readout: ReadoutModel::Digitized,
        }
    }

    /// Noise-free, undigitized detector with a flat gain.
    pub fn ideal(width: usize, height: usize) -> Self {
        DetectorConfig {
            dark_sigma: 0.0,
            readout: ReadoutModel::Ideal,
            ..DetectorConfig::uniform(width, height)
        }
    }

    pub fn frame_width(&self) -> usize {
        self.width / self.binning.max(1)
    }

    pub fn frame_height(&self) -> usize {
        self.height / self.binning.max(1)
    }

    /// Installs a gain map, rescaled so that its mean is exactly 1.
    pub fn with_gain_map(mut self, gain: Grid<f64>) -> Self {
        let mean = gain.mean();
        self.gain_map = gain.map(|g| g / mean);
        self
    }

    pub fn validate(&self) -> Result<(), BeamlineError> {
        let err = |m: String| Err(BeamlineError::Detector(m));
        if self.width == 0 || self.height == 0 {
            return err("dimensions must be positive".into());
        }
        if !matches!(self.binning, 1 | 2) {
            return err(format!("binning must be 1 or 2, got {}", self.binning));
        }
        if self.width % self.binning != 0 || self.height % self.binning != 0 {
            return err(format!(
                "{}x{} not divisible by binning {}",
                self.width, self.height, self.binning
            ));
        }
        if self.gain_map.width() != self.frame_width() || self.gain_map.height() != self.frame_height() {
            return err("gain map does not match frame dimensions".into());
        }
        if self.gain_map.as_slice().iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return err("gain values must be positive".into());
        }
        if !(self.dark_mean >= 0.0 && self.dark_sigma >= 0.0) {
            return err("dark level and noise must be non-negative".into());
        }
        if !(self.exposure_time_s > 0.0) {
            return err("exposure time must be positive".into());
        }
        if !(self.full_well > 0.0 && self.full_well <= 65535.0) {
            return err("full well must be within the 16-bit range".into());
        }
        for d in &self.defects {
            if d.x >= self.frame_width() || d.y >= self.frame_height() {
                return err(format!("defect ({}, {}) outside frame", d.x, d.y));
            }
        }
        Ok(())
    }
}

/// Phase shift map Φ(x, y) of the wave front (rad) on a pixel lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseField {
    /// Pixel pitch in the object plane (m).
    pub pixel_pitch: f64,
    pub values: Grid<f64>,
}

impl PhaseField {
    /// ∂Φ/∂x (rad/m): central differences inside, one-sided at the borders.
    pub fn gradient_x(&self) -> Grid<f64> {
        let w = self.values.width();
        let h = self.values.height();
        let v = &self.values;
        Grid::from_fn(w, h, |x, y| {
            if w < 2 {
                return 0.0;
            }
            let (a, b, span) = if x == 0 {
                (*v.get(0, y), *v.get(1, y), 1.0)
            } else if x == w - 1 {
                (*v.get(w - 2, y), *v.get(w - 1, y), 1.0)
            } else {
                (*v.get(x - 1, y), *v.get(x + 1, y), 2.0)
            };
            (b - a) / (span * self.pixel_pitch)
        })
    }
}

/// Phantom: transmission, phase and scatter (visibility reduction) maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleModel {
    pub transmission: Grid<f64>,
    pub phase: PhaseField,
    pub scatter: Grid<f64>,
    pub in_beam: bool,
}

impl SampleModel {
    pub fn width(&self) -> usize {
        self.transmission.width()
    }

    pub fn height(&self) -> usize {
        self.transmission.height()
    }

    pub fn validate(&self) -> Result<(), BeamlineError> {
        let bad = |m: &str| Err(BeamlineError::Phantom(m.to_string()));
        if self.width() == 0 || self.height() == 0 {
            return bad("empty phantom");
        }
        if !self.transmission.same_shape(&self.scatter) || !self.transmission.same_shape(&self.phase.values) {
            return bad("transmission, phase and scatter grids differ in size");
        }
        if self.transmission.as_slice().iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("transmission must lie in (0, 1]");
        }
        if self.scatter.as_slice().iter().any(|s| !(*s >= 0.0 && *s <= 1.0)) {
            return bad("scatter factor must lie in [0, 1]");
        }
        if self.phase.values.as_slice().iter().any(|p| !p.is_finite()) {
            return bad("phase values must be finite");
        }
        if !(self.phase.pixel_pitch > 0.0) {
            return bad("pixel pitch must be positive");
        }
        Ok(())
    }

    /// Phantom whose fringe shift equals `fringe_shift` rad everywhere: Φ is a
    /// linear ramp along x with the slope that refracts by the matching angle.
    pub fn uniform(
        width: usize,
        height: usize,
        transmission: f64,
        fringe_shift: f64,
        scatter: f64,
        geometry: &BeamlineGeometry,
        pixel_pitch: f64,
    ) -> Self {
        let slope = phase_slope_for_shift(fringe_shift, geometry);
        SampleModel {
            transmission: Grid::filled(width, height, transmission),
            phase: PhaseField {
                pixel_pitch,
                values: Grid::from_fn(width, height, |x, _| slope * x as f64 * pixel_pitch),
            },
            scatter: Grid::filled(width, height, scatter),
            in_beam: false,
        }
    }

    /// Rectangular object of constant `transmission` / `scatter` and a linear
    /// phase ramp producing `fringe_shift`, embedded in empty space.
    #[allow(clippy::too_many_arguments)]
    pub fn slab(
        width: usize,
        height: usize,
        object: crate::grid::Roi,
        transmission: f64,
        fringe_shift: f64,
        scatter: f64,
        geometry: &BeamlineGeometry,
        pixel_pitch: f64,
    ) -> Self {
        let slope = phase_slope_for_shift(fringe_shift, geometry);
        let inside = |x: usize, y: usize| {
            x >= object.x && x < object.x + object.width && y >= object.y && y < object.y + object.height
        };
        // The ramp is continued one pixel beyond the object on each side so
        // that the central differences see the slope up to the edges.
        let x0 = object.x.saturating_sub(1) as f64;
        let x1 = (object.x + object.width) as f64;
        let phase = Grid::from_fn(width, height, |x, y| {
            let inside_rows = y >= object.y && y < object.y + object.height;
            if inside_rows {
                slope * pixel_pitch * ((x as f64).clamp(x0, x1) - x0)
            } else {
                0.0
            }
        });
        SampleModel {
            transmission: Grid::from_fn(width, height, |x, y| if inside(x, y) { transmission } else { 1.0 }),
            phase: PhaseField {
                pixel_pitch,
                values: phase,
            },
            scatter: Grid::from_fn(width, height, |x, y| if inside(x, y) { scatter } else { 1.0 }),
            in_beam: false,
        }
    }
}

/// Phase gradient (rad/m) whose refraction produces `fringe_shift` rad.
pub fn phase_slope_for_shift(fringe_shift: f64, g: &BeamlineGeometry) -> f64 {
    fringe_shift * g.p2 / (g.d * g.lambda)
}

/// Interferometer response parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeModel {
    /// Counts per mA per second per pixel of open beam.
    pub flux_per_ma_s: f64,
    /// Reference visibility V0 without sample.
    pub reference_visibility: f64,
    /// Piezo travel (µm) corresponding to one fringe period.
    pub piezo_period_um: f64,
    /// Fixed per-pixel reference phase φ_ref (rad).
    pub reference_phase: Grid<f64>,
}

impl FringeModel {
    /// Reference phase ramping through `moire_fringes` whole periods across
    /// the frame width (residual Moiré).
    pub fn with_moire(width: usize, height: usize, moire_fringes: f64, piezo_period_um: f64) -> Self {
        FringeModel {
            flux_per_ma_s: 5000.0,
            reference_visibility: 0.2,
            piezo_period_um,
            reference_phase: Grid::from_fn(width, height, |x, _| {
                2.0 * PI * moire_fringes * x as f64 / width as f64
            }),
        }
    }
}

/// Metadata attached to every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub timestamp_s: f64,
    /// Encoder reading at exposure time.
    pub piezo_position_um: f64,
    pub piezo_commanded_um: f64,
    pub tube_on: bool,
    pub tube_kv: f64,
    pub tube_ma: f64,
    pub exposure_time_s: f64,
    pub averaged_count: u32,
}

/// One detector image in 16-bit counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub pixels: Grid<u16>,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn to_f64(&self) -> Grid<f64> {
        self.pixels.map(|&p| p as f64)
    }
}

/// Detector readout before conversion to 16-bit: exact counts for a
/// digitized readout, expected counts for an ideal one.
#[derive(Debug, Clone, PartialEq)]
pub struct Exposure {
    pub values: Grid<f64>,
    pub meta: FrameMeta,
}

impl Exposure {
    pub fn to_frame(&self, full_well: f64) -> Frame {
        Frame {
            pixels: self
                .values
                .map(|&v| v.round().clamp(0.0, full_well.min(65535.0)) as u16),
            meta: self.meta.clone(),
        }
    }
}

/// The complete simulated instrument.
#[derive(Debug, Clone)]
pub struct VirtualBeamline {
    geometry: BeamlineGeometry,
    pub tube: TubeState,
    pub piezo: PiezoState,
    detector: DetectorConfig,
    fringe: FringeModel,
    sample: Option<SampleModel>,
    /// Fringe shift Δφ per pixel derived from the phantom's phase gradient.
    sample_shift: Option<Grid<f64>>,
    /// When false the analyzer is out of the beam (open-beam flat fields).
    pub analyzer_in_beam: bool,
}

impl VirtualBeamline {
    pub fn new(
        geometry: BeamlineGeometry,
        detector: DetectorConfig,
        fringe: FringeModel,
    ) -> Result<Self, BeamlineError> {
        validate_geometry(&geometry)?;
        detector.validate()?;
        if fringe.reference_phase.width() != detector.frame_width()
            || fringe.reference_phase.height() != detector.frame_height()
        {
            return Err(BeamlineError::Detector(
                "reference phase map does not match frame dimensions".into(),
            ));
        }
        if !(fringe.piezo_period_um > 0.0) {
            return Err(BeamlineError::Detector("piezo period must be positive".into()));
        }
        Ok(VirtualBeamline {
            geometry,
            tube: TubeState::default(),
            piezo: PiezoState::default(),
            detector,
            fringe,
            sample: None,
            sample_shift: None,
            analyzer_in_beam: true,
        })
    }

    /// Default instrument scaled to a `width × height` detector: default
    /// geometry, one Moiré fringe across the frame, piezo period equal to p2.
    pub fn with_detector(detector: DetectorConfig) -> Result<Self, BeamlineError> {
        let geometry = BeamlineGeometry::default();
        let fringe = FringeModel::with_moire(
            detector.frame_width(),
            detector.frame_height(),
            1.0,
            geometry.p2 * 1e6,
        );
        VirtualBeamline::new(geometry, detector, fringe)
    }

    pub fn geometry(&self) -> &BeamlineGeometry {
        &self.geometry
    }

    pub fn detector(&self) -> &DetectorConfig {
        &self.detector
    }

    pub fn fringe(&self) -> &FringeModel {
        &self.fringe
    }

    pub fn fringe_mut(&mut self) -> &mut FringeModel {
        &mut self.fringe
    }

    pub fn set_exposure_time(&mut self, seconds: f64) -> Result<(), BeamlineError> {
        if !(seconds > 0.0 && seconds.is_finite()) {
            return Err(BeamlineError::Detector("exposure time must be positive".into()));
        }
        self.detector.exposure_time_s = seconds;
        Ok(())
    }

    pub fn sample(&self) -> Option<&SampleModel> {
        self.sample.as_ref()
    }

    pub fn set_sample(&mut self, sample: SampleModel) -> Result<(), BeamlineError> {
        sample.validate()?;
        if sample.width() != self.detector.frame_width() || sample.height() != self.detector.frame_height() {
            return Err(BeamlineError::Phantom(format!(
                "phantom is {}x{}, frames are {}x{}",
                sample.width(),
                sample.height(),
                self.detector.frame_width(),
                self.detector.frame_height()
            )));
        }
        let grad = sample.phase.gradient_x();
        let mut shift = Vec::with_capacity(grad.len());
        for &g in grad.as_slice() {
            let alpha = refraction_angle(g, self.geometry.lambda)?;
            shift.push(fringe_phase_shift(alpha, self.geometry.d, self.geometry.p2)?);
        }
        self.sample_shift = Some(Grid::from_vec(grad.width(), grad.height(), shift));
        self.sample = Some(sample);
        Ok(())
    }

    /// Moves the sample stage in or out of the beam. No-op without a phantom.
    pub fn set_sample_in_beam(&mut self, in_beam: bool) {
        if let Some(s) = self.sample.as_mut() {
            s.in_beam = in_beam;
        }
    }

    /// Fringe shift Δφ (rad) the loaded phantom produces at each pixel.
    pub fn sample_fringe_shift(&self) -> Option<&Grid<f64>> {
        self.sample_shift.as_ref()
    }

    pub fn sample_in_beam(&self) -> bool {
        self.sample.as_ref().is_some_and(|s| s.in_beam)
    }

    pub fn set_tube(&mut self, on: bool, kv: f64, ma: f64) -> Result<(), BeamlineError> {
        self.tube.set(on, kv, ma)
    }

    pub fn move_piezo(&mut self, target_um: f64) -> Result<(), BeamlineError> {
        self.piezo.move_to(target_um)
    }

    /// Expected counts at pixel (x, y) for a piezo at `piezo_x` µm, excluding
    /// detector gain and dark level.
    pub fn forward_intensity(&self, x: usize, y: usize, piezo_x: f64) -> f64 {
        let flux = self.tube.flux_factor();
        if flux == 0.0 {
            return 0.0;
        }
        flux * self.spatial_intensity(x, y, piezo_x)
    }

    /// Per mA, drift-free part of [`Self::forward_intensity`].
    fn spatial_intensity(&self, x: usize, y: usize, piezo_x: f64) -> f64 {
        let open = self.fringe.flux_per_ma_s * self.detector.exposure_time_s;
        let (t, sigma, shift) = match (&self.sample, &self.sample_shift) {
            (Some(s), Some(shift)) if s.in_beam => {
                (*s.transmission.get(x, y), *s.scatter.get(x, y), *shift.get(x, y))
            }
            _ => (1.0, 1.0, 0.0),
        };
        if !self.analyzer_in_beam {
            return t * open;
        }
        let phase = 2.0 * PI * piezo_x / self.fringe.piezo_period_um
            + *self.fringe.reference_phase.get(x, y)
            + shift;
        t * open * (1.0 + self.fringe.reference_visibility * sigma * phase.cos())
    }

    fn spatial_map(&self, piezo_x: f64) -> Grid<f64> {
        let w = self.detector.frame_width();
        let h = self.detector.frame_height();
        let mut data = vec![0.0; w * h];
        data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = self.spatial_intensity(x, y, piezo_x);
            }
        });
        Grid::from_vec(w, h, data)
    }

    fn frame_meta(&self, averaged_count: u32) -> FrameMeta {
        FrameMeta {
            timestamp_s: self.tube.clock_s,
            piezo_position_um: self.piezo.encoder_um,
            piezo_commanded_um: self.piezo.commanded_um,
            tube_on: self.tube.on,
            tube_kv: self.tube.voltage_kv,
            tube_ma: self.tube.current_ma,
            exposure_time_s: self.detector.exposure_time_s,
            averaged_count,
        }
    }

    fn readout(&self, spatial: &Grid<f64>, flux: f64, seed: u64) -> Grid<f64> {
        let det = &self.detector;
        let bin_area = (det.binning * det.binning) as f64;
        let dark_mean = det.dark_mean * bin_area;
        let dark_sigma = det.dark_sigma * det.binning as f64;
        let w = spatial.width();
        let h = spatial.height();
        let mut data = vec![0.0; w * h];
        let gain = det.gain_map.as_slice();
        let expected = spatial.as_slice();
        let full_well = det.full_well;
        match det.readout {
            ReadoutModel::Ideal => {
                data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
                    for (x, v) in row.iter_mut().enumerate() {
                        let i = y * w + x;
                        *v = (flux * expected[i] * gain[i] * bin_area + dark_mean).clamp(0.0, full_well);
                    }
                });
            }
            ReadoutModel::Digitized => {
                let dark = Normal::new(dark_mean, dark_sigma).expect("dark noise parameters");
                data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(y as u64);
                    for (x, v) in row.iter_mut().enumerate() {
                        let i = y * w + x;
                        let lambda = flux * expected[i] * gain[i] * bin_area;
                        let shot = if lambda > 0.0 {
                            Poisson::new(lambda).expect("finite rate").sample(&mut rng)
                        } else {
                            0.0
                        };
                        let noise = if dark_sigma > 0.0 {
                            dark.sample(&mut rng)
                        } else {
                            dark_mean
                        };
                        *v = (shot + noise).round().clamp(0.0, full_well);
                    }
                });
            }
        }
        let mut out = Grid::from_vec(w, h, data);
        for d in &det.defects {
            *out.get_mut(d.x, d.y) = match d.kind {
                DefectKind::Dead => 0.0,
                DefectKind::Hot => full_well,
            };
        }
        out
    }

    /// Single readout at the current state. Pure: the clock is not advanced.
    pub fn render_exposure(&self, seed: u64) -> Exposure {
        let spatial = self.spatial_map(self.piezo.position_um());
        Exposure {
            values: self.readout(&spatial, self.tube.flux_factor(), seed),
            meta: self.frame_meta(1),
        }
    }

    /// Single 16-bit frame at the current state; deterministic in `seed`.
    pub fn render_frame(&self, seed: u64) -> Frame {
        self.render_exposure(seed).to_frame(self.detector.full_well)
    }

    /// `n` consecutive readouts at the current piezo position, advancing the
    /// tube clock by one exposure time per readout. Readout `i` uses seed
    /// `seed + i`.
    pub fn expose_series(&mut self, n: usize, seed: u64) -> Vec<Exposure> {
        let spatial = self.spatial_map(self.piezo.position_um());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let values = self.readout(&spatial, self.tube.flux_factor(), seed.wrapping_add(i as u64));
            out.push(Exposure {
                values,
                meta: self.frame_meta(1),
            });
            self.tube.clock_s += self.detector.exposure_time_s;
        }
        out
    }
}
