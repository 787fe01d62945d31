//! Phase-stepping signal retrieval: per-pixel first-harmonic analysis of the
//! stepping curves, reference-curve diagnostics (period, start phase,
//! visibility), margin-based drift calibration and display windowing.
//!
//! For a curve `y_k`, `k = 0..N`, sampled over one fringe period:
//!
//! ```text
//! a0  = mean(y)
//! c1  = (2/N) Σ y_k exp(-i 2πk/N)
//! a1  = |c1|,  phi = arg(c1)
//! ```
//!
//! Transmission is `a0_s / a0_r`, differential phase is `wrap(phi_s - phi_r)`
//! and dark field is the visibility ratio `(a1_s/a0_s) / (a1_r/a0_r)`.

use crate::acquisition::{Arm, ArmStack, SteppingDataset};
use crate::dataset::{write_pgm, DatasetError, GridBundle};
use crate::grid::{Grid, Roi};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Relative visibility below which a curve has no usable phase.
pub const VISIBILITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no fringes: visibility {visibility:.3e} is below {floor:.3e} (check grating alignment)")]
    NoFringe { visibility: f64, floor: f64 },
    #[error("incompatible datasets: {0}")]
    Incompatible(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Wraps an angle into (−π, π].
pub fn wrap_phase(x: f64) -> f64 {
    x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierComponents {
    pub a0: f64,
    pub a1: f64,
    pub phi: f64,
    /// `a1/a0` below [`VISIBILITY_FLOOR`]; `phi` is then reported as 0.
    pub degenerate: bool,
}

impl FourierComponents {
    pub fn visibility(&self) -> f64 {
        if self.a0 != 0.0 {
            self.a1 / self.a0
        } else {
            0.0
        }
    }
}

/// `cos`/`sin` of `2πk/N` for one curve length, shared across pixels.
#[derive(Debug, Clone)]
pub struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    pub fn new(n: usize) -> Self {
        let (cos, sin) = (0..n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / n as f64;
                (t.cos(), t.sin())
            })
            .unzip();
        Twiddles { cos, sin }
    }

    pub fn len(&self) -> usize {
        self.cos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    /// Components of `curve`, whose length must equal [`Self::len`].
    pub fn analyze(&self, curve: &[f64]) -> FourierComponents {
        debug_assert_eq!(curve.len(), self.len());
        let n = curve.len() as f64;
        let mut sum = 0.0;
        let mut re = 0.0;
        let mut im = 0.0;
        for ((y, c), s) in curve.iter().zip(&self.cos).zip(&self.sin) {
            sum += y;
            re += y * c;
            im -= y * s;
        }
        let a0 = sum / n;
        re *= 2.0 / n;
        im *= 2.0 / n;
        let a1 = re.hypot(im);
        let degenerate = !(a1 >= VISIBILITY_FLOOR * a0.abs()) || a1 == 0.0;
        let phi = if degenerate { 0.0 } else { wrap_phase(im.atan2(re)) };
        FourierComponents {
            a0,
            a1,
            phi,
            degenerate,
        }
    }
}

/// Mean, first-harmonic amplitude and phase of a curve covering one period.
pub fn fourier_components(curve: &[f64]) -> Result<FourierComponents, RetrievalError> {
    if curve.len() < 3 {
        return Err(RetrievalError::InvalidInput(format!(
            "a stepping curve needs at least 3 samples, got {}",
            curve.len()
        )));
    }
    if curve.iter().any(|v| !v.is_finite()) {
        return Err(RetrievalError::InvalidInput("curve contains non-finite samples".into()));
    }
    Ok(Twiddles::new(curve.len()).analyze(curve))
}

/// Reference-curve diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    pub a0: f64,
    pub a1: f64,
    /// Phase of the first harmonic at step 0, in (−π, π].
    pub phi: f64,
    pub visibility: f64,
    /// Fitted fringe period in steps (ideally `N`).
    pub period_steps: f64,
    pub start_phase: f64,
}

/// Tunables for [`analyze_reference`] and [`retrieve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    /// Reference visibility below which the interferometer is considered
    /// misaligned.
    pub min_reference_visibility: f64,
    /// Reference mean counts below which a pixel is invalid.
    pub counts_floor: f64,
    /// Allowed difference between the two arms' fitted periods, as a fraction
    /// of the step count.
    pub period_tolerance: f64,
    /// Upper bound on curves used for period fitting (evenly subsampled).
    pub max_fit_curves: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            min_reference_visibility: 0.01,
            counts_floor: 1.0,
            period_tolerance: 0.05,
            max_fit_curves: 4096,
        }
    }
}

/// Least-squares fit of `c + a cos(2πk/P) + b sin(2πk/P)` at a fixed period.
struct SinusoidFit {
    cos: Vec<f64>,
    sin: Vec<f64>,
    inv: [[f64; 3]; 3],
}

impl SinusoidFit {
    fn new(n: usize, period: f64) -> Option<Self> {
        let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / period;
                (t.cos(), t.sin())
            })
            .unzip();
        let basis = [vec![1.0; n], cos.clone(), sin.clone()];
        let mut g = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
            }
        }
        Some(SinusoidFit {
            cos,
            sin,
            inv: invert3(&g)?,
        })
    }

    fn coefficients(&self, curve: &[f64]) -> [f64; 3] {
        let mut b = [0.0; 3];
        for ((y, c), s) in curve.iter().zip(&self.cos).zip(&self.sin) {
            b[0] += y;
            b[1] += y * c;
            b[2] += y * s;
        }
        let mut x = [0.0; 3];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = (0..3).map(|j| self.inv[i][j] * b[j]).sum();
        }
        x
    }

    /// Energy explained by the harmonic terms beyond the constant.
    fn harmonic_energy(&self, curve: &[f64]) -> f64 {
        let mut b = [0.0; 3];
        for ((y, c), s) in curve.iter().zip(&self.cos).zip(&self.sin) {
            b[0] += y;
            b[1] += y * c;
            b[2] += y * s;
        }
        let mut e = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                e += b[i] * self.inv[i][j] * b[j];
            }
        }
        e - b[0] * b[0] / curve.len() as f64
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if !(det.abs() > 1e-12) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

/// Period (in steps) maximizing the summed least-squares harmonic energy of
/// `curves`: a grid search over `N·[0.9, 1.1]` refined by golden section.
pub fn fit_period(curves: &[Vec<f64>]) -> Result<f64, RetrievalError> {
    let n = curves.first().map_or(0, Vec::len);
    if n < 3 {
        return Err(RetrievalError::InvalidInput("period fit needs at least 3 steps".into()));
    }
    let energy = |p: f64| -> f64 {
        match SinusoidFit::new(n, p) {
            Some(fit) => curves.iter().map(|c| fit.harmonic_energy(c)).sum(),
            None => f64::NEG_INFINITY,
        }
    };
    let lo = 0.9 * n as f64;
    let hi = 1.1 * n as f64;
    const GRID: usize = 80;
    let h = (hi - lo) / GRID as f64;
    let mut best = (n as f64, energy(n as f64));
    for i in 0..=GRID {
        let p = lo + h * i as f64;
        let e = energy(p);
        if e > best.1 {
            best = (p, e);
        }
    }
    let (mut a, mut b) = ((best.0 - h).max(lo), (best.0 + h).min(hi));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let (mut f1, mut f2) = (energy(x1), energy(x2));
    for _ in 0..60 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = energy(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = energy(x1);
        }
    }
    let refined = 0.5 * (a + b);
    let e_refined = energy(refined);
    let (p, e) = if e_refined >= best.1 { (refined, e_refined) } else { best };
    // Short curves fit any nearby period equally well; prefer the nominal one
    // unless another is measurably better.
    let nominal = n as f64;
    if energy(nominal) >= e - 1e-9 * e.abs() {
        return Ok(nominal);
    }
    Ok(p)
}

/// Diagnostics of a set of stepping curves from the same interferometer:
/// fitted period, mean visibility, and the amplitude-weighted start phase.
pub fn analyze_curves(curves: &[Vec<f64>]) -> Result<CurveStats, RetrievalError> {
    let period = fit_period(curves)?;
    let n = curves[0].len();
    let fit = SinusoidFit::new(n, period)
        .ok_or_else(|| RetrievalError::InvalidInput("degenerate sampling".into()))?;
    let mut a0_sum = 0.0;
    let mut a1_sum = 0.0;
    let mut vis_sum = 0.0;
    let (mut re, mut im) = (0.0, 0.0);
    for c in curves {
        let [c0, a, b] = fit.coefficients(c);
        let amp = a.hypot(b);
        a0_sum += c0;
        a1_sum += amp;
        vis_sum += if c0 != 0.0 { amp / c0 } else { 0.0 };
        re += a;
        im -= b;
    }
    let m = curves.len() as f64;
    let phi = if re.hypot(im) > 0.0 { wrap_phase(im.atan2(re)) } else { 0.0 };
    Ok(CurveStats {
        a0: a0_sum / m,
        a1: a1_sum / m,
        phi,
        visibility: vis_sum / m,
        period_steps: period,
        start_phase: phi,
    })
}

/// Diagnostics of a single curve.
pub fn analyze_curve(curve: &[f64]) -> Result<CurveStats, RetrievalError> {
    analyze_curves(&[curve.to_vec()])
}

fn roi_curves(stack: &ArmStack, roi: &Roi, limit: usize) -> Vec<Vec<f64>> {
    let total = roi.area();
    let stride = total.div_ceil(limit.max(1)).max(1);
    (0..total)
        .step_by(stride)
        .map(|i| stack.curve(roi.x + i % roi.width, roi.y + i / roi.width))
        .collect()
}

fn check_roi(roi: &Roi, width: usize, height: usize) -> Result<(), RetrievalError> {
    if roi.is_empty() {
        return Err(RetrievalError::InvalidInput("roi is empty".into()));
    }
    if !roi.fits_in(width, height) {
        return Err(RetrievalError::InvalidInput(format!(
            "roi {roi} lies outside the {width}x{height} frame"
        )));
    }
    Ok(())
}

fn stack_stats(
    stack: &ArmStack,
    roi: &Roi,
    params: &RetrievalParams,
) -> Result<CurveStats, RetrievalError> {
    check_roi(roi, stack.width(), stack.height())?;
    analyze_curves(&roi_curves(stack, roi, params.max_fit_curves))
}

/// Fits the reference arm's curves inside `roi`. Fails with
/// [`RetrievalError::NoFringe`] when the fringes are too faint to use.
pub fn analyze_reference(
    ds: &SteppingDataset,
    roi: &Roi,
    params: &RetrievalParams,
) -> Result<CurveStats, RetrievalError> {
    let stack = ds
        .stack_for(Arm::Reference)
        .ok_or_else(|| RetrievalError::InvalidInput("dataset has no complete reference arm".into()))?;
    let stats = stack_stats(&stack, roi, params)?;
    if !(stats.visibility >= params.min_reference_visibility) {
        return Err(RetrievalError::NoFringe {
            visibility: stats.visibility,
            floor: params.min_reference_visibility,
        });
    }
    Ok(stats)
}

/// Sample-free border used to track source intensity: `rows` full-width rows
/// at the top and at the bottom of every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftMargin {
    pub rows: usize,
}

impl Default for DriftMargin {
    fn default() -> Self {
        DriftMargin { rows: 8 }
    }
}

impl DriftMargin {
    pub fn strips(&self, width: usize, height: usize) -> [Roi; 2] {
        [
            Roi::new(0, 0, width, self.rows),
            Roi::new(0, height.saturating_sub(self.rows), width, self.rows),
        ]
    }

    /// Checks that the margin fits the frame and stays clear of `sample_roi`.
    pub fn validate(&self, width: usize, height: usize, sample_roi: Option<&Roi>) -> Result<(), RetrievalError> {
        if self.rows == 0 || 2 * self.rows >= height {
            return Err(RetrievalError::InvalidConfig(format!(
                "margin of {} rows does not fit a frame {height} rows high",
                self.rows
            )));
        }
        if let Some(roi) = sample_roi {
            if self.strips(width, height).iter().any(|s| s.intersects(roi)) {
                return Err(RetrievalError::InvalidConfig(format!(
                    "calibration margin ({} rows) overlaps the sample roi {roi}",
                    self.rows
                )));
            }
        }
        Ok(())
    }

    /// Mean over both strips.
    pub fn level(&self, frame: &Grid<f32>) -> f64 {
        let [top, bottom] = self.strips(frame.width(), frame.height());
        let w = frame.width();
        let data = frame.as_slice();
        let mut sum = 0.0;
        for s in [top, bottom] {
            sum += data[s.y * w..(s.y + s.height) * w]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        sum / (top.area() + bottom.area()) as f64
    }
}

fn rescale_to(ds: &SteppingDataset, margin: &DriftMargin, level: f64) -> Result<SteppingDataset, RetrievalError> {
    let mut out = ds.clone();
    for f in &mut out.frames {
        let m = margin.level(&f.corrected);
        if !(m > 0.0) {
            return Err(RetrievalError::InvalidInput(format!(
                "frame {:?}/{} has no signal in the calibration margin",
                f.arm, f.step
            )));
        }
        let scale = level / m;
        if scale != 1.0 {
            f.corrected = f.corrected.map(|&v| (v as f64 * scale) as f32);
        }
        f.mean_intensity *= scale;
    }
    Ok(out)
}

fn global_level(ds: &SteppingDataset, margin: &DriftMargin) -> Result<f64, RetrievalError> {
    if ds.frames.is_empty() {
        return Err(RetrievalError::InvalidInput("dataset has no frames".into()));
    }
    Ok(ds.frames.iter().map(|f| margin.level(&f.corrected)).sum::<f64>() / ds.frames.len() as f64)
}

/// Normalizes every frame so that its margin level equals the dataset-wide
/// mean margin level, removing source and detector intensity drift.
pub fn calibrate_drift(
    ds: &SteppingDataset,
    margin: &DriftMargin,
    sample_roi: Option<&Roi>,
) -> Result<SteppingDataset, RetrievalError> {
    margin.validate(ds.width, ds.height, sample_roi)?;
    let level = global_level(ds, margin)?;
    rescale_to(ds, margin, level)
}

/// Calibrates two separately acquired datasets to the reference's level.
pub fn calibrate_drift_pair(
    sample: &SteppingDataset,
    reference: &SteppingDataset,
    margin: &DriftMargin,
    sample_roi: Option<&Roi>,
) -> Result<(SteppingDataset, SteppingDataset), RetrievalError> {
    margin.validate(sample.width, sample.height, sample_roi)?;
    margin.validate(reference.width, reference.height, sample_roi)?;
    let level = global_level(reference, margin)?;
    Ok((rescale_to(sample, margin, level)?, rescale_to(reference, margin, level)?))
}

/// Per-pixel quality flags.
pub mod flags {
    /// Reference mean below the counts floor; all channels are NaN.
    pub const LOW_COUNTS: u8 = 1;
    /// Reference visibility below the floor; phase and dark field are NaN.
    pub const DEGENERATE_REFERENCE: u8 = 2;
    /// Sample mean not positive; dark field is NaN.
    pub const NO_SAMPLE_SIGNAL: u8 = 4;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalDiagnostics {
    pub reference: CurveStats,
    /// Absent when the sample arm shows no usable fringes.
    pub sample: Option<CurveStats>,
    pub steps: usize,
    pub valid_pixels: usize,
    pub invalid_pixels: usize,
    pub mean_transmission: f64,
    pub mean_dpc: f64,
    pub mean_darkfield: f64,
    pub mean_reference_visibility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub roi: Roi,
    pub transmission: Grid<f64>,
    pub dpc: Grid<f64>,
    pub darkfield: Grid<f64>,
    pub visibility_ref: Grid<f64>,
    pub flags: Grid<u8>,
    pub diagnostics: RetrievalDiagnostics,
}

pub const CHANNELS: [&str; 3] = ["transmission", "dpc", "darkfield"];

impl RetrievalResult {
    pub fn channel(&self, name: &str) -> Option<&Grid<f64>> {
        match name {
            "transmission" => Some(&self.transmission),
            "dpc" => Some(&self.dpc),
            "darkfield" => Some(&self.darkfield),
            "visibility_ref" => Some(&self.visibility_ref),
            _ => None,
        }
    }

    pub fn to_bundle(&self) -> GridBundle {
        let mut b = GridBundle::new(self.roi.width, self.roi.height);
        for name in CHANNELS.iter().copied().chain(["visibility_ref"]) {
            b.insert_f64(name, self.channel(name).unwrap());
        }
        b.insert("flags", self.flags.map(|&f| f as f32));
        b.meta.insert("roi".into(), self.roi.to_string());
        let d = &self.diagnostics;
        b.meta.insert("steps".into(), d.steps.to_string());
        b.meta.insert("reference.period_steps".into(), d.reference.period_steps.to_string());
        b.meta.insert("reference.visibility".into(), d.reference.visibility.to_string());
        b.meta.insert("reference.start_phase".into(), d.reference.start_phase.to_string());
        b.meta.insert("valid_pixels".into(), d.valid_pixels.to_string());
        b.meta.insert("invalid_pixels".into(), d.invalid_pixels.to_string());
        b
    }

    /// Human-readable diagnostics.
    pub fn report(&self) -> String {
        let d = &self.diagnostics;
        let mut s = String::new();
        let _ = writeln!(s, "roi                  {}", self.roi);
        let _ = writeln!(s, "steps                {}", d.steps);
        let _ = writeln!(s, "reference period     {:.6} steps", d.reference.period_steps);
        let _ = writeln!(s, "reference visibility {:.6}", d.reference.visibility);
        let _ = writeln!(s, "reference start      {:.6} rad", d.reference.start_phase);
        match &d.sample {
            Some(st) => {
                let _ = writeln!(s, "sample period        {:.6} steps", st.period_steps);
                let _ = writeln!(s, "sample visibility    {:.6}", st.visibility);
                let _ = writeln!(s, "sample start         {:.6} rad", st.start_phase);
            }
            None => {
                let _ = writeln!(s, "sample               no usable fringes");
            }
        }
        let _ = writeln!(s, "mean transmission    {:.6}", d.mean_transmission);
        let _ = writeln!(s, "mean dpc             {:.6} rad", d.mean_dpc);
        let _ = writeln!(s, "mean darkfield       {:.6}", d.mean_darkfield);
        let _ = writeln!(s, "valid pixels         {}", d.valid_pixels);
        let _ = writeln!(s, "invalid pixels       {}", d.invalid_pixels);
        s
    }

    /// Writes the float maps, 8-bit previews (`<channel>.pgm`) and `report.txt`.
    pub fn save(&self, dir: &Path, window: (f64, f64)) -> Result<(), RetrievalError> {
        self.to_bundle().save(dir)?;
        for name in CHANNELS {
            let img = window_image(self.channel(name).unwrap(), window.0, window.1)?;
            write_pgm(&dir.join(format!("{name}.pgm")), &img)?;
        }
        std::fs::write(dir.join("report.txt"), self.report()).map_err(|source| DatasetError::Io {
            path: dir.join("report.txt"),
            source,
        })?;
        Ok(())
    }
}

fn finite_mean(g: &Grid<f64>) -> f64 {
    let (s, n) = g
        .as_slice()
        .iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n > 0 {
        s / n as f64
    } else {
        f64::NAN
    }
}

/// Per-pixel retrieval over `roi`. Each dataset supplies its matching arm,
/// or its only arm; pass the same dataset twice for a paired scan.
pub fn retrieve(
    sample_ds: &SteppingDataset,
    reference_ds: &SteppingDataset,
    roi: &Roi,
    params: &RetrievalParams,
) -> Result<RetrievalResult, RetrievalError> {
    let sample = sample_ds
        .stack_for(Arm::Sample)
        .ok_or_else(|| RetrievalError::InvalidInput("sample dataset has no complete arm".into()))?;
    let reference = reference_ds
        .stack_for(Arm::Reference)
        .ok_or_else(|| RetrievalError::InvalidInput("reference dataset has no complete arm".into()))?;
    retrieve_stacks(&sample, &reference, roi, params)
}

/// Checks that two datasets can be retrieved against each other.
pub fn check_compatible(sample: &SteppingDataset, reference: &SteppingDataset, roi: &Roi) -> Result<(), RetrievalError> {
    if sample.config.steps != reference.config.steps {
        return Err(RetrievalError::Incompatible(format!(
            "step counts differ: sample {} vs reference {}",
            sample.config.steps, reference.config.steps
        )));
    }
    if sample.width != reference.width || sample.height != reference.height {
        return Err(RetrievalError::Incompatible(format!(
            "frame sizes differ: sample {}x{} vs reference {}x{}",
            sample.width, sample.height, reference.width, reference.height
        )));
    }
    check_roi(roi, sample.width, sample.height)?;
    if sample.stack_for(Arm::Sample).is_none() {
        return Err(RetrievalError::Incompatible("sample dataset has no complete arm".into()));
    }
    if reference.stack_for(Arm::Reference).is_none() {
        return Err(RetrievalError::Incompatible("reference dataset has no complete arm".into()));
    }
    Ok(())
}

/// [`retrieve`] on in-memory stacks.
pub fn retrieve_stacks(
    sample: &ArmStack,
    reference: &ArmStack,
    roi: &Roi,
    params: &RetrievalParams,
) -> Result<RetrievalResult, RetrievalError> {
    let n = reference.steps();
    if n < 3 {
        return Err(RetrievalError::InvalidInput(format!("{n} steps; at least 3 are needed")));
    }
    if sample.steps() != n {
        return Err(RetrievalError::Incompatible(format!(
            "step counts differ: sample {} vs reference {n}",
            sample.steps()
        )));
    }
    if sample.width() != reference.width() || sample.height() != reference.height() {
        return Err(RetrievalError::Incompatible("frame sizes differ".into()));
    }
    check_roi(roi, reference.width(), reference.height())?;

    let ref_stats = stack_stats(reference, roi, params)?;
    if !(ref_stats.visibility >= params.min_reference_visibility) {
        return Err(RetrievalError::NoFringe {
            visibility: ref_stats.visibility,
            floor: params.min_reference_visibility,
        });
    }
    let sample_stats = stack_stats(sample, roi, params)
        .ok()
        .filter(|s| s.visibility >= params.min_reference_visibility);
    if let Some(s) = &sample_stats {
        let diff = (s.period_steps - ref_stats.period_steps).abs();
        if diff > params.period_tolerance * n as f64 {
            return Err(RetrievalError::Incompatible(format!(
                "fitted periods differ: sample {:.3} vs reference {:.3} steps",
                s.period_steps, ref_stats.period_steps
            )));
        }
    }

    let tw = Twiddles::new(n);
    let w = roi.width;
    let area = roi.area();
    let mut t = vec![f64::NAN; area];
    let mut dpc = vec![f64::NAN; area];
    let mut df = vec![f64::NAN; area];
    let mut vis = vec![f64::NAN; area];
    let mut fl = vec![0u8; area];
    t.par_chunks_mut(w)
        .zip(dpc.par_chunks_mut(w))
        .zip(df.par_chunks_mut(w))
        .zip(vis.par_chunks_mut(w))
        .zip(fl.par_chunks_mut(w))
        .enumerate()
        .for_each(|(ry, ((((t, dpc), df), vis), fl))| {
            let y = roi.y + ry;
            let mut cs = vec![0.0; n];
            let mut cr = vec![0.0; n];
            for rx in 0..w {
                let x = roi.x + rx;
                for k in 0..n {
                    cs[k] = *sample.frames[k].get(x, y);
                    cr[k] = *reference.frames[k].get(x, y);
                }
                let s = tw.analyze(&cs);
                let r = tw.analyze(&cr);
                if !(r.a0 >= params.counts_floor) {
                    fl[rx] = flags::LOW_COUNTS;
                    continue;
                }
                t[rx] = s.a0 / r.a0;
                vis[rx] = r.visibility();
                if r.degenerate {
                    fl[rx] |= flags::DEGENERATE_REFERENCE;
                    continue;
                }
                dpc[rx] = wrap_phase(s.phi - r.phi);
                if s.a0 > 0.0 {
                    df[rx] = s.visibility() / r.visibility();
                } else {
                    fl[rx] |= flags::NO_SAMPLE_SIGNAL;
                }
            }
        });

    let h = roi.height;
    let flags = Grid::from_vec(w, h, fl);
    let invalid = flags.as_slice().iter().filter(|&&f| f != 0).count();
    let transmission = Grid::from_vec(w, h, t);
    let dpc = Grid::from_vec(w, h, dpc);
    let darkfield = Grid::from_vec(w, h, df);
    let visibility_ref = Grid::from_vec(w, h, vis);
    let diagnostics = RetrievalDiagnostics {
        reference: ref_stats,
        sample: sample_stats,
        steps: n,
        valid_pixels: area - invalid,
        invalid_pixels: invalid,
        mean_transmission: finite_mean(&transmission),
        mean_dpc: finite_mean(&dpc),
        mean_darkfield: finite_mean(&darkfield),
        mean_reference_visibility: finite_mean(&visibility_ref),
    };
    Ok(RetrievalResult {
        roi: *roi,
        transmission,
        dpc,
        darkfield,
        visibility_ref,
        flags,
        diagnostics,
    })
}

/// Linearly interpolated percentile of sorted data (`pct` in [0, 100]).
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Maps the `[lo_pct, hi_pct]` percentile range of the finite values of
/// `map` linearly onto 0..=255. Non-finite pixels become 0; a map with no
/// spread becomes uniform 128.
pub fn window_image(map: &Grid<f64>, lo_pct: f64, hi_pct: f64) -> Result<Grid<u8>, RetrievalError> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(RetrievalError::InvalidInput(format!(
            "window percentiles must satisfy 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})"
        )));
    }
    let mut finite: Vec<f64> = map.as_slice().iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Ok(map.map(|_| 0));
    }
    finite.sort_by(f64::total_cmp);
    let lo = percentile(&finite, lo_pct);
    let hi = percentile(&finite, hi_pct);
    if !(hi > lo) {
        return Ok(map.map(|v| if v.is_finite() { 128 } else { 0 }));
    }
    Ok(map.map(|&v| {
        if !v.is_finite() {
            0
        } else {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    }))
}
