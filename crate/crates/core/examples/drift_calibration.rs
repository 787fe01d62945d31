//! Injects a 5% sinusoidal tube drift into a mode A scan and removes it with
//! the margin-based calibration.

use gratingscope::retrieval::{calibrate_drift, DriftMargin};
use gratingscope::{retrieve, Grid, Phantom, RetrievalParams, Roi, ScanMode, Scenario};

fn max_err(got: &Grid<f64>, truth: &Grid<f64>) -> f64 {
    got.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn main() {
    let object = Roi::new(16, 16, 32, 32);
    let mut sc = Scenario::noiseless(64, 64);
    sc.averages = 4;
    sc.phantom = Phantom::Slab {
        object,
        transmission: 0.8,
        fringe_shift: 0.3,
        scatter: 0.9,
    };
    sc.drift_amplitude = 0.05;
    sc.drift_period_s = 300.0 * 4.0 / 30.0;
    let run = sc.run(ScanMode::A).unwrap();
    let ds = &run.outcome.dataset;
    let truth = &sc.phantom.truth(&run.beamline)[0];
    let roi = Roi::full(64, 64);
    let params = RetrievalParams::default();

    let raw = retrieve(ds, ds, &roi, &params).unwrap();
    let calibrated = calibrate_drift(ds, &DriftMargin::default(), Some(&object)).unwrap();
    let fixed = retrieve(&calibrated, &calibrated, &roi, &params).unwrap();
    println!("max transmission error without calibration {:.4}", max_err(&raw.transmission, truth));
    println!("max transmission error with calibration    {:.4}", max_err(&fixed.transmission, truth));
}
