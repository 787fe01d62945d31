use gratingscope::{acquire_averaged, DetectorConfig, VirtualBeamline};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SIDE: usize = 64;

fn open_beam() -> VirtualBeamline {
    let mut bl = VirtualBeamline::with_detector(DetectorConfig::uniform(SIDE, SIDE)).unwrap();
    bl.set_tube(true, 45.0, 22.5).unwrap();
    bl.analyzer_in_beam = false;
    bl
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Two-sided 99% acceptance band for a sample variance of `n` draws.
fn in_band(observed: f64, expected: f64, n: usize) -> (bool, f64, f64) {
    let dof = (n - 1) as f64;
    let chi = ChiSquared::new(dof).unwrap();
    let lo = chi.inverse_cdf(0.005) / dof * expected;
    let hi = chi.inverse_cdf(0.995) / dof * expected;
    (observed >= lo && observed <= hi, lo, hi)
}

fn per_readout_variance(bl: &VirtualBeamline) -> f64 {
    let lambda = bl.forward_intensity(0, 0, bl.piezo.position_um());
    let sigma = bl.detector().dark_sigma;
    // Integer rounding of each readout adds a uniform quantisation term.
    lambda + sigma * sigma + 1.0 / 12.0
}

#[test]
fn mean_of_thirty_has_a_thirtieth_of_the_variance() {
    let mut bl = open_beam();
    let single = per_readout_variance(&bl);
    let avg = acquire_averaged(&mut bl, 30, 42).unwrap();
    let (ok, lo, hi) = in_band(sample_variance(avg.mean.as_slice()), single / 30.0, SIDE * SIDE);
    assert!(ok, "variance {} outside [{lo}, {hi}]", sample_variance(avg.mean.as_slice()));

    let rounded: Vec<f64> = avg.frame.pixels.as_slice().iter().map(|&v| v as f64).collect();
    let (ok, lo, hi) = in_band(sample_variance(&rounded), single / 30.0 + 1.0 / 12.0, SIDE * SIDE);
    assert!(ok, "rounded variance {} outside [{lo}, {hi}]", sample_variance(&rounded));
}

#[test]
fn single_readout_variance_matches_model() {
    let mut bl = open_beam();
    let single = per_readout_variance(&bl);
    let one = acquire_averaged(&mut bl, 1, 7).unwrap();
    let (ok, lo, hi) = in_band(sample_variance(one.mean.as_slice()), single, SIDE * SIDE);
    assert!(ok, "variance {} outside [{lo}, {hi}]", sample_variance(one.mean.as_slice()));
}

#[test]
fn averaging_is_unbiased() {
    let mut bl = open_beam();
    let expected = bl.forward_intensity(0, 0, 0.0) + bl.detector().dark_mean;
    let avg = acquire_averaged(&mut bl, 30, 3).unwrap();
    let n = (SIDE * SIDE) as f64;
    let se = (per_readout_variance(&bl) / 30.0 / n).sqrt();
    assert!((avg.mean.mean() - expected).abs() < 4.0 * se);
}

#[test]
fn ideal_average_equals_single_readout() {
    let mut bl = VirtualBeamline::with_detector(DetectorConfig::ideal(8, 8)).unwrap();
    bl.set_tube(true, 45.0, 22.5).unwrap();
    let one = acquire_averaged(&mut bl, 1, 0).unwrap();
    let many = acquire_averaged(&mut bl, 30, 0).unwrap();
    for (a, b) in one.mean.as_slice().iter().zip(many.mean.as_slice()) {
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }
}
