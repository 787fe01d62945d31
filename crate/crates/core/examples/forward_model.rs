//! Samples the stepping curve of one pixel with and without a phantom and
//! reads back mean, visibility and phase.

use gratingscope::retrieval::{analyze_curve, wrap_phase};
use gratingscope::{DetectorConfig, SampleModel, VirtualBeamline};

fn main() {
    let mut bl = VirtualBeamline::with_detector(DetectorConfig::ideal(16, 16)).unwrap();
    bl.set_tube(true, 45.0, 22.5).unwrap();
    let g = *bl.geometry();
    let period = bl.fringe().piezo_period_um;
    let steps = 16;

    let curve = |bl: &VirtualBeamline| -> Vec<f64> {
        (0..steps)
            .map(|k| bl.forward_intensity(8, 8, k as f64 * period / steps as f64))
            .collect()
    };

    let reference = analyze_curve(&curve(&bl)).unwrap();
    bl.set_sample(SampleModel::uniform(16, 16, 0.8, 0.3, 0.9, &g, 50e-6)).unwrap();
    bl.set_sample_in_beam(true);
    let sample = analyze_curve(&curve(&bl)).unwrap();

    println!("{:>10} {:>12} {:>10} {:>8}", "arm", "mean", "visibility", "phase");
    for (name, s) in [("reference", &reference), ("sample", &sample)] {
        println!("{name:>10} {:>12.2} {:>10.4} {:>8.4}", s.a0, s.visibility, s.phi);
    }
    println!(
        "T = {:.4}, dphi = {:.4}, D = {:.4}",
        sample.a0 / reference.a0,
        wrap_phase(sample.phi - reference.phi),
        sample.visibility / reference.visibility
    );
}
