//! Runs both phase-stepping scan modes on a piezo with a return error of a
//! twentieth of the stepping period and compares the phase bias.

use gratingscope::{retrieve, Phantom, RetrievalParams, Roi, ScanMode, Scenario};
use std::f64::consts::PI;

fn main() {
    let mut sc = Scenario::noiseless(48, 48);
    sc.averages = 1;
    sc.phantom = Phantom::Slab {
        object: Roi::new(16, 16, 16, 16),
        transmission: 0.8,
        fringe_shift: 0.3,
        scatter: 0.9,
    };
    let period = sc.beamline().unwrap().fringe().piezo_period_um;
    sc.return_error_um = period / 20.0;
    let roi = Roi::new(0, 0, 48, 48);

    for mode in [ScanMode::A, ScanMode::B] {
        let run = sc.run(mode).unwrap();
        let ds = &run.outcome.dataset;
        let truth = &sc.phantom.truth(&run.beamline)[1];
        let r = retrieve(ds, ds, &roi, &RetrievalParams::default()).unwrap();
        let bias = r
            .dpc
            .as_slice()
            .iter()
            .zip(truth.as_slice())
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / r.dpc.len() as f64;
        let reversals = run
            .outcome
            .motion_log
            .windows(2)
            .filter(|w| w[1].commanded_um < w[0].commanded_um)
            .count();
        println!("mode {mode:?}: {} frames, {reversals} backward moves, mean dpc bias {bias:+.4} rad", ds.frames.len());
    }
    println!("expected mode A bias magnitude 2*pi/20 = {:.4} rad", 2.0 * PI / 20.0);
}
