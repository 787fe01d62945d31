//! Checks and completes interferometer geometries, then converts a phase
//! gradient into a refraction angle and a stepping-curve shift.

use gratingscope::geometry::{
    complete_geometry, fringe_phase_shift, refraction_angle, validate_geometry, wavelength_from_voltage,
    PartialGeometry,
};
use gratingscope::BeamlineGeometry;

fn main() {
    let lambda = wavelength_from_voltage(45.0).unwrap();
    let partial = PartialGeometry {
        p0: None,
        p1: 4.8e-6,
        p2: Some(2.4e-6),
        l: Some(1.6),
        d: Some(0.2),
        lambda,
    };
    let g = complete_geometry(&partial).unwrap();
    println!("completed p0 = {:.4} um", g.p0 * 1e6);
    println!("validate: {:?}", validate_geometry(&g));

    let off = BeamlineGeometry { p0: 20e-6, ..g };
    match validate_geometry(&off) {
        Err(e) => println!("p0 = 20 um: {e}"),
        Ok(()) => println!("p0 = 20 um unexpectedly valid"),
    }

    // A 1 rad per pixel phase ramp at 50 um pitch.
    let gradient = 1.0 / 50e-6;
    let alpha = refraction_angle(gradient, g.lambda).unwrap();
    let shift = fringe_phase_shift(alpha, g.d, g.p2).unwrap();
    println!("lambda = {:.3e} m, alpha = {alpha:.3e} rad, fringe shift = {shift:.4} rad", g.lambda);
}
