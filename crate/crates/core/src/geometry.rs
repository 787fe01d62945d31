//! Interferometer geometry and the closed-form relations between grating
//! periods, distances, refraction angles and fringe phase.
//!
//! All lengths are SI meters. The three-grating layout is G0 (source grating,
//! period `p0`) at distance `l` before G1 (phase grating, period `p1`), and
//! G2 (analyzer, period `p2`) at distance `d` behind G1. Incoherent overlap of
//! the fringe patterns of every G0 line source requires `p0 / l == p2 / d`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Relative tolerance on `|p0·d − p2·l| / (p2·l)` accepted by [`validate_geometry`].
pub const GEOMETRY_REL_TOL: f64 = 1e-9;

/// `h·c` expressed in keV·m, used for the photon energy to wavelength conversion.
const HC_KEV_M: f64 = 1.239_841_93e-9;

/// Mean photon energy of a tungsten-anode spectrum as a fraction of the peak voltage.
const MEAN_ENERGY_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid input: {field} = {value} (must be finite and strictly positive)")]
    InvalidInput { field: &'static str, value: f64 },
    #[error("expected exactly one unset field among p0, p2, l, d, found {unset}")]
    Underdetermined { unset: usize },
    #[error("geometry violates the source-grating condition (relative error {rel_error:.3e})")]
    Violation { rel_error: f64 },
    #[error("non-finite input: {what}")]
    NonFinite { what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamlineGeometry {
    /// Period of the source grating G0 (m).
    pub p0: f64,
    /// Period of the phase grating G1 (m). Carried for reference only.
    pub p1: f64,
    /// Period of the analyzer grating G2 (m).
    pub p2: f64,
    /// G0 → G1 distance (m).
    pub l: f64,
    /// G1 → G2 distance (m).
    pub d: f64,
    /// Design wavelength (m).
    pub lambda: f64,
}

impl Default for BeamlineGeometry {
    /// Configuration defaults: p2 = 2.4 µm, l = 1.6 m, d = 0.2 m, p0 completed
    /// from the source-grating condition, and the wavelength of a 45 kV tube.
    fn default() -> Self {
        let p2 = 2.4e-6;
        let l = 1.6;
        let d = 0.2;
        BeamlineGeometry {
            p0: p2 * l / d,
            p1: 4.8e-6,
            p2,
            l,
            d,
            lambda: HC_KEV_M / (MEAN_ENERGY_FRACTION * 45.0),
        }
    }
}

fn check_positive(field: &'static str, value: f64) -> Result<(), GeometryError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(GeometryError::InvalidInput { field, value })
    }
}

impl BeamlineGeometry {
    fn check_fields(&self) -> Result<(), GeometryError> {
        check_positive("p0", self.p0)?;
        check_positive("p1", self.p1)?;
        check_positive("p2", self.p2)?;
        check_positive("l", self.l)?;
        check_positive("d", self.d)?;
        check_positive("lambda", self.lambda)
    }

    /// Relative mismatch `|p0·d − p2·l| / (p2·l)` of the source-grating condition.
    pub fn relative_error(&self) -> f64 {
        (self.p0 * self.d - self.p2 * self.l).abs() / (self.p2 * self.l)
    }
}

/// Checks that every field is positive and that `p0/l = p2/d` holds within
/// [`GEOMETRY_REL_TOL`].
pub fn validate_geometry(g: &BeamlineGeometry) -> Result<(), GeometryError> {
    g.check_fields()?;
    let rel_error = g.relative_error();
    if rel_error <= GEOMETRY_REL_TOL {
        Ok(())
    } else {
        Err(GeometryError::Violation { rel_error })
    }
}

/// A geometry with some of the four constrained quantities left open.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartialGeometry {
    pub p0: Option<f64>,
    pub p1: f64,
    pub p2: Option<f64>,
    pub l: Option<f64>,
    pub d: Option<f64>,
    pub lambda: f64,
}

/// Fills in the single missing quantity among `p0`, `p2`, `l`, `d` so that the
/// source-grating condition holds exactly.
pub fn complete_geometry(g: &PartialGeometry) -> Result<BeamlineGeometry, GeometryError> {
    let unset = [g.p0, g.p2, g.l, g.d].iter().filter(|v| v.is_none()).count();
    if unset != 1 {
        return Err(GeometryError::Underdetermined { unset });
    }
    for (field, value) in [("p0", g.p0), ("p2", g.p2), ("l", g.l), ("d", g.d)] {
        if let Some(v) = value {
            check_positive(field, v)?;
        }
    }
    check_positive("p1", g.p1)?;
    check_positive("lambda", g.lambda)?;

    let out = match (g.p0, g.p2, g.l, g.d) {
        (None, Some(p2), Some(l), Some(d)) => (p2 * l / d, p2, l, d),
        (Some(p0), None, Some(l), Some(d)) => (p0, p0 * d / l, l, d),
        (Some(p0), Some(p2), None, Some(d)) => (p0, p2, p0 * d / p2, d),
        (Some(p0), Some(p2), Some(l), None) => (p0, p2, l, p2 * l / p0),
        _ => unreachable!("exactly one field is unset"),
    };
    let geometry = BeamlineGeometry {
        p0: out.0,
        p1: g.p1,
        p2: out.1,
        l: out.2,
        d: out.3,
        lambda: g.lambda,
    };
    // Overflow/underflow of the completed value surfaces here.
    geometry.check_fields()?;
    Ok(geometry)
}

/// Refraction angle (rad) produced by a transverse phase gradient (rad/m).
pub fn refraction_angle(phase_gradient: f64, lambda: f64) -> Result<f64, GeometryError> {
    if !phase_gradient.is_finite() {
        return Err(GeometryError::NonFinite {
            what: "phase_gradient",
        });
    }
    if !lambda.is_finite() {
        return Err(GeometryError::NonFinite { what: "lambda" });
    }
    check_positive("lambda", lambda)?;
    Ok(lambda / (2.0 * PI) * phase_gradient)
}

/// Phase shift (rad) of the stepping curve caused by a refraction angle `alpha`:
/// the fringe moves laterally by `d·alpha` at the analyzer, one period `p2`
/// corresponding to 2π.
pub fn fringe_phase_shift(alpha: f64, d: f64, p2: f64) -> Result<f64, GeometryError> {
    check_positive("p2", p2)?;
    Ok(2.0 * PI * d * alpha / p2)
}

/// Effective wavelength (m) for a tube operated at `kvp` kilovolts, using a
/// mean photon energy of 0.6·kVp.
pub fn wavelength_from_voltage(kvp: f64) -> Result<f64, GeometryError> {
    check_positive("kVp", kvp)?;
    Ok(HC_KEV_M / (MEAN_ENERGY_FRACTION * kvp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(p0: f64, p2: f64, l: f64, d: f64) -> BeamlineGeometry {
        BeamlineGeometry {
            p0,
            p1: 4.8e-6,
            p2,
            l,
            d,
            lambda: 5e-11,
        }
    }

    #[test]
    fn symmetric_geometry_is_valid() {
        assert_eq!(validate_geometry(&geom(2.4e-6, 2.4e-6, 0.5, 0.5)), Ok(()));
    }

    #[test]
    fn matched_source_grating_is_valid() {
        assert_eq!(validate_geometry(&geom(19.2e-6, 2.4e-6, 1.6, 0.2)), Ok(()));
    }

    #[test]
    fn mismatched_source_grating_reports_relative_error() {
        // |20·0.2 − 2.4·1.6| / (2.4·1.6) = 0.16 / 3.84
        match validate_geometry(&geom(20e-6, 2.4e-6, 1.6, 0.2)) {
            Err(GeometryError::Violation { rel_error }) => {
                assert!((rel_error - 0.16 / 3.84).abs() < 1e-12);
                assert!((rel_error - 0.0417).abs() < 1e-4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_positive_field_is_invalid_input_not_violation() {
        let err = validate_geometry(&geom(0.0, 2.4e-6, 1.6, 0.2)).unwrap_err();
        assert!(matches!(err, GeometryError::InvalidInput { field: "p0", .. }));
        let err = validate_geometry(&geom(1e-6, 2.4e-6, -1.6, 0.2)).unwrap_err();
        assert!(matches!(err, GeometryError::InvalidInput { field: "l", .. }));
    }

    fn partial(p0: Option<f64>, p2: Option<f64>, l: Option<f64>, d: Option<f64>) -> PartialGeometry {
        PartialGeometry {
            p0,
            p1: 1e-6,
            p2,
            l,
            d,
            lambda: 5e-11,
        }
    }

    #[test]
    fn completes_each_missing_field() {
        let g = complete_geometry(&partial(None, Some(2.4e-6), Some(1.6), Some(0.2))).unwrap();
        assert!((g.p0 - 19.2e-6).abs() <= 1e-12 * 19.2e-6);

        let g = complete_geometry(&partial(Some(1e-6), Some(1e-6), None, Some(1.0))).unwrap();
        assert_eq!(g.l, 1.0);

        let g = complete_geometry(&partial(Some(10e-6), Some(2e-6), Some(1.0), None)).unwrap();
        assert!((g.d - 0.2).abs() < 1e-15);

        let g = complete_geometry(&partial(Some(10e-6), None, Some(1.0), Some(0.2))).unwrap();
        assert!((g.p2 - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn completion_requires_exactly_one_unset_field() {
        let all = partial(Some(1.0), Some(1.0), Some(1.0), Some(1.0));
        assert_eq!(
            complete_geometry(&all),
            Err(GeometryError::Underdetermined { unset: 0 })
        );
        let two = partial(None, None, Some(1.0), Some(1.0));
        assert_eq!(
            complete_geometry(&two),
            Err(GeometryError::Underdetermined { unset: 2 })
        );
    }

    #[test]
    fn refraction_angle_examples() {
        let lambda = 1e-10;
        assert_eq!(refraction_angle(0.0, lambda).unwrap(), 0.0);
        let unit = refraction_angle(2.0 * PI / lambda, lambda).unwrap();
        assert!((unit - 1.0).abs() < 1e-12);
        let a = refraction_angle(2.0 * PI * 1e3, lambda).unwrap();
        assert!((a - 1e-7).abs() < 1e-19);
        assert!(refraction_angle(-5.0, lambda).unwrap() < 0.0);
        assert!(refraction_angle(f64::NAN, lambda).is_err());
        assert!(refraction_angle(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn fringe_phase_shift_examples() {
        assert_eq!(fringe_phase_shift(0.0, 0.2, 2.4e-6).unwrap(), 0.0);
        let d = 0.2;
        let p2 = 2.4e-6;
        let unit = fringe_phase_shift(p2 / (2.0 * PI * d), d, p2).unwrap();
        assert!((unit - 1.0).abs() < 1e-12);
        // 2π · 0.2 · 1e-7 / 2.4e-6
        let v = fringe_phase_shift(1e-7, d, p2).unwrap();
        assert!((v - 0.052_359_877_6).abs() < 1e-9);
    }

    #[test]
    fn wavelength_examples() {
        let one_kev = wavelength_from_voltage(1.0 / 0.6).unwrap();
        assert!((one_kev - 1.239_841_93e-9).abs() < 1e-20);
        let l45 = wavelength_from_voltage(45.0).unwrap();
        assert!((l45 - 4.592e-11).abs() < 1e-14);
        let l90 = wavelength_from_voltage(90.0).unwrap();
        assert!((l90 - l45 / 2.0).abs() < 1e-24);
        assert!(wavelength_from_voltage(0.0).is_err());
        assert!(wavelength_from_voltage(-3.0).is_err());
    }

    #[test]
    fn default_geometry_is_valid() {
        validate_geometry(&BeamlineGeometry::default()).unwrap();
    }

    proptest! {
        #[test]
        fn completed_geometry_validates(
            a in 1e-7f64..1e-4, b in 1e-7f64..1e-4, c in 0.01f64..10.0, which in 0usize..4
        ) {
            let vals = [Some(a), Some(b), Some(c), Some(c * 0.37 + 0.01)];
            let mut parts = vals;
            parts[which] = None;
            let g = complete_geometry(&partial(parts[0], parts[1], parts[2], parts[3])).unwrap();
            prop_assert!(validate_geometry(&g).is_ok());
        }

        #[test]
        fn refraction_is_linear(g in -1e6f64..1e6, s in -100.0f64..100.0) {
            let lambda = 4.6e-11;
            let lhs = refraction_angle(s * g, lambda).unwrap();
            let rhs = s * refraction_angle(g, lambda).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(f64::MIN_POSITIVE));
        }

        #[test]
        fn fringe_shift_of_refraction_is_linear(g in -1e6f64..1e6, s in -100.0f64..100.0) {
            let geo = BeamlineGeometry::default();
            let f = |grad: f64| {
                fringe_phase_shift(refraction_angle(grad, geo.lambda).unwrap(), geo.d, geo.p2).unwrap()
            };
            let lhs = f(s * g);
            let rhs = s * f(g);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(f64::MIN_POSITIVE));
        }

        #[test]
        fn wavelength_decreases_with_voltage(a in 1.0f64..150.0, delta in 1e-3f64..50.0) {
            prop_assert!(wavelength_from_voltage(a + delta).unwrap() < wavelength_from_voltage(a).unwrap());
        }
    }
}
