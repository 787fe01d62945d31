//! Offset and gain correction of a detector with a non-uniform gain map and
//! two defective pixels.

use gratingscope::beamline::{Defect, DefectKind};
use gratingscope::{acquire_averaged, acquire_correction_maps, correct, DetectorConfig, Grid, VirtualBeamline};

fn spread(g: &Grid<f64>) -> f64 {
    let m = g.mean();
    (g.as_slice().iter().map(|v| (v - m).powi(2)).sum::<f64>() / g.len() as f64).sqrt() / m
}

fn main() {
    let mut det = DetectorConfig::uniform(64, 64)
        .with_gain_map(Grid::from_fn(64, 64, |x, y| 1.0 + 0.1 * ((x as f64 / 7.0).sin() + (y as f64 / 11.0).cos())));
    det.defects = vec![
        Defect { x: 10, y: 12, kind: DefectKind::Dead },
        Defect { x: 40, y: 33, kind: DefectKind::Hot },
    ];
    let mut bl = VirtualBeamline::with_detector(det).unwrap();
    bl.set_tube(true, 45.0, 22.5).unwrap();
    bl.analyzer_in_beam = false;

    let maps = acquire_correction_maps(&mut bl, 30, 1).unwrap();
    let raw = acquire_averaged(&mut bl, 30, 2).unwrap();
    let corrected = correct(&raw.mean, &maps).unwrap();

    println!("relative spread raw       {:.4}", spread(&raw.mean));
    println!("relative spread corrected {:.4}", spread(&corrected));
    println!("defect pixels flagged     {}", maps.defect_mask().as_slice().iter().filter(|b| **b).count());
    println!("dead pixel after repair   {:.1}", corrected.get(10, 12));
}
