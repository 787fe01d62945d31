//! Writes a scan to disk, reloads it, then shows how truncation and bit
//! flips are reported.

use gratingscope::dataset::{load_dataset, save_dataset};
use gratingscope::{ScanMode, Scenario};
use std::fs;

fn main() {
    let dir = tempfile_dir();
    let mut sc = Scenario::noisy(32, 32);
    sc.steps = 8;
    sc.averages = 4;
    let ds = sc.run(ScanMode::B).unwrap().outcome.dataset;
    save_dataset(&ds, &dir).unwrap();
    let back = load_dataset(&dir).unwrap();
    println!("{} frames saved to {}, reload identical: {}", ds.frames.len(), dir.display(), back == ds);
    println!("{}", fs::read_to_string(dir.join("manifest")).unwrap().lines().take(12).collect::<Vec<_>>().join("\n"));

    let victim = dir.join("frame_0003.u16");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[100] ^= 1;
    fs::write(&victim, &bytes).unwrap();
    println!("after bit flip: {}", load_dataset(&dir).unwrap_err());
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    println!("after truncation: {}", load_dataset(&dir).unwrap_err());
    fs::remove_dir_all(&dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("gratingscope-example-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}
