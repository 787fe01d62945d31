//! On-disk layout for stepping datasets and float grid bundles.
//!
//! A dataset is a directory holding a UTF-8 `manifest` of `key: value` lines
//! and one headerless little-endian row-major file per frame: `frame_NNNN.u16`
//! for raw counts and `frame_NNNN.f32` for the corrected image. Every file is
//! covered by a CRC32 recorded in the manifest. Grid bundles (phantoms,
//! retrieval results) use the same manifest style with named float32 grids.

use crate::acquisition::{Arm, ArmSelection, DatasetFrame, ScanConfig, ScanMode, SteppingDataset};
use crate::beamline::{Frame, FrameMeta};
use crate::geometry::BeamlineGeometry;
use crate::grid::{Grid, Roi};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST: &str = "manifest";
const DATASET_FORMAT: &str = "gratingscope-dataset";
const GRIDS_FORMAT: &str = "gratingscope-grids";
const VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest not found: {path}")]
    MissingManifest { path: PathBuf },
    #[error("corrupt manifest at line {line}: {reason}")]
    CorruptManifest { line: usize, reason: String },
    #[error("frame {frame}: {file} is truncated ({actual} of {expected} bytes)")]
    Truncated {
        frame: usize,
        file: String,
        expected: u64,
        actual: u64,
    },
    #[error("frame {frame}: checksum mismatch in {file}")]
    ChecksumMismatch { frame: usize, file: String },
    #[error("inconsistent dataset: {reason}")]
    Inconsistent { reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::CorruptManifest {
        line,
        reason: reason.into(),
    }
}

fn u16_bytes(g: &Grid<u16>) -> Vec<u8> {
    g.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_bytes(g: &Grid<f32>) -> Vec<u8> {
    g.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `contents` to `path` through a temporary file and a rename.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parsed `key: value` manifest with line numbers for error reporting.
struct Manifest {
    entries: Vec<(usize, String, String)>,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| corrupt(lineno, "expected 'key: value'"))?;
            entries.push((lineno, k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Manifest { entries })
    }

    fn read(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(DatasetError::MissingManifest { path });
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let text = String::from_utf8(bytes).map_err(|_| corrupt(0, "manifest is not UTF-8"))?;
        Manifest::parse(&text)
    }

    fn get(&self, key: &str) -> Result<(usize, &str), DatasetError> {
        self.entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
            .ok_or_else(|| corrupt(0, format!("missing key '{key}'")))
    }

    fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T, DatasetError> {
        let (line, v) = self.get(key)?;
        v.parse()
            .map_err(|_| corrupt(line, format!("invalid value for '{key}': {v:?}")))
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = (usize, &'a str)> + 'a {
        self.entries
            .iter()
            .filter(move |(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
    }

    fn expect_format(&self, format: &str) -> Result<(), DatasetError> {
        let (line, v) = self.get("format")?;
        if v != format {
            return Err(corrupt(line, format!("expected format '{format}', found '{v}'")));
        }
        let (line, v) = self.get("version")?;
        if v != VERSION {
            return Err(corrupt(line, format!("unsupported version '{v}'")));
        }
        Ok(())
    }
}

/// `a=b c=d` record fields.
fn parse_fields(line: usize, text: &str) -> Result<BTreeMap<&str, &str>, DatasetError> {
    let mut out = BTreeMap::new();
    for part in text.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| corrupt(line, format!("malformed field {part:?}")))?;
        out.insert(k, v);
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(
    fields: &BTreeMap<&str, &str>,
    line: usize,
    key: &str,
) -> Result<T, DatasetError> {
    let v = fields
        .get(key)
        .ok_or_else(|| corrupt(line, format!("frame record lacks '{key}'")))?;
    v.parse()
        .map_err(|_| corrupt(line, format!("invalid '{key}' value {v:?}")))
}

fn read_checked(
    dir: &Path,
    frame: usize,
    file: &str,
    expected_len: u64,
    crc: u32,
) -> Result<Vec<u8>, DatasetError> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(DatasetError::Inconsistent {
            reason: format!("frame {frame}: file {file} listed in manifest is missing"),
        });
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if (bytes.len() as u64) < expected_len {
        return Err(DatasetError::Truncated {
            frame,
            file: file.to_string(),
            expected: expected_len,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 != expected_len {
        return Err(DatasetError::Inconsistent {
            reason: format!("frame {frame}: {file} has {} bytes, expected {expected_len}", bytes.len()),
        });
    }
    if crc32fast::hash(&bytes) != crc {
        return Err(DatasetError::ChecksumMismatch {
            frame,
            file: file.to_string(),
        });
    }
    Ok(bytes)
}

fn mode_str(m: ScanMode) -> &'static str {
    match m {
        ScanMode::A => "A",
        ScanMode::B => "B",
    }
}

fn arm_str(a: Arm) -> &'static str {
    match a {
        Arm::Reference => "reference",
        Arm::Sample => "sample",
    }
}

fn parse_arm(s: &str) -> Option<Arm> {
    match s {
        "reference" => Some(Arm::Reference),
        "sample" => Some(Arm::Sample),
        _ => None,
    }
}

fn arms_str(a: ArmSelection) -> &'static str {
    match a {
        ArmSelection::Reference => "reference",
        ArmSelection::Sample => "sample",
        ArmSelection::Both => "reference,sample",
    }
}

fn parse_arms(s: &str) -> Option<ArmSelection> {
    match s {
        "reference" => Some(ArmSelection::Reference),
        "sample" => Some(ArmSelection::Sample),
        "reference,sample" => Some(ArmSelection::Both),
        _ => None,
    }
}

fn frame_file_stem(index: usize) -> String {
    format!("frame_{index:04}")
}

/// Incrementally persists a dataset while it is being acquired.
pub struct DatasetWriter {
    dir: PathBuf,
    header: String,
    records: Vec<String>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, dataset: &SteppingDataset) -> Result<Self, DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let writer = DatasetWriter {
            dir: dir.to_path_buf(),
            header: dataset_header(dataset),
            records: Vec::new(),
        };
        writer.write_manifest(false)?;
        Ok(writer)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, frame: &DatasetFrame) -> Result<(), DatasetError> {
        let index = self.records.len();
        let stem = frame_file_stem(index);
        let raw_name = format!("{stem}.u16");
        let cor_name = format!("{stem}.f32");
        let raw = u16_bytes(&frame.raw.pixels);
        let cor = f32_bytes(&frame.corrected);
        let raw_path = self.dir.join(&raw_name);
        fs::write(&raw_path, &raw).map_err(io_err(&raw_path))?;
        let cor_path = self.dir.join(&cor_name);
        fs::write(&cor_path, &cor).map_err(io_err(&cor_path))?;
        let m = &frame.raw.meta;
        self.records.push(format!(
            "frame: index={index} step={} arm={} commanded_um={} piezo_um={} timestamp_s={} tube_on={} \
             tube_kv={} tube_ma={} exposure_s={} averaged={} mean={} raw={raw_name} raw_crc32={:08x} \
             corrected={cor_name} corrected_crc32={:08x}",
            frame.step,
            arm_str(frame.arm),
            m.piezo_commanded_um,
            m.piezo_position_um,
            m.timestamp_s,
            m.tube_on,
            m.tube_kv,
            m.tube_ma,
            m.exposure_time_s,
            m.averaged_count,
            frame.mean_intensity,
            crc32fast::hash(&raw),
            crc32fast::hash(&cor),
        ));
        self.write_manifest(false)
    }

    fn write_manifest(&self, complete: bool) -> Result<(), DatasetError> {
        let mut text = self.header.clone();
        let _ = writeln!(text, "complete: {complete}");
        let _ = writeln!(text, "frames: {}", self.records.len());
        for r in &self.records {
            text.push_str(r);
            text.push('\n');
        }
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes())
    }

    /// Writes the final manifest.
    pub fn finish(self, complete: bool) -> Result<(), DatasetError> {
        self.write_manifest(complete)
    }
}

fn dataset_header(ds: &SteppingDataset) -> String {
    let c = &ds.config;
    let g = &ds.geometry;
    let mut s = String::new();
    let _ = writeln!(s, "format: {DATASET_FORMAT}");
    let _ = writeln!(s, "version: {VERSION}");
    let _ = writeln!(s, "width: {}", ds.width);
    let _ = writeln!(s, "height: {}", ds.height);
    let _ = writeln!(s, "steps: {}", c.steps);
    let _ = writeln!(s, "mode: {}", mode_str(c.mode));
    let _ = writeln!(s, "arms: {}", arms_str(c.arms));
    let _ = writeln!(s, "piezo_period_um: {}", ds.piezo_period_um);
    let _ = writeln!(s, "scan.start_um: {}", c.start_um);
    let _ = writeln!(
        s,
        "scan.step_size_um: {}",
        c.step_size_um.map_or("auto".to_string(), |v| v.to_string())
    );
    let _ = writeln!(s, "scan.exposure_time_s: {}", c.exposure_time_s);
    let _ = writeln!(s, "scan.frames_to_average: {}", c.frames_to_average);
    let _ = writeln!(s, "scan.seed: {}", c.seed);
    let _ = writeln!(
        s,
        "scan.roi: {}",
        c.roi.map_or("none".to_string(), |r| r.to_string())
    );
    let _ = writeln!(s, "geometry.p0: {}", g.p0);
    let _ = writeln!(s, "geometry.p1: {}", g.p1);
    let _ = writeln!(s, "geometry.p2: {}", g.p2);
    let _ = writeln!(s, "geometry.l: {}", g.l);
    let _ = writeln!(s, "geometry.d: {}", g.d);
    let _ = writeln!(s, "geometry.lambda: {}", g.lambda);
    s
}

/// Writes `ds` to `dir` (created if needed).
pub fn save_dataset(ds: &SteppingDataset, dir: &Path) -> Result<(), DatasetError> {
    let mut w = DatasetWriter::create(dir, ds)?;
    for f in &ds.frames {
        w.append(f)?;
    }
    w.finish(ds.complete)
}

/// Reads a dataset, verifying sizes and checksums of every frame file.
pub fn load_dataset(dir: &Path) -> Result<SteppingDataset, DatasetError> {
    let m = Manifest::read(dir)?;
    m.expect_format(DATASET_FORMAT)?;
    let width: usize = m.parse_key("width")?;
    let height: usize = m.parse_key("height")?;
    let steps: usize = m.parse_key("steps")?;
    let (line, mode) = m.get("mode")?;
    let mode = match mode {
        "A" => ScanMode::A,
        "B" => ScanMode::B,
        other => return Err(corrupt(line, format!("unknown mode {other:?}"))),
    };
    let (line, arms) = m.get("arms")?;
    let arms = parse_arms(arms).ok_or_else(|| corrupt(line, format!("unknown arms {arms:?}")))?;
    let (line, step_size) = m.get("scan.step_size_um")?;
    let step_size_um = match step_size {
        "auto" => None,
        v => Some(v.parse().map_err(|_| corrupt(line, "invalid step size"))?),
    };
    let (line, roi) = m.get("scan.roi")?;
    let roi = match roi {
        "none" => None,
        v => Some(v.parse::<Roi>().map_err(|e| corrupt(line, e))?),
    };
    let config = ScanConfig {
        mode,
        steps,
        step_size_um,
        start_um: m.parse_key("scan.start_um")?,
        exposure_time_s: m.parse_key("scan.exposure_time_s")?,
        frames_to_average: m.parse_key("scan.frames_to_average")?,
        roi,
        seed: m.parse_key("scan.seed")?,
        arms,
    };
    let geometry = BeamlineGeometry {
        p0: m.parse_key("geometry.p0")?,
        p1: m.parse_key("geometry.p1")?,
        p2: m.parse_key("geometry.p2")?,
        l: m.parse_key("geometry.l")?,
        d: m.parse_key("geometry.d")?,
        lambda: m.parse_key("geometry.lambda")?,
    };
    let complete: bool = m.parse_key("complete")?;
    let declared: usize = m.parse_key("frames")?;

    let records: Vec<(usize, &str)> = m.all("frame").collect();
    if records.len() != declared {
        return Err(DatasetError::Inconsistent {
            reason: format!(
                "manifest declares {declared} frames but lists {}",
                records.len()
            ),
        });
    }
    let present = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("frame_") && name.ends_with(".u16")
        })
        .count();
    if present != declared {
        return Err(DatasetError::Inconsistent {
            reason: format!("manifest declares {declared} frames but {present} raw frame files are present"),
        });
    }

    let n_px = (width * height) as u64;
    let mut frames = Vec::with_capacity(declared);
    for (i, (line, text)) in records.into_iter().enumerate() {
        let f = parse_fields(line, text)?;
        let index: usize = field(&f, line, "index")?;
        if index != i {
            return Err(corrupt(line, format!("frame index {index} out of order")));
        }
        let arm_s: String = field(&f, line, "arm")?;
        let arm = parse_arm(&arm_s).ok_or_else(|| corrupt(line, format!("unknown arm {arm_s:?}")))?;
        let raw_name: String = field(&f, line, "raw")?;
        let cor_name: String = field(&f, line, "corrected")?;
        let raw_crc = parse_crc(&f, line, "raw_crc32")?;
        let cor_crc = parse_crc(&f, line, "corrected_crc32")?;
        let raw = read_checked(dir, i, &raw_name, n_px * 2, raw_crc)?;
        let cor = read_checked(dir, i, &cor_name, n_px * 4, cor_crc)?;
        let pixels = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let corrected = cor
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let meta = FrameMeta {
            timestamp_s: field(&f, line, "timestamp_s")?,
            piezo_position_um: field(&f, line, "piezo_um")?,
            piezo_commanded_um: field(&f, line, "commanded_um")?,
            tube_on: field(&f, line, "tube_on")?,
            tube_kv: field(&f, line, "tube_kv")?,
            tube_ma: field(&f, line, "tube_ma")?,
            exposure_time_s: field(&f, line, "exposure_s")?,
            averaged_count: field(&f, line, "averaged")?,
        };
        frames.push(DatasetFrame {
            step: field(&f, line, "step")?,
            arm,
            raw: Frame {
                pixels: Grid::from_vec(width, height, pixels),
                meta,
            },
            corrected: Grid::from_vec(width, height, corrected),
            mean_intensity: field(&f, line, "mean")?,
        });
    }
    for fr in &frames {
        if fr.step >= steps {
            return Err(DatasetError::Inconsistent {
                reason: format!("frame step {} exceeds step count {steps}", fr.step),
            });
        }
    }
    Ok(SteppingDataset {
        width,
        height,
        config,
        geometry,
        piezo_period_um: m.parse_key("piezo_period_um")?,
        frames,
        complete,
    })
}

fn parse_crc(f: &BTreeMap<&str, &str>, line: usize, key: &str) -> Result<u32, DatasetError> {
    let v: String = field(f, line, key)?;
    u32::from_str_radix(&v, 16).map_err(|_| corrupt(line, format!("invalid checksum {v:?}")))
}

/// Named float32 grids of equal size plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridBundle {
    pub width: usize,
    pub height: usize,
    pub meta: BTreeMap<String, String>,
    pub grids: BTreeMap<String, Grid<f32>>,
}

impl GridBundle {
    pub fn new(width: usize, height: usize) -> Self {
        GridBundle {
            width,
            height,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: &str, grid: Grid<f32>) {
        assert!(
            grid.width() == self.width && grid.height() == self.height,
            "grid {name} has the wrong size"
        );
        self.grids.insert(name.to_string(), grid);
    }

    pub fn insert_f64(&mut self, name: &str, grid: &Grid<f64>) {
        self.insert(name, grid.map(|&v| v as f32));
    }

    pub fn get(&self, name: &str) -> Option<&Grid<f32>> {
        self.grids.get(name)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut text = String::new();
        let _ = writeln!(text, "format: {GRIDS_FORMAT}");
        let _ = writeln!(text, "version: {VERSION}");
        let _ = writeln!(text, "width: {}", self.width);
        let _ = writeln!(text, "height: {}", self.height);
        for (k, v) in &self.meta {
            let _ = writeln!(text, "meta.{k}: {v}");
        }
        let _ = writeln!(text, "grids: {}", self.grids.len());
        for (name, grid) in &self.grids {
            let file = format!("{name}.f32");
            let bytes = f32_bytes(grid);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            let _ = writeln!(
                text,
                "grid: name={name} file={file} crc32={:08x}",
                crc32fast::hash(&bytes)
            );
        }
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let m = Manifest::read(dir)?;
        m.expect_format(GRIDS_FORMAT)?;
        let width: usize = m.parse_key("width")?;
        let height: usize = m.parse_key("height")?;
        let declared: usize = m.parse_key("grids")?;
        let mut bundle = GridBundle::new(width, height);
        for (_, k, v) in &m.entries {
            if let Some(key) = k.strip_prefix("meta.") {
                bundle.meta.insert(key.to_string(), v.clone());
            }
        }
        let records: Vec<(usize, &str)> = m.all("grid").collect();
        if records.len() != declared {
            return Err(DatasetError::Inconsistent {
                reason: format!("manifest declares {declared} grids but lists {}", records.len()),
            });
        }
        for (i, (line, text)) in records.into_iter().enumerate() {
            let f = parse_fields(line, text)?;
            let name: String = field(&f, line, "name")?;
            let file: String = field(&f, line, "file")?;
            let crc = parse_crc(&f, line, "crc32")?;
            let bytes = read_checked(dir, i, &file, (width * height * 4) as u64, crc)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            bundle.grids.insert(name, Grid::from_vec(width, height, data));
        }
        Ok(bundle)
    }
}

/// Binary 8-bit grayscale PGM (P5).
pub fn write_pgm(path: &Path, image: &Grid<u8>) -> Result<(), DatasetError> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend_from_slice(image.as_slice());
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a P5 PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<Grid<u8>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |r: &str| DatasetError::Inconsistent {
        reason: format!("{}: {r}", path.display()),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(Grid::from_vec(w, h, data.to_vec()))
}
