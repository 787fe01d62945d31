//! Service configuration: one TOML file, with `GRATINGSCOPE_*` environment
//! overrides for network ports and the data directory.

use gratingscope::beamline::{FringeModel, PiezoState, ReadoutModel, TubeLimits};
use gratingscope::protocol::{Axis, AxisLimits};
use gratingscope::{BeamlineGeometry, DetectorConfig, Phantom, VirtualBeamline};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotorType {
    Translation,
    Rotary,
    Goniometric,
    Piezo,
}

impl fmt::Display for MotorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotorType::Translation => "translation",
            MotorType::Rotary => "rotary",
            MotorType::Goniometric => "goniometric",
            MotorType::Piezo => "piezo",
        })
    }
}

/// One motorized stage: where it is wired and how its steps map to
/// physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    /// Controller number 1..=8 (COM1..COM8).
    pub device: u8,
    pub motor_type: MotorType,
    pub axis: Axis,
    /// Motor steps per `unit`. Ignored for the piezo, which is driven in µm.
    pub steps_per_unit: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub width: usize,
    pub height: usize,
    pub exposure_time_s: f64,
    pub binning: usize,
    pub dark_mean: f64,
    pub dark_sigma: f64,
    pub full_well: f64,
    pub readout: ReadoutModel,
    pub rng_seed: u64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::uniform(256, 256);
        DetectorSection {
            width: d.width,
            height: d.height,
            exposure_time_s: d.exposure_time_s,
            binning: d.binning,
            dark_mean: d.dark_mean,
            dark_sigma: d.dark_sigma,
            full_well: d.full_well,
            readout: d.readout,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TubeSection {
    pub voltage_kv: f64,
    pub current_ma: f64,
    pub min_kv: f64,
    pub max_kv: f64,
    pub min_ma: f64,
    pub max_ma: f64,
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
}

impl Default for TubeSection {
    fn default() -> Self {
        let l = TubeLimits::default();
        TubeSection {
            voltage_kv: 45.0,
            current_ma: 22.5,
            min_kv: l.min_kv,
            max_kv: l.max_kv,
            min_ma: l.min_ma,
            max_ma: l.max_ma,
            drift_amplitude: 0.0,
            drift_period_s: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiezoSection {
    /// Piezo travel per fringe period (µm).
    pub period_um: f64,
    pub travel_min_um: f64,
    pub travel_max_um: f64,
    pub return_error_um: f64,
    pub resolution_um: f64,
    /// Moiré fringes across the detector width.
    pub moire_fringes: f64,
}

impl Default for PiezoSection {
    fn default() -> Self {
        let p = PiezoState::default();
        PiezoSection {
            period_um: BeamlineGeometry::default().p2 * 1e6,
            travel_min_um: p.travel_min_um,
            travel_max_um: p.travel_max_um,
            return_error_um: 0.0,
            resolution_um: p.resolution_um,
            moire_fringes: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub bind: String,
    pub http_port: u16,
    /// First TCP port of the per-controller protocol endpoints (controller n
    /// listens on base + n − 1). 0 disables the endpoints.
    pub controller_base_port: u16,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            bind: "127.0.0.1".into(),
            http_port: 8080,
            controller_base_port: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub neg_limit: i64,
    pub pos_limit: i64,
    pub default_velocity: i64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let l = AxisLimits::default();
        ControllerSection {
            neg_limit: l.neg_limit,
            pos_limit: l.pos_limit,
            default_velocity: l.default_velocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventSection {
    /// Per-subscriber queue bound; a subscriber that falls this far behind
    /// is disconnected.
    pub buffer: usize,
    /// Events kept per channel for resumption.
    pub retain: usize,
    pub heartbeat_ms: u64,
    /// Minimum spacing of live-frame previews.
    pub preview_interval_ms: u64,
    /// Percentile window of the previews.
    pub preview_window: (f64, f64),
}

impl Default for EventSection {
    fn default() -> Self {
        EventSection {
            buffer: 256,
            retain: 4096,
            heartbeat_ms: 1000,
            preview_interval_ms: 200,
            preview_window: (1.0, 99.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub geometry: BeamlineGeometry,
    pub detector: DetectorSection,
    pub tube: TubeSection,
    pub piezo: PiezoSection,
    pub controllers: ControllerSection,
    /// TOML file holding a phantom description; the standard phantom when unset.
    pub phantom: Option<PathBuf>,
    pub credentials: PathBuf,
    pub data_dir: PathBuf,
    pub session_ttl_s: f64,
    /// Checksum line written after every this many history entries.
    pub history_checksum_interval: usize,
    pub network: NetworkSection,
    pub events: EventSection,
    pub stages: Vec<StageConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            geometry: BeamlineGeometry::default(),
            detector: DetectorSection::default(),
            tube: TubeSection::default(),
            piezo: PiezoSection::default(),
            controllers: ControllerSection::default(),
            phantom: None,
            credentials: PathBuf::from("credentials"),
            data_dir: PathBuf::from("data"),
            session_ttl_s: 8.0 * 3600.0,
            history_checksum_interval: 16,
            network: NetworkSection::default(),
            events: EventSection::default(),
            stages: default_stage_map(),
        }
    }
}

/// The 21 stages of the instrument on controllers 1–7, plus the piezo on
/// device 8. Each grating sits on translation, rotary and goniometric axes;
/// the sample on a three-axis mount.
pub fn default_stage_map() -> Vec<StageConfig> {
    use MotorType::*;
    let mut out = Vec::new();
    let mut add = |name: &str, device: u8, motor_type: MotorType, axis: Axis| {
        let (steps_per_unit, unit) = match motor_type {
            Translation => (1000.0, "mm"),
            Rotary => (100.0, "deg"),
            Goniometric => (1000.0, "deg"),
            Piezo => (1.0, "um"),
        };
        out.push(StageConfig {
            name: name.into(),
            device,
            motor_type,
            axis,
            steps_per_unit,
            unit: unit.into(),
        });
    };
    for (i, g) in ["g0", "g1", "g2"].iter().enumerate() {
        let d = 1 + 2 * i as u8;
        add(&format!("{g}_x"), d, Translation, Axis::X);
        add(&format!("{g}_y"), d, Translation, Axis::Y);
        add(&format!("{g}_rz"), d, Rotary, Axis::Z);
        add(&format!("{g}_tilt_x"), d + 1, Goniometric, Axis::X);
        add(&format!("{g}_tilt_y"), d + 1, Goniometric, Axis::Y);
        add(&format!("{g}_z"), d + 1, Translation, Axis::Z);
    }
    add("sample_x", 7, Translation, Axis::X);
    add("sample_y", 7, Translation, Axis::Y);
    add("sample_rot", 7, Rotary, Axis::Z);
    add("piezo", 8, Piezo, Axis::X);
    out
}

impl ServiceConfig {
    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.credentials);
        if let Some(p) = self.phantom.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Applies `GRATINGSCOPE_BIND`, `GRATINGSCOPE_HTTP_PORT`,
    /// `GRATINGSCOPE_CONTROLLER_BASE_PORT` and `GRATINGSCOPE_DATA_DIR`.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_env_from(std::env::vars())
    }

    pub fn apply_env_from(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        let port = |k: &str, v: &str| {
            v.parse::<u16>()
                .map_err(|_| ConfigError::Invalid(format!("{k}={v:?} is not a port number")))
        };
        for (k, v) in vars {
            match k.as_str() {
                "GRATINGSCOPE_BIND" => self.network.bind = v,
                "GRATINGSCOPE_HTTP_PORT" => self.network.http_port = port(&k, &v)?,
                "GRATINGSCOPE_CONTROLLER_BASE_PORT" => self.network.controller_base_port = port(&k, &v)?,
                "GRATINGSCOPE_DATA_DIR" => self.data_dir = PathBuf::from(v),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        gratingscope::validate_geometry(&self.geometry).map_err(|e| ConfigError::Invalid(format!("geometry: {e}")))?;
        self.detector_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("detector: {e}")))?;
        if !(self.piezo.period_um > 0.0) || !(self.piezo.travel_max_um > self.piezo.travel_min_um) {
            return bad("piezo period and travel range must be positive".into());
        }
        if !(self.session_ttl_s > 0.0) {
            return bad("session_ttl_s must be positive".into());
        }
        if self.events.buffer == 0 {
            return bad("events.buffer must be at least 1".into());
        }
        let c = &self.controllers;
        if !(c.neg_limit <= 0 && c.pos_limit >= 0 && c.default_velocity > 0) {
            return bad("controller limits must bracket 0 and velocity must be positive".into());
        }
        let mut seen = HashSet::new();
        let mut names = HashSet::new();
        for s in &self.stages {
            if !(1..=8).contains(&s.device) {
                return bad(format!("stage {}: device {} outside 1..8", s.name, s.device));
            }
            if !(s.steps_per_unit.is_finite() && s.steps_per_unit > 0.0) {
                return bad(format!("stage {}: steps_per_unit must be positive", s.name));
            }
            if !seen.insert((s.device, s.axis)) {
                return bad(format!("stage {}: device {} axis {} already assigned", s.name, s.device, s.axis));
            }
            if !names.insert(s.name.as_str()) {
                return bad(format!("duplicate stage name {}", s.name));
            }
        }
        if self.stages.iter().filter(|s| s.motor_type == MotorType::Piezo).count() > 1 {
            return bad("at most one piezo stage".into());
        }
        Ok(())
    }

    pub fn axis_limits(&self) -> AxisLimits {
        AxisLimits {
            neg_limit: self.controllers.neg_limit,
            pos_limit: self.controllers.pos_limit,
            default_velocity: self.controllers.default_velocity,
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let d = &self.detector;
        DetectorConfig {
            width: d.width,
            height: d.height,
            exposure_time_s: d.exposure_time_s,
            binning: d.binning,
            dark_mean: d.dark_mean,
            dark_sigma: d.dark_sigma,
            full_well: d.full_well,
            readout: d.readout,
            rng_seed: d.rng_seed,
            ..DetectorConfig::uniform(d.width, d.height)
        }
    }

    pub fn load_phantom(&self) -> Result<Phantom, ConfigError> {
        let Some(path) = &self.phantom else {
            return Ok(Phantom::standard());
        };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.clone(),
            message: e.to_string(),
        })
    }

    /// The simulated instrument described by this configuration, tube off,
    /// phantom loaded and out of the beam.
    pub fn build_beamline(&self) -> Result<VirtualBeamline, ConfigError> {
        let det = self.detector_config();
        let fringe = FringeModel::with_moire(
            det.frame_width(),
            det.frame_height(),
            self.piezo.moire_fringes,
            self.piezo.period_um,
        );
        let mut bl = VirtualBeamline::new(self.geometry, det, fringe)
            .map_err(|e| ConfigError::Invalid(format!("beamline: {e}")))?;
        let t = &self.tube;
        bl.tube.voltage_kv = t.voltage_kv;
        bl.tube.current_ma = t.current_ma;
        bl.tube.drift_amplitude = t.drift_amplitude;
        bl.tube.drift_period_s = t.drift_period_s;
        bl.tube.limits = TubeLimits {
            min_kv: t.min_kv,
            max_kv: t.max_kv,
            min_ma: t.min_ma,
            max_ma: t.max_ma,
        };
        let p = &self.piezo;
        bl.piezo = PiezoState::new(p.travel_min_um, p.travel_max_um, p.return_error_um, p.resolution_um);
        let sample = self.load_phantom()?.build(&bl);
        bl.set_sample(sample)
            .map_err(|e| ConfigError::Invalid(format!("phantom: {e}")))?;
        bl.set_sample_in_beam(false);
        Ok(bl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_map_has_21_motor_stages_and_a_piezo() {
        let cfg = ServiceConfig::default();
        cfg.validate().unwrap();
        let motors: Vec<_> = cfg.stages.iter().filter(|s| s.motor_type != MotorType::Piezo).collect();
        assert_eq!(motors.len(), 21);
        assert!(motors.iter().all(|s| (1..=7).contains(&s.device)));
        for d in 1..=7 {
            assert_eq!(motors.iter().filter(|s| s.device == d).count(), 3);
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ServiceConfig::default();
        let back: ServiceConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: ServiceConfig = toml::from_str("data_dir = \"/tmp/x\"\n[network]\nhttp_port = 9000\n").unwrap();
        assert_eq!(cfg.network.http_port, 9000);
        assert_eq!(cfg.network.bind, "127.0.0.1");
        assert_eq!(cfg.stages.len(), 22);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ServiceConfig>("[network]\nhttp_prot = 1\n").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = ServiceConfig::default();
        cfg.apply_env_from([
            ("GRATINGSCOPE_HTTP_PORT".to_string(), "9123".to_string()),
            ("GRATINGSCOPE_DATA_DIR".to_string(), "/srv/gs".to_string()),
            ("GRATINGSCOPE_CONTROLLER_BASE_PORT".to_string(), "7001".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.network.http_port, 9123);
        assert_eq!(cfg.network.controller_base_port, 7001);
        assert_eq!(cfg.data_dir, PathBuf::from("/srv/gs"));
        assert!(cfg
            .apply_env_from([("GRATINGSCOPE_HTTP_PORT".to_string(), "http".to_string())])
            .is_err());
    }

    #[test]
    fn duplicate_axis_rejected() {
        let mut cfg = ServiceConfig::default();
        let mut s = cfg.stages[0].clone();
        s.name = "other".into();
        cfg.stages.push(s);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn beamline_matches_sections() {
        let mut cfg = ServiceConfig::default();
        cfg.detector.width = 32;
        cfg.detector.height = 16;
        cfg.piezo.return_error_um = 0.1;
        let bl = cfg.build_beamline().unwrap();
        assert_eq!(bl.detector().frame_width(), 32);
        assert_eq!(bl.piezo.return_error_um, 0.1);
        assert!(!bl.tube.on);
        assert!(bl.sample().is_some() && !bl.sample_in_beam());
    }
}
