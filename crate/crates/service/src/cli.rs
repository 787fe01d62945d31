//! The `gratingscope` command line.
//!
//! Exit codes: 0 success, 1 a check failed (geometry violation, corrupt
//! dataset, failed scan), 2 invalid input or usage.

use crate::api;
use crate::auth::{CredentialStore, Role};
use crate::config::ServiceConfig;
use crate::service::{Clock, Service};
use clap::{Args, Parser, Subcommand};
use gratingscope::geometry::{complete_geometry, validate_geometry, wavelength_from_voltage, GeometryError, PartialGeometry};
use gratingscope::protocol::{
    parse_command, parse_response, ClockMode, ControllerHandle, ControllerState, Response, TcpControllerClient,
};
use gratingscope::retrieval::{calibrate_drift_pair, check_compatible};
use gratingscope::{
    acquire_correction_maps, load_dataset, retrieve, run_scan, shift_curve, Arm, ArmSelection,
    BeamlineGeometry, CorrectionMaps, DriftMargin, Roi, ScanConfig, ScanHooks, ScanMode,
};
use rand::Rng;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "gratingscope", version, about = "Simulated grating-interferometer beamline")]
struct Cli {
    /// Configuration file (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw (noise, scan frames).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the control service (HTTP API, event streams, controller ports).
    Serve(ServeArgs),
    /// Acquire a phase-stepping scan and print its shift curve.
    Scan(ScanArgs),
    /// Retrieve transmission, differential-phase and dark-field maps.
    Retrieve(RetrieveArgs),
    /// Check or complete an interferometer geometry.
    #[command(subcommand)]
    Geometry(GeometryCmd),
    /// Talk to an emulated stepper controller line by line.
    ProtocolRepl(ReplArgs),
    /// Inspect stored datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// HTTP port (overrides the configuration).
    #[arg(long)]
    port: Option<u16>,
    /// Data directory (overrides the configuration).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Add a user to the credential store and exit. The password is read
    /// from the first line of stdin.
    #[arg(long, value_name = "USER")]
    add_user: Option<String>,
    #[arg(long, default_value = "operator", requires = "add_user")]
    role: String,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(long, default_value = "b")]
    mode: ScanMode,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Frames averaged per step.
    #[arg(long, default_value_t = 30)]
    avg: usize,
    /// Piezo increment (µm); one period divided by the step count by default.
    #[arg(long)]
    step_size: Option<f64>,
    /// Piezo start position (µm).
    #[arg(long, default_value_t = 5.0)]
    start: f64,
    #[arg(long, default_value_t = 0.1)]
    exposure: f64,
    /// Region for the shift-curve table, `x,y,w,h`.
    #[arg(long)]
    roi: Option<Roi>,
    /// Arms to acquire (mode A only): reference, sample or both.
    #[arg(long, default_value = "both", value_parser = parse_arms)]
    arms: ArmSelection,
    /// Dark and flat frames averaged for offset/gain correction.
    #[arg(long, default_value_t = 0)]
    flat: usize,
}

fn parse_arms(s: &str) -> Result<ArmSelection, String> {
    match s {
        "reference" => Ok(ArmSelection::Reference),
        "sample" => Ok(ArmSelection::Sample),
        "both" => Ok(ArmSelection::Both),
        _ => Err(format!("expected reference, sample or both, got {s:?}")),
    }
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Sample dataset directory.
    sample: PathBuf,
    /// Reference dataset directory; the sample directory when omitted.
    reference: Option<PathBuf>,
    #[arg(long)]
    roi: Option<Roi>,
    /// Display window percentiles for the previews.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [1.0, 99.0])]
    window: Vec<f64>,
    /// Normalize drift using this many sample-free rows at top and bottom.
    #[arg(long)]
    drift_rows: Option<usize>,
}

#[derive(Args, Debug, Clone, Copy)]
struct GeometryArgs {
    /// Source grating period (µm).
    #[arg(long)]
    p0_um: Option<f64>,
    /// Phase grating period (µm).
    #[arg(long)]
    p1_um: Option<f64>,
    /// Analyzer grating period (µm).
    #[arg(long)]
    p2_um: Option<f64>,
    /// Source-to-phase-grating distance (m).
    #[arg(long)]
    l_m: Option<f64>,
    /// Phase-to-analyzer distance (m).
    #[arg(long)]
    d_m: Option<f64>,
    /// Tube voltage (kV) setting the design wavelength.
    #[arg(long)]
    kv: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum GeometryCmd {
    /// Exit 0 when the geometry satisfies p0/l = p2/d, 1 when not.
    Check(GeometryArgs),
    /// Compute the one missing quantity among p0, p2, l, d.
    Complete(GeometryArgs),
}

#[derive(Args, Debug)]
struct ReplArgs {
    /// Emulate controller N (1..8) in-process.
    #[arg(long, default_value_t = 1, conflicts_with = "connect")]
    device: u8,
    /// Talk to a controller endpoint over TCP instead.
    #[arg(long)]
    connect: Option<SocketAddr>,
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Print a dataset's shape, scan settings and frame count.
    Info { dir: PathBuf },
    /// Verify every frame checksum; exit 1 when anything is corrupt.
    Verify { dir: PathBuf },
}

/// Where a command reads and writes. Tests substitute buffers.
pub struct Io<'a> {
    pub stdin: &'a mut dyn BufRead,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

struct Fail(i32, String);

impl Fail {
    fn usage(msg: impl Into<String>) -> Self {
        Fail(2, msg.into())
    }
    fn check(msg: impl Into<String>) -> Self {
        Fail(1, msg.into())
    }
}

type CmdResult = Result<(), Fail>;

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run(args: impl IntoIterator<Item = String>, io: &mut Io<'_>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(io.stdout, "{text}");
            } else {
                let _ = write!(io.stderr, "{text}");
            }
            return code;
        }
    };
    let result = (|| {
        let cfg = load_config(cli.config.as_deref())?;
        match &cli.cmd {
            Cmd::Serve(a) => serve(cfg, a, io),
            Cmd::Scan(a) => scan(&cfg, a, cli.seed.unwrap_or(0), cli.out.as_deref(), io),
            Cmd::Retrieve(a) => retrieve_cmd(a, cli.out.as_deref(), io),
            Cmd::Geometry(g) => geometry(&cfg, g, io),
            Cmd::ProtocolRepl(a) => repl(a, io),
            Cmd::Dataset(d) => dataset(d, io),
        }
    })();
    match result {
        Ok(()) => 0,
        Err(Fail(code, msg)) => {
            let _ = writeln!(io.stderr, "error: {msg}");
            code
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ServiceConfig, Fail> {
    let mut cfg = match path {
        Some(p) => ServiceConfig::load(p).map_err(|e| Fail::usage(e.to_string()))?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env().map_err(|e| Fail::usage(e.to_string()))?;
    Ok(cfg)
}

fn serve(mut cfg: ServiceConfig, a: &ServeArgs, io: &mut Io<'_>) -> CmdResult {
    if let Some(p) = a.port {
        cfg.network.http_port = p;
    }
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    cfg.validate().map_err(|e| Fail::usage(e.to_string()))?;
    let mut store = if cfg.credentials.exists() {
        CredentialStore::load(&cfg.credentials).map_err(|e| Fail::usage(e.to_string()))?
    } else {
        CredentialStore::default()
    };
    if let Some(user) = &a.add_user {
        let role = match a.role.as_str() {
            "operator" => Role::Operator,
            "admin" => Role::Admin,
            r => return Err(Fail::usage(format!("unknown role {r:?} (operator or admin)"))),
        };
        let mut pw = String::new();
        io.stdin.read_line(&mut pw).map_err(|e| Fail::usage(e.to_string()))?;
        let pw = pw.trim_end_matches(['\r', '\n']);
        if pw.is_empty() {
            return Err(Fail::usage("empty password on stdin"));
        }
        store.add_user(user, role, pw);
        store.save(&cfg.credentials).map_err(|e| Fail::check(e.to_string()))?;
        let _ = writeln!(io.stdout, "added {user} ({}) to {}", a.role, cfg.credentials.display());
        return Ok(());
    }
    if store.is_empty() {
        let pw = std::env::var("GRATINGSCOPE_ADMIN_PASSWORD").unwrap_or_else(|_| {
            let mut rng = rand::rng();
            (0..16).map(|_| rng.sample(rand::distr::Alphanumeric) as char).collect()
        });
        store.add_user("admin", Role::Admin, &pw);
        store.save(&cfg.credentials).map_err(|e| Fail::check(e.to_string()))?;
        let _ = writeln!(io.stdout, "created user admin with password {pw} in {}", cfg.credentials.display());
    }
    let svc = Service::open_with_store(cfg.clone(), store, Clock::system()).map_err(|e| Fail::check(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Fail::check(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((cfg.network.bind.as_str(), cfg.network.http_port))
            .await
            .map_err(|e| Fail::check(format!("bind {}:{}: {e}", cfg.network.bind, cfg.network.http_port)))?;
        let addr = listener.local_addr().map_err(|e| Fail::check(e.to_string()))?;
        let _ = writeln!(io.stdout, "listening on http://{addr}");
        for (i, ep) in svc.bank().endpoints().iter().enumerate() {
            let _ = writeln!(io.stdout, "controller {} on {ep}", i + 1);
        }
        let _ = io.stdout.flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        api::serve(svc, listener, shutdown)
            .await
            .map_err(|e| Fail::check(e.to_string()))
    })
}

fn scan(cfg: &ServiceConfig, a: &ScanArgs, seed: u64, out: Option<&Path>, io: &mut Io<'_>) -> CmdResult {
    let config = ScanConfig {
        mode: a.mode,
        steps: a.steps,
        step_size_um: a.step_size,
        start_um: a.start,
        exposure_time_s: a.exposure,
        frames_to_average: a.avg,
        roi: a.roi,
        seed,
        arms: a.arms,
    };
    config
        .validate(cfg.piezo.period_um)
        .map_err(|e| Fail::usage(e.to_string()))?;
    let mut bl = cfg.build_beamline().map_err(|e| Fail::usage(e.to_string()))?;
    bl.set_tube(true, cfg.tube.voltage_kv, cfg.tube.current_ma)
        .map_err(|e| Fail::usage(e.to_string()))?;
    let (w, h) = (bl.detector().frame_width(), bl.detector().frame_height());
    let roi = a.roi.unwrap_or(Roi::full(w, h));
    if roi.is_empty() || !roi.fits_in(w, h) {
        return Err(Fail::usage(format!("roi {roi} outside {w}x{h} frame")));
    }
    let maps = if a.flat > 0 {
        acquire_correction_maps(&mut bl, a.flat, seed ^ 0xF1A7).map_err(|e| Fail::check(e.to_string()))?
    } else {
        CorrectionMaps::passthrough(w, h)
    };
    let outcome = run_scan(
        &mut bl,
        &config,
        &maps,
        ScanHooks {
            output_dir: out,
            ..ScanHooks::default()
        },
    )
    .map_err(|e| Fail::check(e.to_string()))?;
    let ds = &outcome.dataset;
    let o = &mut *io.stdout;
    let _ = writeln!(o, "mode {:?}  steps {}  averaged {}  seed {seed}", config.mode, config.steps, config.frames_to_average);
    let _ = writeln!(o, "frames {}  size {w}x{h}  roi {roi}", ds.frames.len());
    let curves: Vec<(Arm, Vec<(usize, f64)>)> = ds
        .arms_present()
        .into_iter()
        .map(|arm| shift_curve(ds, arm, &roi).map(|c| (arm, c)))
        .collect::<Result<_, _>>()
        .map_err(|e| Fail::check(e.to_string()))?;
    let _ = write!(o, "{:>5}", "step");
    for (arm, _) in &curves {
        let _ = write!(o, " {:>14}", format!("{arm:?}").to_lowercase());
    }
    let _ = writeln!(o);
    for k in 0..config.steps {
        let _ = write!(o, "{k:>5}");
        for (_, c) in &curves {
            match c.iter().find(|(s, _)| *s == k) {
                Some((_, m)) => {
                    let _ = write!(o, " {m:>14.6}");
                }
                None => {
                    let _ = write!(o, " {:>14}", "-");
                }
            }
        }
        let _ = writeln!(o);
    }
    if let Some(dir) = out {
        let _ = writeln!(o, "dataset written to {}", dir.display());
    }
    match &outcome.abort_reason {
        Some(r) => Err(Fail::check(format!("scan stopped early: {r}"))),
        None => Ok(()),
    }
}

fn retrieve_cmd(a: &RetrieveArgs, out: Option<&Path>, io: &mut Io<'_>) -> CmdResult {
    let out = out.ok_or_else(|| Fail::usage("retrieve needs --out <dir>"))?;
    let window = (a.window[0], a.window[1]);
    if !(0.0..100.0).contains(&window.0) || !(window.0 < window.1 && window.1 <= 100.0) {
        return Err(Fail::usage(format!("bad window {} {}", window.0, window.1)));
    }
    let sample = load_dataset(&a.sample).map_err(|e| Fail::usage(format!("{}: {e}", a.sample.display())))?;
    let reference = match &a.reference {
        Some(r) => load_dataset(r).map_err(|e| Fail::usage(format!("{}: {e}", r.display())))?,
        None => sample.clone(),
    };
    let roi = a.roi.unwrap_or(Roi::full(sample.width, sample.height));
    check_compatible(&sample, &reference, &roi).map_err(|e| Fail::usage(e.to_string()))?;
    let (sample, reference) = match a.drift_rows {
        Some(rows) => calibrate_drift_pair(&sample, &reference, &DriftMargin { rows }, Some(&roi))
            .map_err(|e| Fail::usage(e.to_string()))?,
        None => (sample, reference),
    };
    let r = retrieve(&sample, &reference, &roi, &Default::default()).map_err(|e| Fail::check(e.to_string()))?;
    r.save(out, window).map_err(|e| Fail::check(e.to_string()))?;
    let _ = write!(io.stdout, "{}", r.report());
    let _ = writeln!(io.stdout, "maps written to {}", out.display());
    Ok(())
}

fn partial(base: &BeamlineGeometry, a: &GeometryArgs) -> Result<PartialGeometry, Fail> {
    let lambda = match a.kv {
        Some(kv) => wavelength_from_voltage(kv).map_err(|e| Fail::usage(e.to_string()))?,
        None => base.lambda,
    };
    Ok(PartialGeometry {
        p0: a.p0_um.map(|v| v * 1e-6),
        p1: a.p1_um.map_or(base.p1, |v| v * 1e-6),
        p2: a.p2_um.map(|v| v * 1e-6),
        l: a.l_m,
        d: a.d_m,
        lambda,
    })
}

fn print_geometry(o: &mut dyn Write, g: &BeamlineGeometry) {
    let _ = writeln!(
        o,
        "p0 = {:.6} um  p1 = {:.6} um  p2 = {:.6} um  l = {:.6} m  d = {:.6} m  lambda = {:.4e} m",
        g.p0 * 1e6,
        g.p1 * 1e6,
        g.p2 * 1e6,
        g.l,
        g.d,
        g.lambda
    );
}

fn geometry(cfg: &ServiceConfig, cmd: &GeometryCmd, io: &mut Io<'_>) -> CmdResult {
    let base = cfg.geometry;
    match cmd {
        GeometryCmd::Check(a) => {
            let p = partial(&base, a)?;
            let g = BeamlineGeometry {
                p0: p.p0.unwrap_or(base.p0),
                p1: p.p1,
                p2: p.p2.unwrap_or(base.p2),
                l: p.l.unwrap_or(base.l),
                d: p.d.unwrap_or(base.d),
                lambda: p.lambda,
            };
            print_geometry(io.stdout, &g);
            match validate_geometry(&g) {
                Ok(()) => {
                    let _ = writeln!(io.stdout, "ok (relative error {:.3e})", g.relative_error());
                    Ok(())
                }
                Err(e @ GeometryError::Violation { .. }) => Err(Fail::check(e.to_string())),
                Err(e) => Err(Fail::usage(e.to_string())),
            }
        }
        GeometryCmd::Complete(a) => {
            let g = complete_geometry(&partial(&base, a)?).map_err(|e| Fail::usage(e.to_string()))?;
            print_geometry(io.stdout, &g);
            Ok(())
        }
    }
}

/// What a reply means, for the REPL annotation.
pub fn describe_reply(raw: &[u8]) -> String {
    match parse_response(raw) {
        Some(Response::Ok) => "accepted".into(),
        Some(Response::Position(a, p)) => format!("axis {a} at {p} steps"),
        Some(Response::Velocity(a, v)) => format!("axis {a} velocity {v} steps/s"),
        Some(Response::NotConnected) => "error: controller not connected (send ?R/ first)".into(),
        Some(Response::LimitReached) => "error: limit reached".into(),
        Some(Response::BadCommand) => "error: command not understood".into(),
        None if raw.is_empty() => "no reply".into(),
        None => "unrecognized reply".into(),
    }
}

fn repl(a: &ReplArgs, io: &mut Io<'_>) -> CmdResult {
    enum Link {
        Local(ControllerHandle),
        Tcp(TcpControllerClient),
    }
    let mut link = match a.connect {
        Some(addr) => Link::Tcp(TcpControllerClient::connect(addr).map_err(|e| Fail::usage(format!("connect {addr}: {e}")))?),
        None => {
            if !(1..=8).contains(&a.device) {
                return Err(Fail::usage(format!("device {} outside 1..8", a.device)));
            }
            Link::Local(ControllerHandle::spawn(ControllerState::new(a.device), ClockMode::Manual))
        }
    };
    let mut line = String::new();
    loop {
        line.clear();
        match io.stdin.read_line(&mut line) {
            Ok(0) => return Ok(()),
            Ok(_) => {}
            Err(e) => return Err(Fail::check(e.to_string())),
        }
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if let Some(dt) = text.strip_prefix("tick") {
            match (&link, dt.trim().parse::<f64>()) {
                (Link::Local(h), Ok(dt)) if dt >= 0.0 && dt.is_finite() => {
                    h.advance(dt);
                    let _ = writeln!(io.stdout, "# advanced {dt} s");
                }
                (Link::Local(_), _) => {
                    let _ = writeln!(io.stdout, "# usage: tick <seconds>");
                }
                (Link::Tcp(_), _) => {
                    let _ = writeln!(io.stdout, "# tick only applies to the in-process controller");
                }
            }
            continue;
        }
        let request = text.as_bytes();
        let sent = match parse_command(request) {
            Ok(c) => format!("{c:?}"),
            Err(e) => format!("unparsable: {e}"),
        };
        let reply = match &mut link {
            Link::Local(h) => h.transact(request),
            Link::Tcp(c) => c.request(request).map_err(|e| Fail::check(e.to_string()))?,
        };
        let _ = writeln!(
            io.stdout,
            "{}    # {sent} -> {}",
            String::from_utf8_lossy(&reply),
            describe_reply(&reply)
        );
    }
}

fn dataset(cmd: &DatasetCmd, io: &mut Io<'_>) -> CmdResult {
    let (DatasetCmd::Info { dir } | DatasetCmd::Verify { dir }) = cmd;
    let ds = load_dataset(dir).map_err(|e| {
        let msg = format!("{}: {e}", dir.display());
        match e {
            gratingscope::dataset::DatasetError::MissingManifest { .. } => Fail::usage(msg),
            _ => Fail::check(msg),
        }
    })?;
    let o = &mut *io.stdout;
    match cmd {
        DatasetCmd::Info { .. } => {
            let c = &ds.config;
            let _ = writeln!(o, "size      {}x{}", ds.width, ds.height);
            let _ = writeln!(o, "mode      {:?}", c.mode);
            let _ = writeln!(o, "steps     {}", c.steps);
            let _ = writeln!(o, "averaged  {}", c.frames_to_average);
            let _ = writeln!(o, "period    {} um", ds.piezo_period_um);
            let _ = writeln!(o, "arms      {:?}", ds.arms_present());
            let _ = writeln!(o, "frames    {} of {}", ds.frames.len(), c.expected_frames());
            let _ = writeln!(o, "complete  {}", ds.complete);
            let _ = writeln!(o, "seed      {}", c.seed);
        }
        DatasetCmd::Verify { .. } => {
            let state = if ds.complete { "complete" } else { "incomplete" };
            let _ = writeln!(o, "{}: {} frames, checksums ok, {state}", dir.display(), ds.frames.len());
        }
    }
    Ok(())
}
