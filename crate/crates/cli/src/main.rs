use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use uavrace::bundled;
use uavrace::dynamics::{self, UavParams};
use uavrace::evalharness::{self, Controller, EpisodeConfig, NetController, OraclePilot};
use uavrace::flightlog::{self, DatasetManifest, FlightLog, MANIFEST_FILE};
use uavrace::net::{self, Mode, NetParams};
use uavrace::pipeline::{self, Cell, PipelineConfig};
use uavrace::render;
use uavrace::track::{build_track, parse_sketch, TrackParams, TrackSpec};
use uavrace::wire::{Pacing, Server, ServerConfig, WireError, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "uavrace", version, about = "UAV racing simulator and imitation-learning pipeline")]
struct Cli {
    /// TOML pipeline config; its keys override the corresponding flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// TOML vehicle parameters.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Track compilation.
    Track {
        #[command(subcommand)]
        cmd: TrackCmd,
    },
    /// Run a session server for pilots, controllers and observers.
    Serve(ServeArgs),
    /// Record oracle demonstrations.
    Demo(DemoArgs),
    /// Render a dataset from flight logs.
    Augment(AugmentArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a network (or the oracle) on tracks.
    Eval(EvalArgs),
    /// Train and evaluate every cell of an augmentation grid.
    Grid(GridArgs),
    /// Re-simulate a flight log and check it bit for bit.
    Replay { log: PathBuf },
    /// Print or check vehicle parameters.
    Params {
        /// Validate this file instead of printing the defaults.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Inference throughput.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum TrackCmd {
    /// Compile sketch files (or all bundled sketches) into track files.
    Build {
        sketches: Vec<PathBuf>,
        #[arg(long)]
        bundled: bool,
        #[arg(long)]
        tracks_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    track: String,
    #[arg(long, default_value_t = SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)))]
    listen: SocketAddr,
    #[arg(long, default_value = "locked")]
    pacing: Pacing,
    #[arg(long)]
    record_dir: Option<PathBuf>,
    #[arg(long)]
    laps: Option<usize>,
    /// Stop after this many ticks.
    #[arg(long)]
    max_ticks: Option<u64>,
}

#[derive(Args)]
struct DemoArgs {
    /// Track names or files; all training tracks when omitted.
    #[arg(long = "track")]
    tracks: Vec<String>,
    #[arg(long, default_value = "oracle")]
    pilot: String,
    #[arg(long)]
    laps: Option<usize>,
    #[arg(long)]
    logs_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    lateral: Option<String>,
    #[arg(long)]
    yaw: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding a manifest.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    weights: Option<PathBuf>,
    /// Fly the scripted oracle instead of a network.
    #[arg(long)]
    oracle: bool,
    /// Track names or files; all test tracks when omitted.
    #[arg(long = "track")]
    tracks: Vec<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    laps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_heatmaps: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Lateral row specs in cm; the four standard rows when omitted.
    #[arg(long = "lateral")]
    lateral: Vec<String>,
    /// Yaw column specs in degrees; the five standard columns when omitted.
    #[arg(long = "yaw")]
    yaw: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

/// Failure classes with stable exit codes.
enum Failure {
    User(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn user(e: impl Into<anyhow::Error>) -> Failure {
    Failure::User(e.into())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("failed: {e:#}");
            ExitCode::from(3)
        }
    }
}

/// Flag values with the config file laid over them.
fn settle(flags: PipelineConfig, file: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let Some(path) = file else {
        flags.validate().map_err(user)?;
        return Ok(flags);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(user)?;
    let overrides: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(user)?;
    let mut merged: toml::Table = toml::from_str(&flags.to_toml()).expect("config round-trips");
    merged.extend(overrides);
    PipelineConfig::from_toml(&toml::to_string(&merged).expect("table serializes"))
        .with_context(|| format!("in {}", path.display()))
        .map_err(user)
}

fn load_params(path: Option<&Path>) -> Result<UavParams, Failure> {
    match path {
        None => Ok(UavParams::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(user)?;
            UavParams::from_toml(&text).with_context(|| format!("in {}", p.display())).map_err(user)
        }
    }
}

/// A bundled name, a `.sketch` file, a compiled track file, or a name found
/// in the tracks directory.
fn load_track(arg: &str, tracks_dir: &Path) -> Result<TrackSpec, Failure> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {arg}")).map_err(user)?;
        if path.extension().is_some_and(|e| e == "sketch") {
            let sketch = parse_sketch(&text).with_context(|| format!("in {arg}")).map_err(user)?;
            return build_track(&sketch, &TrackParams::default()).with_context(|| format!("building {arg}")).map_err(user);
        }
        return TrackSpec::from_document(&text).with_context(|| format!("in {arg}")).map_err(user);
    }
    if let Some(t) = bundled::load(arg) {
        return Ok(t);
    }
    let compiled = tracks_dir.join(format!("{arg}.track"));
    if compiled.is_file() {
        return load_track(&compiled.to_string_lossy(), tracks_dir);
    }
    Err(user(anyhow!("unknown track {arg:?}")))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

/// Side file recording what produced an artifact.
fn write_meta(artifact: &Path, cfg: &PipelineConfig, params: &UavParams) -> Result<(), Failure> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".meta.toml");
    let text = format!(
        "# config hash {:016x}, params hash {:016x}\n{}",
        cfg.hash(),
        params.hash(),
        cfg.to_toml()
    );
    fs::write(&name, text).with_context(|| format!("writing {}", Path::new(&name).display()))?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let params = load_params(cli.params.as_deref())?;
    let base = PipelineConfig::default();
    let file = cli.config.as_deref();
    match cli.cmd {
        Cmd::Track { cmd: TrackCmd::Build { sketches, bundled: all, tracks_dir } } => {
            let cfg = settle(PipelineConfig { tracks_dir: tracks_dir.unwrap_or(base.tracks_dir.clone()), ..base }, file)?;
            cmd_track_build(&cfg, &sketches, all)
        }
        Cmd::Serve(a) => {
            let cfg = settle(PipelineConfig { laps: a.laps.unwrap_or(base.laps), ..base }, file)?;
            cmd_serve(&cfg, &params, a)
        }
        Cmd::Demo(a) => {
            let cfg = settle(
                PipelineConfig { laps: a.laps.unwrap_or(base.laps), logs_dir: a.logs_dir.clone().unwrap_or(base.logs_dir.clone()), ..base },
                file,
            )?;
            cmd_demo(&cfg, &params, &a)
        }
        Cmd::Augment(a) => {
            let cfg = settle(
                PipelineConfig {
                    lateral: a.lateral.clone().unwrap_or(base.lateral.clone()),
                    yaw: a.yaw.clone().unwrap_or(base.yaw.clone()),
                    stride: a.stride.unwrap_or(base.stride),
                    ..base
                },
                file,
            )?;
            cmd_augment(&cfg, &params, &a)
        }
        Cmd::Train(a) => {
            let cfg = settle(
                PipelineConfig {
                    lr: a.lr.unwrap_or(base.lr),
                    batch_size: a.batch_size.unwrap_or(base.batch_size),
                    epochs: a.epochs.unwrap_or(base.epochs),
                    max_steps: a.max_steps.or(base.max_steps),
                    train_seed: a.seed.unwrap_or(base.train_seed),
                    ..base
                },
                file,
            )?;
            cmd_train(&cfg, &params, &a)
        }
        Cmd::Eval(a) => {
            let cfg = settle(PipelineConfig { runs: a.runs.unwrap_or(base.runs), laps: a.laps.unwrap_or(base.laps), ..base }, file)?;
            cmd_eval(&cfg, &params, &a)
        }
        Cmd::Grid(a) => {
            let cfg = settle(base, file)?;
            cmd_grid(&cfg, &params, &a)
        }
        Cmd::Replay { log } => cmd_replay(&params, &log),
        Cmd::Params { check } => match check {
            Some(p) => {
                let loaded = load_params(Some(&p))?;
                println!("{} ok, hash {:016x}", p.display(), loaded.hash());
                Ok(())
            }
            None => {
                print!("{}", params.to_toml());
                Ok(())
            }
        },
        Cmd::Bench(a) => {
            let cfg = settle(PipelineConfig { width: a.width.unwrap_or(base.width), height: a.height.unwrap_or(base.height), ..base }, file)?;
            cmd_bench(&cfg, a.iterations)
        }
    }
}

fn cmd_track_build(cfg: &PipelineConfig, sketches: &[PathBuf], all: bool) -> Outcome {
    if sketches.is_empty() && !all {
        return Err(user(anyhow!("give sketch files or --bundled")));
    }
    let mut tracks = Vec::new();
    if all {
        tracks.extend(bundled::all_tracks());
    }
    for s in sketches {
        let text = fs::read_to_string(s).with_context(|| format!("reading {}", s.display())).map_err(user)?;
        let sketch = parse_sketch(&text).with_context(|| format!("in {}", s.display())).map_err(user)?;
        tracks.push(build_track(&sketch, &TrackParams::default()).with_context(|| format!("building {}", s.display())).map_err(user)?);
    }
    create_dir(&cfg.tracks_dir)?;
    for t in &tracks {
        let path = cfg.tracks_dir.join(format!("{}.track", t.name));
        fs::write(&path, t.to_document()).with_context(|| format!("writing {}", path.display()))?;
        println!("{} gates={} hash={:016x} -> {}", t.name, t.gates.len(), t.content_hash(), path.display());
    }
    Ok(())
}

fn cmd_serve(cfg: &PipelineConfig, params: &UavParams, a: ServeArgs) -> Outcome {
    let track = load_track(&a.track, &cfg.tracks_dir)?;
    let sc = ServerConfig {
        listen: a.listen,
        pacing: a.pacing,
        camera: cfg.camera(),
        params: params.clone(),
        laps: cfg.laps,
        record_dir: a.record_dir.clone(),
        max_ticks: a.max_ticks,
        ..ServerConfig::default()
    };
    if let Some(d) = &a.record_dir {
        create_dir(d)?;
    }
    let server = match Server::bind(track, sc) {
        Ok(s) => s,
        Err(e @ WireError::PortBusy(_)) => return Err(Failure::Runtime(e.into())),
        Err(e) => return Err(user(e)),
    };
    let handle = server.start()?;
    println!("serving {} on {} ({} pacing)", a.track, handle.local_addr(), a.pacing);
    let summary = handle.join()?;
    println!("session ended after {} ticks, {} frames, {} logs", summary.ticks, summary.frames_sent, summary.logs.len());
    Ok(())
}

fn cmd_demo(cfg: &PipelineConfig, params: &UavParams, a: &DemoArgs) -> Outcome {
    if a.pilot != "oracle" {
        return Err(user(anyhow!("only the oracle pilot records offline; humans record through `serve`")));
    }
    let tracks = if a.tracks.is_empty() {
        bundled::training_tracks()
    } else {
        a.tracks.iter().map(|t| load_track(t, &cfg.tracks_dir)).collect::<Result<_, _>>()?
    };
    let demos = pipeline::oracle_demos(&tracks, params, &cfg.camera(), cfg.laps).map_err(|e| match e {
        pipeline::PipelineError::Invalid(_) => user(e),
        e => Failure::Runtime(e.into()),
    })?;
    create_dir(&cfg.logs_dir)?;
    for (log, t) in demos.iter().zip(&tracks) {
        let path = cfg.logs_dir.join(format!("{}.uavl", t.name));
        log.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!(
            "{}: {} frames ({:.1} s), {} gate events -> {}",
            t.name,
            log.frames.len(),
            log.duration_seconds(),
            log.gate_events(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_augment(cfg: &PipelineConfig, params: &UavParams, a: &AugmentArgs) -> Outcome {
    let augment = cfg.augment().map_err(user)?;
    let cam = cfg.camera();
    let out = a.out.clone().unwrap_or_else(|| cfg.datasets_dir.join("default"));
    create_dir(&out)?;
    let mut parts = Vec::new();
    for (i, path) in a.logs.iter().enumerate() {
        let log = FlightLog::load(path).with_context(|| format!("loading {}", path.display())).map_err(user)?;
        let track = load_track(&log.track, &cfg.tracks_dir)?;
        let sub = PathBuf::from(format!("{:02}_{}", i, log.track));
        let m = flightlog::export_dataset(&log, &track, params, &cam, &augment, cfg.stride, &out.join(&sub))
            .with_context(|| format!("rendering {}", path.display()))?;
        println!("{}: {} original, {} total", path.display(), m.original, m.total);
        parts.push((sub, m));
    }
    let merged = DatasetManifest::merge(&parts)?;
    let path = out.join(MANIFEST_FILE);
    merged.save(&path)?;
    write_meta(&path, cfg, params)?;
    println!(
        "dataset {}: {} original, {} total (x{:.3})",
        out.display(),
        merged.original,
        merged.total,
        merged.total as f64 / merged.original.max(1) as f64
    );
    Ok(())
}

fn cmd_train(cfg: &PipelineConfig, params: &UavParams, a: &TrainArgs) -> Outcome {
    let manifest = DatasetManifest::load(&a.dataset.join(MANIFEST_FILE))
        .with_context(|| format!("loading dataset {}", a.dataset.display()))
        .map_err(user)?;
    if manifest.total == 0 {
        return Err(user(anyhow!("dataset {} is empty", a.dataset.display())));
    }
    let cfg = PipelineConfig { width: manifest.width, height: manifest.height, ..cfg.clone() };
    let data = flightlog::load_dataset(&manifest, &a.dataset)?;
    let net_cfg = cfg.net_config().map_err(user)?;
    let mut net = NetParams::<f32>::init(&net_cfg, cfg.init_seed)?;
    let t0 = Instant::now();
    let curve = net::train(&mut net, &data, &cfg.train_config(), |e, l| {
        println!("epoch {e} loss {l:.6} ({:.0} s)", t0.elapsed().as_secs_f64());
    })?;
    let out = a.out.clone().unwrap_or_else(|| cfg.models_dir.join("net.uavw"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut buf = Vec::new();
    net::save_weights(&net, &mut buf)?;
    fs::write(&out, buf).with_context(|| format!("writing {}", out.display()))?;
    let csv = out.with_extension("loss.csv");
    fs::write(&csv, curve.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    write_meta(&out, &cfg, params)?;
    println!("{} steps, weights {}, loss curve {}", curve.steps, out.display(), csv.display());
    Ok(())
}

fn cmd_eval(cfg: &PipelineConfig, params: &UavParams, a: &EvalArgs) -> Outcome {
    let tracks = if a.tracks.is_empty() {
        bundled::test_tracks()
    } else {
        a.tracks.iter().map(|t| load_track(t, &cfg.tracks_dir)).collect::<Result<_, _>>()?
    };
    let mut controller: Box<dyn Controller> = if a.oracle {
        Box::new(OraclePilot::new(params.clone()))
    } else {
        let path = a.weights.as_ref().expect("required unless oracle");
        let f = fs::File::open(path).with_context(|| format!("opening {}", path.display())).map_err(user)?;
        let net = net::load_weights(&cfg.net_config().map_err(user)?, std::io::BufReader::new(f))
            .with_context(|| format!("loading {}", path.display()))
            .map_err(user)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "net".into());
        Box::new(NetController::new(net, name))
    };
    let episode = EpisodeConfig { laps: cfg.laps, camera: cfg.camera(), params: params.clone(), ..EpisodeConfig::default() };
    let results = pipeline::evaluate(controller.as_mut(), &tracks, cfg.runs, &episode)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.reports_dir.clone());
    create_dir(&out)?;
    let reports: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    let csv = out.join("eval.csv");
    evalharness::write_reports_csv(&reports, fs::File::create(&csv).with_context(|| format!("writing {}", csv.display()))?)?;
    write_meta(&csv, cfg, params)?;
    if !a.no_heatmaps {
        for ((r, trace), t) in results.iter().zip(tracks.iter().flat_map(|t| std::iter::repeat_n(t, cfg.runs))) {
            let path = out.join(format!("{}_{}_run{}.png", r.controller, r.track, r.run));
            evalharness::export_heatmap(trace, t, &path)?;
        }
    }
    for r in &reports {
        println!("{} run {}: accuracy {:.3} ({}/{}), {}", r.track, r.run, r.accuracy, r.gates_passed, r.gates_total, r.termination);
    }
    println!("mean accuracy {:.3}, report {}", evalharness::mean_accuracy(&reports), csv.display());
    Ok(())
}

fn cmd_grid(cfg: &PipelineConfig, params: &UavParams, a: &GridArgs) -> Outcome {
    let lateral: Vec<String> =
        if a.lateral.is_empty() { pipeline::GRID_LATERAL.iter().map(|s| s.to_string()).collect() } else { a.lateral.clone() };
    let yaw: Vec<String> = if a.yaw.is_empty() { pipeline::GRID_YAW.iter().map(|s| s.to_string()).collect() } else { a.yaw.clone() };
    for s in lateral.iter().chain(&yaw) {
        uavrace::augment::parse_interval(s).with_context(|| format!("grid spec {s:?}")).map_err(user)?;
    }
    let cam = cfg.camera();
    let train = bundled::training_tracks();
    let test = bundled::test_tracks();
    let demos = pipeline::oracle_demos(&train, params, &cam, cfg.laps)?;
    let pairs: Vec<_> = demos.iter().zip(&train).collect();
    let base = Cell::from_config(cfg).map_err(user)?;
    let t0 = Instant::now();
    let grid = pipeline::run_grid(&pairs, &test, params, &base, &lateral, &yaw, cfg.runs, cfg.laps, a.jobs)?;
    let table = pipeline::grid_csv(&lateral, &yaw, &grid);
    print!("{table}");
    let out = a.out.clone().unwrap_or_else(|| cfg.reports_dir.join("grid.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&out, &table).with_context(|| format!("writing {}", out.display()))?;
    write_meta(&out, cfg, params)?;
    println!("{} cells in {:.0} s -> {}", lateral.len() * yaw.len(), t0.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn cmd_replay(params: &UavParams, path: &Path) -> Outcome {
    let log = FlightLog::load(path).with_context(|| format!("loading {}", path.display())).map_err(user)?;
    log.validate().map_err(user)?;
    let states = flightlog::replay(&log, params)?;
    if let Some((s, f)) = states.iter().zip(&log.frames).find(|(s, f)| !f.matches(s)) {
        return Err(Failure::Runtime(anyhow!("replay diverged at tick {} (state tick {})", f.tick, s.tick)));
    }
    let last = states.last().map(|s| s.position).unwrap_or(log.initial.position);
    println!(
        "{}: {} frames replay bit-identically, final position ({:.3}, {:.3}, {:.3})",
        path.display(),
        states.len(),
        last.x,
        last.y,
        last.z
    );
    Ok(())
}

fn cmd_bench(cfg: &PipelineConfig, iterations: usize) -> Outcome {
    if iterations == 0 {
        return Err(user(anyhow!("iterations must be positive")));
    }
    let net_cfg = cfg.net_config().map_err(user)?;
    let net = NetParams::<f32>::init(&net_cfg, cfg.init_seed)?;
    let track = bundled::load("track01").expect("bundled track");
    let state = dynamics::spawn(&track).map_err(|e| anyhow!("{e}"))?;
    let cam = cfg.camera();
    let image = render::render_view(&track, &render::camera_pose(&state, &cam, render::ViewOffset::ZERO), &cam);
    let mut err = None;
    let fps = evalharness::benchmark(iterations, || {
        if let Err(e) = net.forward(&image, Mode::Eval, 0) {
            err = Some(e);
        }
    })?;
    if let Some(e) = err {
        return Err(e.into());
    }
    println!("{}x{} eval forward: {:.1} fps", cfg.width, cfg.height, fps);
    Ok(())
}
