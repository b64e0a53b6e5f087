//! Multi-stage runs shared by the command line and the test suites: oracle
//! demonstrations, augmentation cells, training and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{make_grid, AugmentConfig, IntervalError};
use crate::dynamics::{self, UavParams, TICK_RATE};
use crate::evalharness::{self, EpisodeConfig, EvalError, EvalReport, NetController, OraclePilot, TrajectoryTrace};
use crate::flightlog::{self, FlightLog, LogError};
use crate::net::{self, AdamConfig, LossCurve, NetConfig, NetError, NetParams, TrainConfig};
use crate::render::CameraModel;
use crate::track::TrackSpec;

/// Upper bound on a single oracle demonstration.
pub const DEMO_MAX_SECONDS: f64 = 600.0;

/// Lateral rows and yaw columns of the augmentation study.
pub const GRID_LATERAL: [&str; 4] = ["[-75:25:75]", "[-75:50:75]", "[-50:50:50]", "[None]"];
pub const GRID_YAW: [&str; 5] = ["[None]", "[-20:20:20]", "[-30:15:30]", "[-30:10:30]", "[-30:5:30]"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Interval(#[from] IntervalError),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
}

/// Everything a pipeline run depends on. Loaded from TOML; missing keys take
/// the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tracks_dir: PathBuf,
    pub logs_dir: PathBuf,
    pub datasets_dir: PathBuf,
    pub models_dir: PathBuf,
    pub reports_dir: PathBuf,
    pub width: u32,
    pub height: u32,
    /// Lateral offsets in centimeters, bracket syntax.
    pub lateral: String,
    /// Yaw offsets in degrees, bracket syntax.
    pub yaw: String,
    /// Every n-th demo frame becomes a sample.
    pub stride: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub train_seed: u64,
    pub init_seed: u64,
    pub laps: usize,
    pub runs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracks_dir: "out/tracks".into(),
            logs_dir: "out/logs".into(),
            datasets_dir: "out/datasets".into(),
            models_dir: "out/models".into(),
            reports_dir: "out/reports".into(),
            width: 64,
            height: 36,
            lateral: "[-50:50:50]".into(),
            yaw: "[-30:15:30]".into(),
            stride: 2,
            lr: 1e-3,
            batch_size: 64,
            epochs: 1000,
            max_steps: Some(6000),
            train_seed: 3,
            init_seed: 7,
            laps: evalharness::DEFAULT_LAPS,
            runs: evalharness::DEFAULT_RUNS,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.stride == 0 || self.batch_size == 0 || self.runs == 0 {
            return bad("stride, batch_size and runs must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        self.augment()?;
        self.net_config()?;
        Ok(())
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel { width: self.width, height: self.height, ..CameraModel::default() }
    }

    pub fn augment(&self) -> Result<AugmentConfig, PipelineError> {
        Ok(make_grid(&self.lateral, &self.yaw)?)
    }

    /// The full-size network at 320x180, otherwise the reduced one.
    pub fn net_config(&self) -> Result<NetConfig, PipelineError> {
        let base = if (self.width, self.height) == (320, 180) { NetConfig::full_size() } else { NetConfig::reduced() };
        let cfg = NetConfig { width: self.width as usize, height: self.height as usize, ..base };
        cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            seed: self.train_seed,
        }
    }

    pub fn hash(&self) -> u64 {
        crate::track::hash64(self.to_toml().as_bytes())
    }
}

/// Two-lap (or `laps`) oracle flight on each track.
pub fn oracle_demos(tracks: &[TrackSpec], params: &UavParams, cam: &CameraModel, laps: usize) -> Result<Vec<FlightLog>, PipelineError> {
    if laps == 0 {
        return Err(PipelineError::Invalid("a demonstration needs at least one lap".into()));
    }
    tracks
        .iter()
        .map(|t| {
            let mut pilot = OraclePilot::new(params.clone());
            let start = dynamics::spawn(t).map_err(|e| PipelineError::Invalid(e.to_string()))?;
            let max_ticks = (DEMO_MAX_SECONDS * TICK_RATE) as u64;
            Ok(flightlog::record(t, &mut pilot, params, cam, start, laps, max_ticks)?)
        })
        .collect()
}

/// One training configuration of the augmentation study.
#[derive(Clone, Debug)]
pub struct Cell {
    pub augment: AugmentConfig,
    pub stride: usize,
    pub net: NetConfig,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Cell {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            augment: cfg.augment()?,
            stride: cfg.stride,
            net: cfg.net_config()?,
            init_seed: cfg.init_seed,
            train: cfg.train_config(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub samples: usize,
    pub original: usize,
    pub curve: LossCurve,
    pub reports: Vec<EvalReport>,
    pub mean_accuracy: f64,
    pub seconds: f64,
}

/// Renders the cell's dataset from `demos` and trains a fresh network on it.
pub fn train_cell(
    demos: &[(&FlightLog, &TrackSpec)],
    params: &UavParams,
    cell: &Cell,
    progress: impl FnMut(usize, f64),
) -> Result<(NetParams<f32>, LossCurve, usize, usize), PipelineError> {
    let cam = CameraModel { width: cell.net.width as u32, height: cell.net.height as u32, ..CameraModel::default() };
    let data = flightlog::build_dataset(demos, params, &cam, &cell.augment, cell.stride)?;
    let per_frame = 1 + cell.augment.offsets().len();
    let mut net = NetParams::<f32>::init(&cell.net, cell.init_seed)?;
    let curve = net::train(&mut net, &data, &cell.train, progress)?;
    Ok((net, curve, data.len(), data.len() / per_frame))
}

/// `runs` episodes per track; run k uses the k-th spawn perturbation.
pub fn evaluate(
    controller: &mut dyn evalharness::Controller,
    tracks: &[TrackSpec],
    runs: usize,
    episode: &EpisodeConfig,
) -> Result<Vec<(EvalReport, TrajectoryTrace)>, PipelineError> {
    let mut out = Vec::new();
    for t in tracks {
        for run in 0..runs {
            let cfg = EpisodeConfig { run, ..episode.clone() };
            out.push(evalharness::run_episode(t, controller, &cfg)?);
        }
    }
    Ok(out)
}

pub fn run_cell(
    demos: &[(&FlightLog, &TrackSpec)],
    test_tracks: &[TrackSpec],
    params: &UavParams,
    cell: &Cell,
    runs: usize,
    laps: usize,
) -> Result<CellOutcome, PipelineError> {
    let t0 = Instant::now();
    let (net, curve, samples, original) = train_cell(demos, params, cell, |_, _| {})?;
    let cam = CameraModel { width: cell.net.width as u32, height: cell.net.height as u32, ..CameraModel::default() };
    let episode = EpisodeConfig { laps, camera: cam, params: params.clone(), ..EpisodeConfig::default() };
    let mut ctl = NetController::new(net, "net");
    let reports: Vec<EvalReport> = evaluate(&mut ctl, test_tracks, runs, &episode)?.into_iter().map(|(r, _)| r).collect();
    Ok(CellOutcome {
        samples,
        original,
        curve,
        mean_accuracy: evalharness::mean_accuracy(&reports),
        reports,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Every (lateral, yaw) cell, row-major, with at most `jobs` cells at once.
#[allow(clippy::too_many_arguments)]
pub fn run_grid(
    demos: &[(&FlightLog, &TrackSpec)],
    test_tracks: &[TrackSpec],
    params: &UavParams,
    base: &Cell,
    lateral: &[String],
    yaw: &[String],
    runs: usize,
    laps: usize,
    jobs: usize,
) -> Result<Vec<Vec<CellOutcome>>, PipelineError> {
    let mut cells = Vec::new();
    for l in lateral {
        for y in yaw {
            let g = make_grid(l, y)?;
            cells.push(Cell { augment: AugmentConfig { lateral_offsets: g.lateral_offsets, yaw_offsets: g.yaw_offsets, ..base.augment.clone() }, ..base.clone() });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let flat: Vec<CellOutcome> =
        pool.install(|| cells.par_iter().map(|c| run_cell(demos, test_tracks, params, c, runs, laps)).collect::<Result<_, _>>())?;
    let mut it = flat.into_iter();
    Ok(lateral.iter().map(|_| it.by_ref().take(yaw.len()).collect()).collect())
}

/// Accuracy matrix as CSV: one row per lateral spec, one column per yaw spec.
pub fn grid_csv(lateral: &[String], yaw: &[String], outcomes: &[Vec<CellOutcome>]) -> String {
    let mut s = String::from("lateral_cm\\yaw_deg");
    for y in yaw {
        s.push_str(&format!(",{y}"));
    }
    s.push('\n');
    for (l, row) in lateral.iter().zip(outcomes) {
        s.push_str(l);
        for c in row {
            s.push_str(&format!(",{:.3}", c.mean_accuracy));
        }
        s.push('\n');
    }
    s
}
