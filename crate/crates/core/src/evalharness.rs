//! Closed-loop evaluation: the scripted oracle pilot, episode runner,
//! reports, speed heatmaps and inference benchmarking.

use std::fmt;
use std::io;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DynamicsError, StickInput, UavParams, UavState, GRAVITY, TICK_RATE};
use crate::net::{Mode, NetParams};
use crate::render::{self, CameraModel, Image, ViewOffset};
use crate::track::timing::{LapTimer, RaceEvent};
use crate::track::{normalize_angle, TrackSpec, STADIUM_HALF_X, STADIUM_HALF_Y};

/// Margin around the stadium rectangle before an episode is out of bounds.
pub const BOUNDS_MARGIN: f64 = 10.0;
pub const DEFAULT_LAPS: usize = 2;
pub const DEFAULT_RUNS: usize = 3;
pub const TIMEOUT_FACTOR: f64 = 4.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Finished,
    Crash,
    Timeout,
    OutOfBounds,
    ControllerFailure,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Termination::Finished => "finished",
            Termination::Crash => "crash",
            Termination::Timeout => "timeout",
            Termination::OutOfBounds => "out_of_bounds",
            Termination::ControllerFailure => "controller_failure",
        };
        f.write_str(s)
    }
}

/// What a controller may look at on each tick.
pub struct Observation<'a> {
    pub image: Option<&'a Image>,
    pub state: &'a UavState,
    pub track: &'a TrackSpec,
}

pub trait Controller {
    fn id(&self) -> String;
    /// Whether the harness must render the pilot view every tick.
    fn needs_image(&self) -> bool;
    fn reset(&mut self) {}
    fn act(&mut self, obs: &Observation) -> StickInput;
}

/// Constants of the scripted pilot. Tuned once, then frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub max_speed: f64,
    pub max_lateral_accel: f64,
    pub max_accel: f64,
    pub min_lookahead: f64,
    pub lookahead_time: f64,
    /// Distance over which upcoming curvature limits the target speed.
    pub preview: f64,
    pub heading_gain: f64,
    pub lateral_gain: f64,
    pub lateral_damping: f64,
    pub speed_gain: f64,
    pub altitude_gain: f64,
    /// Gentle altitude wave so demonstrations cover more than one height.
    pub altitude_amplitude: f64,
    pub altitude_period: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_speed: 10.0,
            max_lateral_accel: 5.0,
            max_accel: 7.0,
            min_lookahead: 5.0,
            lookahead_time: 0.8,
            preview: 12.0,
            heading_gain: 4.0,
            lateral_gain: 2.0,
            lateral_damping: 2.5,
            speed_gain: 1.5,
            altitude_gain: 1.0,
            altitude_amplitude: 0.3,
            altitude_period: 37.0,
        }
    }
}

/// Pure-pursuit pilot following the centerline.
#[derive(Clone, Debug)]
pub struct OraclePilot {
    pub config: OracleConfig,
    pub params: UavParams,
    hint: Option<usize>,
}

impl OraclePilot {
    pub fn new(params: UavParams) -> Self {
        Self { config: OracleConfig::default(), params, hint: None }
    }

    pub fn with_config(params: UavParams, config: OracleConfig) -> Self {
        Self { config, params, hint: None }
    }

    /// Sticks for `state`, tracking the nearest point near the previous one.
    pub fn command(&mut self, track: &TrackSpec, state: &UavState) -> StickInput {
        let loc = match self.hint {
            Some(h) => {
                let l = track.locate_near(&state.position, h, 60);
                if l.distance > 10.0 {
                    track.locate(&state.position)
                } else {
                    l
                }
            }
            None => track.locate(&state.position),
        };
        self.hint = Some(loc.index);
        oracle_law(track, state, &self.params, &self.config, loc.station, loc.lateral)
    }
}

impl Controller for OraclePilot {
    fn id(&self) -> String {
        "oracle".into()
    }
    fn needs_image(&self) -> bool {
        false
    }
    fn reset(&mut self) {
        self.hint = None;
    }
    fn act(&mut self, obs: &Observation) -> StickInput {
        self.command(obs.track, obs.state)
    }
}

/// Stateless oracle: nearest centerline point over the whole loop.
pub fn oracle_pilot(track: &TrackSpec, state: &UavState) -> StickInput {
    let loc = track.locate(&state.position);
    oracle_law(track, state, &UavParams::default(), &OracleConfig::default(), loc.station, loc.lateral)
}

/// Curvature-limited target speed at `station`.
pub fn target_speed(track: &TrackSpec, cfg: &OracleConfig, station: f64) -> f64 {
    let mut kmax: f64 = 0.0;
    let mut d = 0.0;
    while d <= cfg.preview {
        kmax = kmax.max(track.curvature(station + d, 2.0).abs());
        d += 1.0;
    }
    if kmax < 1e-6 {
        cfg.max_speed
    } else {
        (cfg.max_lateral_accel / kmax).sqrt().min(cfg.max_speed)
    }
}

fn oracle_law(
    track: &TrackSpec,
    state: &UavState,
    params: &UavParams,
    cfg: &OracleConfig,
    station: f64,
    lateral: f64,
) -> StickInput {
    let here = track.sample_at(station);
    let t = Vector2::new(here.tangent.x, here.tangent.y);
    let n = Vector2::new(-t.y, t.x);
    let p = state.position.xy();
    let v = state.velocity.xy();
    let v_t = v.dot(&t);
    let v_n = v.dot(&n);
    let speed = v.norm();

    // Heading: pure pursuit on a lookahead point along the centerline.
    let lookahead = cfg.min_lookahead.max(cfg.lookahead_time * speed);
    let goal = track.sample_at(station + lookahead).point.xy();
    let to_goal = goal - p;
    let bearing = to_goal.y.atan2(to_goal.x);
    let yaw = state.yaw();
    let kappa = track.curvature(station, 2.0);
    let yaw_rate = cfg.heading_gain * normalize_angle(bearing - yaw) + v_t * kappa;
    let rudder = -yaw_rate / params.max_yaw_rate;

    // Translation: curvature feedforward plus lateral PD, speed schedule.
    let v_target = target_speed(track, cfg, station);
    let a_n = v_t * v_t * kappa - cfg.lateral_gain * lateral - cfg.lateral_damping * v_n;
    let a_t = cfg.speed_gain * (v_target - v_t);
    let mut a = t * a_t + n * a_n;
    if a.norm() > cfg.max_accel {
        a *= cfg.max_accel / a.norm();
    }
    a -= crate::dynamics::drag_force(state, params).xy() / params.mass;
    let (s, c) = yaw.sin_cos();
    let a_fwd = a.x * c + a.y * s;
    let a_left = -a.x * s + a.y * c;
    let pitch = (a_fwd / GRAVITY).atan();
    let roll = (-a_left * pitch.cos() / GRAVITY).atan();

    let z_target = track.gates[0].center.z
        + cfg.altitude_amplitude * (std::f64::consts::TAU * station / cfg.altitude_period).sin();
    let throttle = 0.5 + (cfg.altitude_gain * (z_target - state.position.z)).clamp(-0.5, 0.5);
    StickInput::new(
        throttle as f32,
        (pitch / params.max_tilt) as f32,
        (roll / params.max_tilt) as f32,
        rudder as f32,
    )
    .clamped()
}

/// Holds altitude in place; never passes a gate.
pub struct HoverController;

impl Controller for HoverController {
    fn id(&self) -> String {
        "hover".into()
    }
    fn needs_image(&self) -> bool {
        false
    }
    fn act(&mut self, _obs: &Observation) -> StickInput {
        dynamics::hover_trim(&UavParams::default())
    }
}

/// Image-only controller backed by a trained network.
pub struct NetController {
    pub params: NetParams<f32>,
    pub name: String,
}

impl NetController {
    pub fn new(params: NetParams<f32>, name: impl Into<String>) -> Self {
        Self { params, name: name.into() }
    }
}

impl Controller for NetController {
    fn id(&self) -> String {
        self.name.clone()
    }
    fn needs_image(&self) -> bool {
        true
    }
    fn act(&mut self, obs: &Observation) -> StickInput {
        let out = obs.image.ok_or(()).and_then(|img| self.params.forward(img, Mode::Eval, 0).map_err(|_| ()));
        match out {
            Ok(y) => StickInput::from_array(y),
            Err(()) => StickInput::new(f32::NAN, f32::NAN, f32::NAN, f32::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub track: String,
    pub controller: String,
    pub run: usize,
    pub laps: usize,
    pub gates_passed: usize,
    pub gates_total: usize,
    pub accuracy: f64,
    pub gate_splits: Vec<f64>,
    pub lap_times: Vec<f64>,
    pub best_lap: Option<f64>,
    pub termination: Termination,
    pub duration: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryTrace {
    pub start_tick: u64,
    pub positions: Vec<Vector3<f64>>,
    pub speeds: Vec<f64>,
}

impl TrajectoryTrace {
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
    fn push(&mut self, s: &UavState) {
        self.positions.push(s.position);
        self.speeds.push(s.speed());
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeConfig {
    pub laps: usize,
    /// Seconds; `None` means four times the oracle's time on this track.
    pub timeout: Option<f64>,
    pub camera: CameraModel,
    pub params: UavParams,
    pub run: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            laps: DEFAULT_LAPS,
            timeout: None,
            camera: CameraModel::default(),
            params: UavParams::default(),
            run: 0,
        }
    }
}

/// Spawn state for a run: run 0 is the nominal start, later runs get a small
/// seeded lateral and heading perturbation.
pub fn spawn_for_run(track: &TrackSpec, run: usize) -> Result<UavState, DynamicsError> {
    let mut s = dynamics::spawn(track)?;
    if run > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(run as u64);
        let lateral: f64 = rng.gen_range(-0.3..0.3);
        let yaw: f64 = rng.gen_range(-5f64..5.0).to_radians();
        let g = &track.gates[0];
        let right = g.right();
        s = UavState::at_rest(s.position + right * lateral, g.heading + yaw);
    }
    Ok(s)
}

pub fn out_of_bounds(p: &Vector3<f64>) -> bool {
    p.x.abs() > STADIUM_HALF_X + BOUNDS_MARGIN || p.y.abs() > STADIUM_HALF_Y + BOUNDS_MARGIN
}

/// Seconds the oracle needs for `laps` laps on `track`.
pub fn oracle_episode_time(track: &TrackSpec, laps: usize, params: &UavParams) -> Result<f64, EvalError> {
    let mut pilot = OraclePilot::new(params.clone());
    let cfg = EpisodeConfig { laps, timeout: Some(900.0), params: params.clone(), ..Default::default() };
    let (report, _) = run_episode(track, &mut pilot, &cfg)?;
    if report.termination != Termination::Finished {
        return Err(EvalError::Invalid(format!(
            "oracle did not finish {} ({})",
            track.name, report.termination
        )));
    }
    Ok(report.duration)
}

pub fn run_episode(
    track: &TrackSpec,
    controller: &mut dyn Controller,
    cfg: &EpisodeConfig,
) -> Result<(EvalReport, TrajectoryTrace), EvalError> {
    let timeout = match cfg.timeout {
        Some(t) => t,
        None => TIMEOUT_FACTOR * oracle_episode_time(track, cfg.laps, &cfg.params)?,
    };
    let max_ticks = (timeout * TICK_RATE).round() as u64;
    controller.reset();
    let mut state = spawn_for_run(track, cfg.run)?;
    let start = state.tick;
    let mut timer = LapTimer::new(track, cfg.laps, start);
    let mut trace = TrajectoryTrace { start_tick: start, ..Default::default() };
    trace.push(&state);
    let needs_image = controller.needs_image();
    let termination = loop {
        if timer.finished() {
            break Termination::Finished;
        }
        if state.tick - start >= max_ticks {
            break Termination::Timeout;
        }
        let image = if needs_image {
            let pose = render::camera_pose(&state, &cfg.camera, ViewOffset::ZERO);
            Some(render::render_view(track, &pose, &cfg.camera))
        } else {
            None
        };
        let obs = Observation { image: image.as_ref(), state: &state, track };
        let sticks = controller.act(&obs);
        if !sticks.is_finite() {
            break Termination::ControllerFailure;
        }
        let next = dynamics::step(&state, sticks.clamped(), &cfg.params)?;
        timer.update(track, next.tick, &state.position, &next.position);
        state = next;
        trace.push(&state);
        if timer.finished() {
            break Termination::Finished;
        }
        if state.ground_contact {
            break Termination::Crash;
        }
        if out_of_bounds(&state.position) {
            break Termination::OutOfBounds;
        }
    };
    let gates_total = track.gates.len() * cfg.laps;
    let gates_passed = timer.gates_passed();
    let lap_times = timer.lap_times().to_vec();
    let best_lap = lap_times.iter().copied().reduce(f64::min);
    let report = EvalReport {
        track: track.name.clone(),
        controller: controller.id(),
        run: cfg.run,
        laps: cfg.laps,
        gates_passed,
        gates_total,
        accuracy: if gates_total == 0 { 1.0 } else { gates_passed as f64 / gates_total as f64 },
        gate_splits: timer.gate_splits().to_vec(),
        lap_times,
        best_lap,
        termination,
        duration: (state.tick - start) as f64 / TICK_RATE,
    };
    Ok((report, trace))
}

/// Events of a full episode as the lap timer reports them, for logging.
pub fn timer_events(track: &TrackSpec, trace: &TrajectoryTrace, laps: usize) -> Vec<RaceEvent> {
    let mut timer = LapTimer::new(track, laps, trace.start_tick);
    let mut out = Vec::new();
    for (k, w) in trace.positions.windows(2).enumerate() {
        out.extend(timer.update(track, trace.start_tick + k as u64 + 1, &w[0], &w[1]));
    }
    out
}

pub fn write_reports_csv<W: io::Write>(reports: &[EvalReport], w: W) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "track", "controller", "run", "laps", "gates_passed", "gates_total", "accuracy", "best_lap",
        "termination", "duration",
    ])?;
    for r in reports {
        out.write_record([
            r.track.clone(),
            r.controller.clone(),
            r.run.to_string(),
            r.laps.to_string(),
            r.gates_passed.to_string(),
            r.gates_total.to_string(),
            format!("{:.4}", r.accuracy),
            r.best_lap.map(|b| format!("{b:.3}")).unwrap_or_default(),
            r.termination.to_string(),
            format!("{:.3}", r.duration),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn mean_accuracy(reports: &[EvalReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64
}

const HEATMAP_PX_PER_M: f64 = 8.0;
const HEATMAP_MARGIN: f64 = 12.0;

/// Speed color: blue at `lo`, red at `hi`, linear in between.
pub fn speed_color(speed: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = if hi > lo { ((speed - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Overhead raster of the track with the trajectory colored by speed.
pub fn render_heatmap(trace: &TrajectoryTrace, track: &TrackSpec) -> Result<Image, EvalError> {
    if trace.is_empty() {
        return Err(EvalError::Invalid("empty trajectory".into()));
    }
    let half_x = STADIUM_HALF_X + HEATMAP_MARGIN;
    let half_y = STADIUM_HALF_Y + HEATMAP_MARGIN;
    let w = (2.0 * half_x * HEATMAP_PX_PER_M) as u32;
    let h = (2.0 * half_y * HEATMAP_PX_PER_M) as u32;
    let mut img = Image::filled(w, h, [255, 255, 255]);
    let to_px = |p: Vector2<f64>| ((p.x + half_x) * HEATMAP_PX_PER_M, (half_y - p.y) * HEATMAP_PX_PER_M);

    for sample in &track.centerline {
        let (x, y) = to_px(sample.point.xy());
        dot(&mut img, x, y, 0.5, [200, 200, 200]);
    }
    for cone in &track.cones {
        let (x, y) = to_px(cone.xy());
        dot(&mut img, x, y, 1.5, render::CONE);
    }
    let lo = trace.speeds.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = trace.speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for k in 0..trace.len() {
        let a = trace.positions[k];
        let b = trace.positions[(k + 1).min(trace.len() - 1)];
        let c = speed_color(trace.speeds[k], lo, hi);
        line(&mut img, to_px(a.xy()), to_px(b.xy()), 1.0, c);
    }
    for g in &track.gates {
        let r = g.right().xy() * (g.width / 2.0);
        let c = g.center.xy();
        line(&mut img, to_px(c - r), to_px(c + r), 1.5, [0, 0, 0]);
    }
    Ok(img)
}

pub fn export_heatmap(trace: &TrajectoryTrace, track: &TrackSpec, path: &Path) -> Result<(), EvalError> {
    let img = render_heatmap(trace, track)?;
    write_png(&img, path)
}

pub fn write_png(img: &Image, path: &Path) -> Result<(), EvalError> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(io::BufWriter::new(file), img.width, img.height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&img.pixels)?;
    writer.finish()?;
    Ok(())
}

fn dot(img: &mut Image, x: f64, y: f64, r: f64, c: [u8; 3]) {
    let (x0, x1) = ((x - r).floor() as i64, (x + r).ceil() as i64);
    let (y0, y1) = ((y - r).floor() as i64, (y + r).ceil() as i64);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 + 0.5 - x;
            let dy = py as f64 + 0.5 - y;
            if dx * dx + dy * dy <= r * r + 0.25 && px >= 0 && py >= 0 && (px as u32) < img.width && (py as u32) < img.height {
                img.put(px as u32, py as u32, c);
            }
        }
    }
}

fn line(img: &mut Image, a: (f64, f64), b: (f64, f64), r: f64, c: [u8; 3]) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        dot(img, a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, r, c);
    }
}

/// Median frames per second over five timing rounds of `iterations` calls.
pub fn benchmark<F: FnMut()>(iterations: usize, mut f: F) -> Result<f64, EvalError> {
    if iterations == 0 {
        return Err(EvalError::Invalid("iterations must be > 0".into()));
    }
    f();
    let mut rounds = Vec::with_capacity(5);
    for _ in 0..5 {
        let t0 = Instant::now();
        for _ in 0..iterations {
            f();
        }
        let secs = t0.elapsed().as_secs_f64().max(1e-12);
        rounds.push(iterations as f64 / secs);
    }
    rounds.sort_by(f64::total_cmp);
    Ok(rounds[2])
}
