//! Flight logs: per-tick telemetry and sticks, a binary file format,
//! bit-exact replay, and image/control dataset export.
//!
//! File layout (little-endian):
//!
//! ```text
//! "UAVL" | u16 version | u64 params hash | str track | str pilot
//! | initial state (u64 tick, 16 x f64) | u32 n | n x 72-byte frame
//! | u32 m | m x event | u32 CRC32 of everything before it
//! ```
//!
//! Strings are u16 length plus UTF-8. A frame is u32 tick followed by f32
//! position(3), velocity(3), quaternion w,x,y,z(4), body rates(3) and sticks
//! T,E,A,R(4). An event is u32 tick, u8 kind, u32 index, f64 split.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{corrective_controls, AugmentConfig};
use crate::dynamics::{self, DynamicsError, StickInput, UavParams, UavState, TICK_RATE};
use crate::evalharness::{out_of_bounds, Controller, Observation};
use crate::net::MemoryDataset;
use crate::render::{self, CameraModel, Image, ImageError, ViewOffset};
use crate::track::timing::{LapTimer, RaceEvent};
use crate::track::TrackSpec;

pub const LOG_MAGIC: &[u8; 4] = b"UAVL";
pub const LOG_VERSION: u16 = 1;
pub const FRAME_BYTES: usize = 72;
const EVENT_BYTES: usize = 17;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported log version {0}")]
    Version(u16),
    #[error("truncated log")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed log: {0}")]
    Malformed(String),
    #[error("params hash mismatch: log {log:016x}, given {given:016x}")]
    ParamsMismatch { log: u64, given: u64 },
    #[error("replay diverged at tick {0}")]
    Diverged(u64),
    #[error("log is empty")]
    Empty,
    #[error("invalid offsets: {0}")]
    Offsets(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogFrame {
    pub tick: u32,
    pub position: [f32; 3],
    pub velocity: [f32; 3],
    /// w, x, y, z.
    pub orientation: [f32; 4],
    pub angular_velocity: [f32; 3],
    pub sticks: StickInput,
}

impl LogFrame {
    /// Telemetry of `state` with the sticks applied on that tick.
    pub fn capture(state: &UavState, sticks: StickInput) -> Self {
        let v = |x: &Vector3<f64>| [x.x as f32, x.y as f32, x.z as f32];
        let q = state.orientation.quaternion();
        Self {
            tick: state.tick as u32,
            position: v(&state.position),
            velocity: v(&state.velocity),
            orientation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
            angular_velocity: v(&state.angular_velocity),
            sticks,
        }
    }

    /// Whether the telemetry part equals `state` after rounding to f32.
    pub fn matches(&self, state: &UavState) -> bool {
        let other = LogFrame::capture(state, self.sticks);
        let bits = |a: &[f32]| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        other.tick == self.tick
            && bits(&other.position) == bits(&self.position)
            && bits(&other.velocity) == bits(&self.velocity)
            && bits(&other.orientation) == bits(&self.orientation)
            && bits(&other.angular_velocity) == bits(&self.angular_velocity)
    }

    /// Approximate state for rendering (f32 precision).
    pub fn pose_state(&self) -> UavState {
        let v = |a: [f32; 3]| Vector3::new(a[0] as f64, a[1] as f64, a[2] as f64);
        let [w, x, y, z] = self.orientation.map(|c| c as f64);
        let mut s = UavState::at_rest(v(self.position), 0.0);
        s.velocity = v(self.velocity);
        s.orientation = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        s.angular_velocity = v(self.angular_velocity);
        s.tick = self.tick as u64;
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum EventKind {
    Gate = 0,
    Lap = 1,
    Finish = 2,
    Crash = 3,
}

impl EventKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => EventKind::Gate,
            1 => EventKind::Lap,
            2 => EventKind::Finish,
            3 => EventKind::Crash,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub tick: u32,
    pub kind: EventKind,
    pub index: u32,
    pub split: f64,
}

impl LogEvent {
    pub fn from_race(e: &RaceEvent) -> Self {
        match *e {
            RaceEvent::Gate { index, tick, split } => {
                LogEvent { tick: tick as u32, kind: EventKind::Gate, index: index as u32, split }
            }
            RaceEvent::Lap { lap, tick, lap_time } => {
                LogEvent { tick: tick as u32, kind: EventKind::Lap, index: lap as u32, split: lap_time }
            }
            RaceEvent::Finish { tick } => LogEvent { tick: tick as u32, kind: EventKind::Finish, index: 0, split: 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlightLog {
    pub track: String,
    pub pilot: String,
    pub params_hash: u64,
    /// Full-precision state at the first frame, the replay seed.
    pub initial: UavState,
    pub frames: Vec<LogFrame>,
    pub events: Vec<LogEvent>,
}

impl FlightLog {
    pub fn new(track: &str, pilot: &str, params: &UavParams, initial: UavState) -> Self {
        Self {
            track: track.to_string(),
            pilot: pilot.to_string(),
            params_hash: params.hash(),
            initial,
            frames: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames.len() as f64 / TICK_RATE
    }

    /// Appends the frame for `state`; ticks must be contiguous.
    pub fn push(&mut self, state: &UavState, sticks: StickInput) {
        if let Some(last) = self.frames.last() {
            debug_assert_eq!(last.tick as u64 + 1, state.tick);
        }
        self.frames.push(LogFrame::capture(state, sticks));
    }

    pub fn validate(&self) -> Result<(), LogError> {
        for w in self.frames.windows(2) {
            if w[1].tick != w[0].tick + 1 {
                return Err(LogError::Malformed(format!("tick gap after {}", w[0].tick)));
            }
        }
        if let Some(f) = self.frames.first() {
            if f.tick as u64 != self.initial.tick {
                return Err(LogError::Malformed("first frame does not match initial state".into()));
            }
            let last = self.frames.last().unwrap().tick;
            if self.events.iter().any(|e| e.tick < f.tick || e.tick > last) {
                return Err(LogError::Malformed("event outside frame range".into()));
            }
        } else if !self.events.is_empty() {
            return Err(LogError::Malformed("events without frames".into()));
        }
        Ok(())
    }

    pub fn gate_events(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Gate).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.frames.len() * FRAME_BYTES + self.events.len() * EVENT_BYTES);
        b.extend_from_slice(LOG_MAGIC);
        b.extend_from_slice(&LOG_VERSION.to_le_bytes());
        b.extend_from_slice(&self.params_hash.to_le_bytes());
        put_str(&mut b, &self.track);
        put_str(&mut b, &self.pilot);
        let s = &self.initial;
        b.extend_from_slice(&s.tick.to_le_bytes());
        let q = s.orientation.quaternion();
        let vals = [
            s.position.x, s.position.y, s.position.z,
            s.velocity.x, s.velocity.y, s.velocity.z,
            q.w, q.i, q.j, q.k,
            s.angular_velocity.x, s.angular_velocity.y, s.angular_velocity.z,
            s.rate_integral.x, s.rate_integral.y, s.rate_integral.z,
        ];
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for f in &self.frames {
            b.extend_from_slice(&f.tick.to_le_bytes());
            let floats = f.position.iter().chain(&f.velocity).chain(&f.orientation).chain(&f.angular_velocity)
                .copied()
                .chain(f.sticks.to_array());
            for v in floats {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.events.len() as u32).to_le_bytes());
        for e in &self.events {
            b.extend_from_slice(&e.tick.to_le_bytes());
            b.push(e.kind as u8);
            b.extend_from_slice(&e.index.to_le_bytes());
            b.extend_from_slice(&e.split.to_le_bytes());
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, LogError> {
        if data.len() < 4 {
            return Err(LogError::Truncated);
        }
        if &data[..4] != LOG_MAGIC {
            return Err(LogError::BadMagic);
        }
        if data.len() < 6 {
            return Err(LogError::Truncated);
        }
        let version = u16::from_le_bytes([data[4], data[5]]);
        if version != LOG_VERSION {
            return Err(LogError::Version(version));
        }
        if data.len() < 10 {
            return Err(LogError::Truncated);
        }
        let (body, tail) = data.split_at(data.len() - 4);
        let mut r = Reader { data: body, pos: 6 };
        let params_hash = r.u64()?;
        let track = r.string()?;
        let pilot = r.string()?;
        let tick = r.u64()?;
        let mut v = [0f64; 16];
        for x in v.iter_mut() {
            *x = r.f64()?;
        }
        let n = r.u32()? as usize;
        if n.checked_mul(FRAME_BYTES).is_none_or(|need| need > body.len() - r.pos) {
            return Err(LogError::Truncated);
        }
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let tick = r.u32()?;
            let mut f = [0f32; 17];
            for x in f.iter_mut() {
                *x = r.f32()?;
            }
            frames.push(LogFrame {
                tick,
                position: [f[0], f[1], f[2]],
                velocity: [f[3], f[4], f[5]],
                orientation: [f[6], f[7], f[8], f[9]],
                angular_velocity: [f[10], f[11], f[12]],
                sticks: StickInput::new(f[13], f[14], f[15], f[16]),
            });
        }
        let m = r.u32()? as usize;
        if m.checked_mul(EVENT_BYTES).is_none_or(|need| need > body.len() - r.pos) {
            return Err(LogError::Truncated);
        }
        let mut events = Vec::with_capacity(m);
        for _ in 0..m {
            let tick = r.u32()?;
            let kind = EventKind::from_u8(r.u8()?).ok_or_else(|| LogError::Malformed("unknown event kind".into()))?;
            let index = r.u32()?;
            let split = r.f64()?;
            events.push(LogEvent { tick, kind, index, split });
        }
        if r.pos != body.len() {
            // Length fields disagree with the payload: either corruption or
            // a cut file; the checksum decides which error to report.
            if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
                return Err(LogError::Checksum);
            }
            return Err(LogError::Malformed("trailing bytes".into()));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(LogError::Checksum);
        }
        let initial = UavState {
            position: Vector3::new(v[0], v[1], v[2]),
            velocity: Vector3::new(v[3], v[4], v[5]),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(v[6], v[7], v[8], v[9])),
            angular_velocity: Vector3::new(v[10], v[11], v[12]),
            rate_integral: Vector3::new(v[13], v[14], v[15]),
            tick,
            ground_contact: false,
        };
        let log = FlightLog { track, pilot, params_hash, initial, frames, events };
        log.validate()?;
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<(), LogError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LogError> {
        let mut data = Vec::new();
        fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    let bytes = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    b.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    b.extend_from_slice(bytes);
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LogError> {
        if self.data.len() - self.pos < n {
            return Err(LogError::Truncated);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, LogError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, LogError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, LogError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, LogError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, LogError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, LogError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LogError::Malformed("invalid utf-8".into()))
    }
}

/// Flies `controller` from `initial` and records every tick until the laps
/// are done, the vehicle crashes or leaves bounds, or `max_ticks` elapse.
pub fn record(
    track: &TrackSpec,
    controller: &mut dyn Controller,
    params: &UavParams,
    cam: &CameraModel,
    initial: UavState,
    laps: usize,
    max_ticks: u64,
) -> Result<FlightLog, LogError> {
    let mut log = FlightLog::new(&track.name, &controller.id(), params, initial);
    let mut timer = LapTimer::new(track, laps, initial.tick);
    let mut state = initial;
    controller.reset();
    let needs_image = controller.needs_image();
    while !timer.finished() && state.tick - initial.tick < max_ticks {
        let image = needs_image.then(|| {
            let pose = render::camera_pose(&state, cam, ViewOffset::ZERO);
            render::render_view(track, &pose, cam)
        });
        let sticks = controller.act(&Observation { image: image.as_ref(), state: &state, track }).clamped();
        let next = dynamics::step(&state, sticks, params)?;
        log.push(&state, sticks);
        for e in timer.update(track, state.tick, &state.position, &next.position) {
            log.events.push(LogEvent::from_race(&e));
        }
        state = next;
        if state.ground_contact || out_of_bounds(&state.position) {
            log.events.push(LogEvent { tick: state.tick as u32 - 1, kind: EventKind::Crash, index: 0, split: 0.0 });
            break;
        }
    }
    Ok(log)
}

/// Re-simulates the log from its initial state and logged sticks. Returns
/// one state per frame; fails if any state differs from its frame.
pub fn replay(log: &FlightLog, params: &UavParams) -> Result<Vec<UavState>, LogError> {
    replay_ticks(log, params, log.frames.len())
}

pub fn replay_ticks(log: &FlightLog, params: &UavParams, n: usize) -> Result<Vec<UavState>, LogError> {
    let given = params.hash();
    if given != log.params_hash {
        return Err(LogError::ParamsMismatch { log: log.params_hash, given });
    }
    let mut out = Vec::with_capacity(n.min(log.frames.len()));
    let mut s = log.initial;
    for f in log.frames.iter().take(n) {
        if !f.matches(&s) {
            return Err(LogError::Diverged(f.tick as u64));
        }
        out.push(s);
        s = dynamics::step(&s, f.sticks, params)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: String,
    pub sticks: [f32; 4],
    pub tick: u32,
    /// 0 for the pilot view, k for the k-th configured offset.
    pub offset_index: usize,
    pub offset: ViewOffset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLog {
    pub track: String,
    pub pilot: String,
    pub params_hash: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub width: u32,
    pub height: u32,
    pub sources: Vec<SourceLog>,
    pub augment_hash: String,
    pub augment: AugmentConfig,
    /// Every `frame_stride`-th frame is used.
    pub frame_stride: usize,
    pub original: usize,
    pub total: usize,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), LogError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| LogError::Manifest(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LogError> {
        let text = fs::read_to_string(path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| LogError::Manifest(e.to_string()))?;
        if m.samples.len() != m.total {
            return Err(LogError::Manifest("sample count does not match total".into()));
        }
        Ok(m)
    }

    /// Merges manifests of several logs; image paths are prefixed with each
    /// manifest's directory relative to `root`.
    pub fn merge(parts: &[(PathBuf, DatasetManifest)]) -> Result<Self, LogError> {
        let first = &parts.first().ok_or_else(|| LogError::Manifest("nothing to merge".into()))?.1;
        let mut out = DatasetManifest { sources: Vec::new(), original: 0, total: 0, samples: Vec::new(), ..first.clone() };
        for (dir, m) in parts {
            if (m.width, m.height) != (first.width, first.height) || m.augment_hash != first.augment_hash {
                return Err(LogError::Manifest("manifests disagree on resolution or augmentation".into()));
            }
            out.sources.extend(m.sources.iter().cloned());
            out.original += m.original;
            out.total += m.total;
            for s in &m.samples {
                out.samples.push(SampleEntry { image: dir.join(&s.image).to_string_lossy().into_owned(), ..s.clone() });
            }
        }
        Ok(out)
    }
}

/// Rendered pilot and offset views of every `stride`-th frame, paired with
/// their (corrected) sticks. Sample order: by frame, then offset index.
pub fn render_samples(
    log: &FlightLog,
    track: &TrackSpec,
    params: &UavParams,
    cam: &CameraModel,
    augment: &AugmentConfig,
    stride: usize,
) -> Result<Vec<(SampleEntry, Image)>, LogError> {
    if !augment.offsets().is_empty() {
        augment.validate().map_err(LogError::Offsets)?;
    }
    let states = replay(log, params)?;
    let offsets = augment.offsets();
    let stride = stride.max(1);
    let picked: Vec<usize> = (0..states.len()).step_by(stride).collect();
    let per_frame: Vec<Vec<(SampleEntry, Image)>> = picked
        .par_iter()
        .map(|&i| {
            let s = &states[i];
            let sticks = log.frames[i].sticks;
            let tick = log.frames[i].tick;
            std::iter::once(ViewOffset::ZERO)
                .chain(offsets.iter().copied())
                .enumerate()
                .map(|(k, off)| {
                    let pose = render::camera_pose(s, cam, off);
                    let img = render::render_view(track, &pose, cam);
                    let target = if k == 0 { sticks } else { corrective_controls(sticks, off, augment) };
                    let entry = SampleEntry {
                        image: format!("t{tick}_o{k}.ppm"),
                        sticks: target.to_array(),
                        tick,
                        offset_index: k,
                        offset: off,
                    };
                    (entry, img)
                })
                .collect()
        })
        .collect();
    Ok(per_frame.into_iter().flatten().collect())
}

fn manifest_for(log: &FlightLog, cam: &CameraModel, augment: &AugmentConfig, stride: usize, samples: Vec<SampleEntry>) -> DatasetManifest {
    let original = samples.iter().filter(|s| s.offset_index == 0).count();
    DatasetManifest {
        version: MANIFEST_VERSION,
        width: cam.width,
        height: cam.height,
        sources: vec![SourceLog {
            track: log.track.clone(),
            pilot: log.pilot.clone(),
            params_hash: format!("{:016x}", log.params_hash),
            frames: log.frames.len(),
        }],
        augment_hash: format!("{:016x}", augment.hash()),
        augment: augment.clone(),
        frame_stride: stride.max(1),
        original,
        total: samples.len(),
        samples,
    }
}

/// Renders the dataset of one log into `dir` as PPM files plus a manifest.
pub fn export_dataset(
    log: &FlightLog,
    track: &TrackSpec,
    params: &UavParams,
    cam: &CameraModel,
    augment: &AugmentConfig,
    stride: usize,
    dir: &Path,
) -> Result<DatasetManifest, LogError> {
    let rendered = render_samples(log, track, params, cam, augment, stride)?;
    fs::create_dir_all(dir)?;
    rendered.par_iter().try_for_each(|(entry, img)| -> Result<(), LogError> {
        let f = fs::File::create(dir.join(&entry.image))?;
        img.write_ppm(io::BufWriter::new(f))?;
        Ok(())
    })?;
    let manifest = manifest_for(log, cam, augment, stride, rendered.into_iter().map(|(e, _)| e).collect());
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// In-memory counterpart of `export_dataset`.
pub fn build_dataset(
    logs: &[(&FlightLog, &TrackSpec)],
    params: &UavParams,
    cam: &CameraModel,
    augment: &AugmentConfig,
    stride: usize,
) -> Result<MemoryDataset, LogError> {
    let mut data = MemoryDataset::new(cam.width as usize, cam.height as usize);
    for (log, track) in logs {
        for (entry, img) in render_samples(log, track, params, cam, augment, stride)? {
            data.push(&img, entry.sticks);
        }
    }
    Ok(data)
}

/// Loads every sample of a manifest; relative image paths resolve against
/// `root`.
pub fn load_dataset(manifest: &DatasetManifest, root: &Path) -> Result<MemoryDataset, LogError> {
    let mut data = MemoryDataset::new(manifest.width as usize, manifest.height as usize);
    for s in &manifest.samples {
        let img = Image::read_ppm(fs::File::open(root.join(&s.image))?)?;
        if (img.width, img.height) != (manifest.width, manifest.height) {
            return Err(LogError::Manifest(format!("{} has the wrong resolution", s.image)));
        }
        data.push(&img, s.sticks);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::OraclePilot;
    use crate::track::{build_track, parse_sketch, TrackParams};

    fn square() -> TrackSpec {
        let s = parse_sketch("name: sq\n20 -20\n20 20\n-20 20\n-20 -20\n").unwrap();
        build_track(&s, &TrackParams::default()).unwrap()
    }

    fn demo(laps: usize) -> (TrackSpec, FlightLog) {
        let t = square();
        let params = UavParams::default();
        let mut pilot = OraclePilot::new(params.clone());
        let init = dynamics::spawn(&t).unwrap();
        let log = record(&t, &mut pilot, &params, &CameraModel::default(), init, laps, 60 * 300).unwrap();
        (t, log)
    }

    #[test]
    fn two_laps_event_counts() {
        let (t, log) = demo(2);
        assert_eq!(log.gate_events(), 2 * t.gates.len());
        assert_eq!(log.events.iter().filter(|e| e.kind == EventKind::Lap).count(), 2);
        assert!(log.validate().is_ok());
        assert_eq!(log.duration_seconds(), log.frames.len() as f64 / 60.0);
    }

    #[test]
    fn round_trip_and_corruption() {
        let (_, log) = demo(1);
        let bytes = log.to_bytes();
        let back = FlightLog::from_bytes(&bytes).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 0xff;
        assert!(matches!(FlightLog::from_bytes(&bad), Err(LogError::Checksum)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FlightLog::from_bytes(&bad), Err(LogError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(FlightLog::from_bytes(&bad), Err(LogError::Version(9))));
        assert!(FlightLog::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn empty_log_round_trip() {
        let t = square();
        let log = FlightLog::new("sq", "nobody", &UavParams::default(), dynamics::spawn(&t).unwrap());
        assert_eq!(FlightLog::from_bytes(&log.to_bytes()).unwrap(), log);
        assert!(replay(&log, &UavParams::default()).unwrap().is_empty());
    }

    #[test]
    fn replay_is_exact_and_checks_params() {
        let (_, log) = demo(1);
        let states = replay(&log, &UavParams::default()).unwrap();
        assert_eq!(states.len(), log.frames.len());
        let first = replay_ticks(&log, &UavParams::default(), 100).unwrap();
        assert_eq!(&states[..100], &first[..]);
        let other = UavParams { mass: 0.8, ..UavParams::default() };
        assert!(matches!(replay(&log, &other), Err(LogError::ParamsMismatch { .. })));
        let mut tampered = log.clone();
        tampered.frames[50].sticks.aileron += 0.1;
        assert!(matches!(replay(&tampered, &UavParams::default()), Err(LogError::Diverged(51))));
    }

    #[test]
    fn export_counts_and_layout() {
        let (t, mut log) = demo(1);
        log.frames.truncate(30);
        log.events.clear();
        let params = UavParams::default();
        let cam = CameraModel::default();
        let dir = tempfile::tempdir().unwrap();
        let aug = AugmentConfig::default_grid();
        let m = export_dataset(&log, &t, &params, &cam, &aug, 1, dir.path()).unwrap();
        assert_eq!(m.original, 30);
        assert_eq!(m.total, 30 * 7);
        assert!(dir.path().join("t0_o0.ppm").exists());
        assert!(dir.path().join("t29_o6.ppm").exists());
        let loaded = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        let data = load_dataset(&loaded, dir.path()).unwrap();
        assert_eq!(data.len(), 210);
        let mem = build_dataset(&[(&log, &t)], &params, &cam, &aug, 1).unwrap();
        assert_eq!(mem.pixels, data.pixels);
        let none = export_dataset(&log, &t, &params, &cam, &AugmentConfig::empty(), 1, &dir.path().join("plain")).unwrap();
        assert_eq!(none.total, none.original);
    }
}
