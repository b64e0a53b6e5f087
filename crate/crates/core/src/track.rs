//! Race tracks: overhead sketches compiled into gates, cones and a
//! closed Catmull-Rom centerline, plus the gate-crossing test used by the
//! timing system.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod timing;

/// Half extents of the stadium footprint (110 m x 70 m), meters.
pub const STADIUM_HALF_X: f64 = 55.0;
pub const STADIUM_HALF_Y: f64 = 35.0;

/// Maximum arc-length step between consecutive centerline samples.
const CENTERLINE_STEP: f64 = 0.25;
/// Chord subdivisions per spline segment for the arc-length table.
const ARC_TABLE_STEPS: usize = 512;

pub const TRACK_FORMAT: &str = "uavrace-track";
pub const TRACK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SketchError {
    #[error("line {line}: malformed input: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: non-finite coordinate")]
    NonFinite { line: usize },
    #[error("line {line}: point ({x}, {y}) outside stadium bounds")]
    OutOfBounds { line: usize, x: f64, y: f64 },
    #[error("line {line}: point closer than 1 m to its predecessor")]
    TooClose { line: usize },
    #[error("insufficient control points: {0} (need at least 3)")]
    InsufficientPoints(usize),
    #[error("missing `name:` line")]
    MissingName,
}

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("invalid track parameter: {0}")]
    InvalidParams(&'static str),
    #[error("degenerate spline tangent at control point {0}")]
    DegenerateTangent(usize),
    #[error("self-intersecting spline near s = {s_a:.2} m and s = {s_b:.2} m")]
    SelfIntersecting { s_a: f64, s_b: f64 },
}

/// Overhead 2D drawing of a closed race loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSketch {
    pub name: String,
    pub control_points: Vec<Vector2<f64>>,
    pub closed: bool,
}

impl TrackSketch {
    /// Validates an in-memory sketch against the same rules the parser
    /// applies. Line numbers in errors are 1-based point indices.
    pub fn new(name: impl Into<String>, points: Vec<Vector2<f64>>) -> Result<Self, SketchError> {
        for (i, p) in points.iter().enumerate() {
            check_point(i + 1, *p, if i > 0 { Some(points[i - 1]) } else { None })?;
        }
        if points.len() < 3 {
            return Err(SketchError::InsufficientPoints(points.len()));
        }
        Ok(Self { name: name.into(), control_points: points, closed: true })
    }
}

fn check_point(line: usize, p: Vector2<f64>, prev: Option<Vector2<f64>>) -> Result<(), SketchError> {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(SketchError::NonFinite { line });
    }
    if p.x.abs() > STADIUM_HALF_X || p.y.abs() > STADIUM_HALF_Y {
        return Err(SketchError::OutOfBounds { line, x: p.x, y: p.y });
    }
    if let Some(q) = prev {
        if (p - q).norm() < 1.0 {
            return Err(SketchError::TooClose { line });
        }
    }
    Ok(())
}

/// Parses the sketch text format: a `name:` line followed by one `x y`
/// pair per line. `#` starts a comment.
pub fn parse_sketch(text: &str) -> Result<TrackSketch, SketchError> {
    let mut name = None;
    let mut points: Vec<Vector2<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("name:") {
            if name.is_some() {
                return Err(SketchError::Syntax { line: line_no, msg: "duplicate name".into() });
            }
            let n = rest.trim();
            if n.is_empty() {
                return Err(SketchError::Syntax { line: line_no, msg: "empty name".into() });
            }
            name = Some(n.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(SketchError::Syntax {
                line: line_no,
                msg: format!("expected `x y`, got {} fields", fields.len()),
            });
        }
        let mut xy = [0.0; 2];
        for (slot, f) in xy.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|_| SketchError::Syntax {
                line: line_no,
                msg: format!("not a number: {f:?}"),
            })?;
        }
        let p = Vector2::new(xy[0], xy[1]);
        check_point(line_no, p, points.last().copied())?;
        points.push(p);
    }
    let name = name.ok_or(SketchError::MissingName)?;
    if points.len() < 3 {
        return Err(SketchError::InsufficientPoints(points.len()));
    }
    Ok(TrackSketch { name, control_points: points, closed: true })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackParams {
    pub lane_half_width: f64,
    pub cone_spacing: f64,
    pub gate_width: f64,
    pub gate_height: f64,
    /// Height of the gate opening center above ground.
    pub gate_center_height: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            lane_half_width: 2.5,
            cone_spacing: 4.0,
            gate_width: 2.5,
            gate_height: 2.5,
            gate_center_height: 1.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub center: Vector3<f64>,
    /// Yaw of the gate normal (race direction), in (-pi, pi].
    pub heading: f64,
    pub width: f64,
    pub height: f64,
    pub index: usize,
    /// Arc-length position of the gate along the centerline.
    pub station: f64,
}

impl Gate {
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.heading.cos(), self.heading.sin(), 0.0)
    }

    /// Horizontal unit vector pointing to the gate's right when looking
    /// along the race direction.
    pub fn right(&self) -> Vector3<f64> {
        Vector3::new(self.heading.sin(), -self.heading.cos(), 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterlineSample {
    pub point: Vector3<f64>,
    /// Unit horizontal tangent in the race direction.
    pub tangent: Vector3<f64>,
    pub station: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds2 {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
}

impl Bounds2 {
    pub fn contains(&self, p: Vector2<f64>, margin: f64) -> bool {
        p.x >= self.min.x - margin
            && p.x <= self.max.x + margin
            && p.y >= self.min.y - margin
            && p.y <= self.max.y + margin
    }

    pub fn stadium() -> Self {
        Self {
            min: Vector2::new(-STADIUM_HALF_X, -STADIUM_HALF_Y),
            max: Vector2::new(STADIUM_HALF_X, STADIUM_HALF_Y),
        }
    }
}

/// A compiled track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub name: String,
    pub params: TrackParams,
    pub gates: Vec<Gate>,
    /// Ground-level lane markers, stored as `[left0, right0, left1, right1, ...]`.
    pub cones: Vec<Vector3<f64>>,
    pub centerline: Vec<CenterlineSample>,
    pub total_length: f64,
    pub bounds: Bounds2,
    pub control_points: Vec<Vector2<f64>>,
}

/// Where a point sits relative to the centerline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackLocation {
    pub index: usize,
    pub station: f64,
    /// Signed horizontal offset, positive to the left of the race direction.
    pub lateral: f64,
    pub distance: f64,
}

impl TrackSpec {
    pub fn cone_pairs(&self) -> usize {
        self.cones.len() / 2
    }

    pub fn sample_step(&self) -> f64 {
        self.total_length / self.centerline.len() as f64
    }

    /// Interpolated centerline sample at an arbitrary (wrapped) station.
    pub fn sample_at(&self, station: f64) -> CenterlineSample {
        let s = station.rem_euclid(self.total_length);
        let step = self.sample_step();
        let n = self.centerline.len();
        let i = ((s / step).floor() as usize).min(n - 1);
        let a = &self.centerline[i];
        let b = &self.centerline[(i + 1) % n];
        let f = ((s - a.station) / step).clamp(0.0, 1.0);
        let tangent = (a.tangent * (1.0 - f) + b.tangent * f).normalize();
        CenterlineSample { point: a.point + (b.point - a.point) * f, tangent, station: s }
    }

    /// Nearest centerline sample by horizontal distance, searched over the
    /// whole loop.
    pub fn locate(&self, p: &Vector3<f64>) -> TrackLocation {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centerline.iter().enumerate() {
            let d = (c.point.x - p.x).powi(2) + (c.point.y - p.y).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        self.location_from(best, p)
    }

    /// Nearest sample within `window` samples of `hint` (wrapping).
    pub fn locate_near(&self, p: &Vector3<f64>, hint: usize, window: usize) -> TrackLocation {
        let n = self.centerline.len();
        let mut best = hint % n;
        let mut best_d = f64::INFINITY;
        let w = window.min(n / 2) as isize;
        for k in -w..=w {
            let i = (hint as isize + k).rem_euclid(n as isize) as usize;
            let c = &self.centerline[i].point;
            let d = (c.x - p.x).powi(2) + (c.y - p.y).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        self.location_from(best, p)
    }

    fn location_from(&self, i: usize, p: &Vector3<f64>) -> TrackLocation {
        let c = &self.centerline[i];
        let left = Vector3::new(-c.tangent.y, c.tangent.x, 0.0);
        let d = Vector3::new(p.x - c.point.x, p.y - c.point.y, 0.0);
        let along = d.dot(&c.tangent);
        TrackLocation {
            index: i,
            station: (c.station + along).rem_euclid(self.total_length),
            lateral: d.dot(&left),
            distance: d.norm(),
        }
    }

    /// Signed curvature (1/m, positive for left turns) averaged over the
    /// centerline between `station` and `station + span`.
    pub fn curvature(&self, station: f64, span: f64) -> f64 {
        let a = self.sample_at(station).tangent;
        let b = self.sample_at(station + span).tangent;
        let cross = a.x * b.y - a.y * b.x;
        let dot = a.x * b.x + a.y * b.y;
        cross.atan2(dot) / span
    }

    /// Distance from `p` to the centerline polyline (3D).
    pub fn distance_to_centerline(&self, p: &Vector3<f64>) -> f64 {
        let n = self.centerline.len();
        (0..n)
            .map(|i| {
                let a = self.centerline[i].point;
                let b = self.centerline[(i + 1) % n].point;
                point_segment_distance(p, &a, &b)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Hash over the serialized form, stable across runs.
    pub fn content_hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("track serializes");
        hash64(&bytes)
    }

    pub fn to_document(&self) -> String {
        let doc = TrackDocument {
            format: TRACK_FORMAT.to_string(),
            version: TRACK_FORMAT_VERSION,
            content_hash: format!("{:016x}", self.content_hash()),
            track: self.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("track serializes")
    }

    pub fn from_document(text: &str) -> Result<Self, TrackFileError> {
        let doc: TrackDocument = serde_json::from_str(text)?;
        if doc.format != TRACK_FORMAT {
            return Err(TrackFileError::Format(doc.format));
        }
        if doc.version != TRACK_FORMAT_VERSION {
            return Err(TrackFileError::Version(doc.version));
        }
        Ok(doc.track)
    }
}

#[derive(Debug, Error)]
pub enum TrackFileError {
    #[error("track document parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a track document (format {0:?})")]
    Format(String),
    #[error("unsupported track document version {0}")]
    Version(u32),
}

#[derive(Serialize, Deserialize)]
struct TrackDocument {
    format: String,
    version: u32,
    content_hash: String,
    track: TrackSpec,
}

pub(crate) fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

pub fn normalize_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// Closed uniform Catmull-Rom spline through a ring of control points.
#[derive(Clone, Debug)]
pub struct ClosedCatmullRom {
    points: Vec<Vector2<f64>>,
}

impl ClosedCatmullRom {
    pub fn new(points: Vec<Vector2<f64>>) -> Self {
        assert!(points.len() >= 3);
        Self { points }
    }

    pub fn segments(&self) -> usize {
        self.points.len()
    }

    fn ring(&self, seg: usize) -> [Vector2<f64>; 4] {
        let n = self.points.len();
        [
            self.points[(seg + n - 1) % n],
            self.points[seg % n],
            self.points[(seg + 1) % n],
            self.points[(seg + 2) % n],
        ]
    }

    pub fn position(&self, seg: usize, t: f64) -> Vector2<f64> {
        let [p0, p1, p2, p3] = self.ring(seg);
        let t2 = t * t;
        let t3 = t2 * t;
        (p1 * 2.0
            + (p2 - p0) * t
            + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * t2
            + (-p0 + p1 * 3.0 - p2 * 3.0 + p3) * t3)
            * 0.5
    }

    pub fn derivative(&self, seg: usize, t: f64) -> Vector2<f64> {
        let [p0, p1, p2, p3] = self.ring(seg);
        let t2 = t * t;
        ((p2 - p0) + (p0 * 2.0 - p1 * 5.0 + p2 * 4.0 - p3) * (2.0 * t)
            + (-p0 + p1 * 3.0 - p2 * 3.0 + p3) * (3.0 * t2))
            * 0.5
    }
}

/// Cumulative chord-length table used to invert arc length.
struct ArcTable {
    /// cumulative[k] is the arc length at global parameter k / ARC_TABLE_STEPS.
    cumulative: Vec<f64>,
}

impl ArcTable {
    fn new(spline: &ClosedCatmullRom) -> Self {
        let mut cumulative = Vec::with_capacity(spline.segments() * ARC_TABLE_STEPS + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for seg in 0..spline.segments() {
            let mut prev = spline.position(seg, 0.0);
            for k in 1..=ARC_TABLE_STEPS {
                let p = spline.position(seg, k as f64 / ARC_TABLE_STEPS as f64);
                acc += (p - prev).norm();
                cumulative.push(acc);
                prev = p;
            }
        }
        Self { cumulative }
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    fn segment_start(&self, seg: usize) -> f64 {
        self.cumulative[seg * ARC_TABLE_STEPS]
    }

    /// Maps arc length to (segment, local t).
    fn invert(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.total());
        let k = match self.cumulative.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(k) => k,
            Err(k) => k.saturating_sub(1),
        };
        let k = k.min(self.cumulative.len() - 2);
        let (a, b) = (self.cumulative[k], self.cumulative[k + 1]);
        let frac = if b > a { (s - a) / (b - a) } else { 0.0 };
        let global = (k as f64 + frac) / ARC_TABLE_STEPS as f64;
        let seg = (global.floor() as usize).min(self.cumulative.len() / ARC_TABLE_STEPS - 1);
        (seg, global - seg as f64)
    }
}

/// Compiles a sketch into a full track.
pub fn build_track(sketch: &TrackSketch, params: &TrackParams) -> Result<TrackSpec, BuildError> {
    if !(params.cone_spacing > 0.0) {
        return Err(BuildError::InvalidParams("cone_spacing must be > 0"));
    }
    if !(params.lane_half_width > 0.0) {
        return Err(BuildError::InvalidParams("lane_half_width must be > 0"));
    }
    if !(params.gate_width > 0.0 && params.gate_height > 0.0) {
        return Err(BuildError::InvalidParams("gate dimensions must be > 0"));
    }
    if sketch.control_points.len() < 3 {
        return Err(BuildError::InvalidParams("sketch needs at least 3 control points"));
    }
    let spline = ClosedCatmullRom::new(sketch.control_points.clone());
    for seg in 0..spline.segments() {
        if spline.derivative(seg, 0.0).norm() < 1e-6 {
            return Err(BuildError::DegenerateTangent(seg));
        }
    }
    let table = ArcTable::new(&spline);
    let total = table.total();
    let z = params.gate_center_height;

    let eval = |s: f64| -> (Vector2<f64>, Vector2<f64>) {
        let (seg, t) = table.invert(s);
        let p = spline.position(seg, t);
        let d = spline.derivative(seg, t);
        let d = if d.norm() > 1e-12 { d.normalize() } else { Vector2::new(1.0, 0.0) };
        (p, d)
    };

    let count = (total / CENTERLINE_STEP).ceil().max(3.0) as usize;
    let step = total / count as f64;
    let centerline: Vec<CenterlineSample> = (0..count)
        .map(|i| {
            let s = i as f64 * step;
            let (p, d) = eval(s);
            CenterlineSample {
                point: Vector3::new(p.x, p.y, z),
                tangent: Vector3::new(d.x, d.y, 0.0),
                station: s,
            }
        })
        .collect();

    if let Some((a, b)) = find_self_intersection(&centerline) {
        return Err(BuildError::SelfIntersecting { s_a: a, s_b: b });
    }

    let gates = sketch
        .control_points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = spline.derivative(i, 0.0);
            Gate {
                center: Vector3::new(p.x, p.y, z),
                heading: normalize_angle(d.y.atan2(d.x)),
                width: params.gate_width,
                height: params.gate_height,
                index: i,
                station: table.segment_start(i),
            }
        })
        .collect();

    let pairs = ((total / params.cone_spacing).round() as usize).max(1);
    let cone_step = total / pairs as f64;
    let mut cones = Vec::with_capacity(pairs * 2);
    for j in 0..pairs {
        let (p, d) = eval(j as f64 * cone_step);
        let left = Vector2::new(-d.y, d.x) * params.lane_half_width;
        cones.push(Vector3::new(p.x + left.x, p.y + left.y, 0.0));
        cones.push(Vector3::new(p.x - left.x, p.y - left.y, 0.0));
    }

    let mut min = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in centerline.iter().map(|c| c.point).chain(cones.iter().copied()) {
        min.x = min.x.min(p.x);
        min.y = min.y.min(p.y);
        max.x = max.x.max(p.x);
        max.y = max.y.max(p.y);
    }

    Ok(TrackSpec {
        name: sketch.name.clone(),
        params: *params,
        gates,
        cones,
        centerline,
        total_length: total,
        bounds: Bounds2 { min, max },
        control_points: sketch.control_points.clone(),
    })
}

fn find_self_intersection(samples: &[CenterlineSample]) -> Option<(f64, f64)> {
    let n = samples.len();
    let seg = |i: usize| {
        let a = samples[i].point.xy();
        let b = samples[(i + 1) % n].point.xy();
        (a, b)
    };
    let boxes: Vec<(Vector2<f64>, Vector2<f64>)> = (0..n)
        .map(|i| {
            let (a, b) = seg(i);
            (Vector2::new(a.x.min(b.x), a.y.min(b.y)), Vector2::new(a.x.max(b.x), a.y.max(b.y)))
        })
        .collect();
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (lo_a, hi_a) = boxes[i];
            let (lo_b, hi_b) = boxes[j];
            if hi_a.x < lo_b.x || hi_b.x < lo_a.x || hi_a.y < lo_b.y || hi_b.y < lo_a.y {
                continue;
            }
            let (a0, a1) = seg(i);
            let (b0, b1) = seg(j);
            if segments_intersect(a0, a1, b0, b1) {
                return Some((samples[i].station, samples[j].station));
            }
        }
    }
    None
}

fn orient(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub(crate) fn segments_intersect(
    a0: Vector2<f64>,
    a1: Vector2<f64>,
    b0: Vector2<f64>,
    b1: Vector2<f64>,
) -> bool {
    let d1 = orient(b0, b1, a0);
    let d2 = orient(b0, b1, a1);
    let d3 = orient(a0, a1, b0);
    let d4 = orient(a0, a1, b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b0, b1, a0))
        || (d2 == 0.0 && on_segment(b0, b1, a1))
        || (d3 == 0.0 && on_segment(a0, a1, b0))
        || (d4 == 0.0 && on_segment(a0, a1, b1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Crossing {
    None,
    Passed,
    WrongDirection,
}

impl fmt::Display for Crossing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Crossing::None => "none",
            Crossing::Passed => "passed",
            Crossing::WrongDirection => "wrong_direction",
        };
        f.write_str(s)
    }
}

/// Classifies the motion `prev -> cur` against a gate's opening.
pub fn gate_crossing(gate: &Gate, prev: &Vector3<f64>, cur: &Vector3<f64>) -> Crossing {
    let n = gate.normal();
    let d0 = (prev - gate.center).dot(&n);
    let d1 = (cur - gate.center).dot(&n);
    let forward = d0 < 0.0 && d1 >= 0.0;
    let backward = d0 >= 0.0 && d1 < 0.0;
    if !forward && !backward {
        return Crossing::None;
    }
    let t = d0 / (d0 - d1);
    let hit = prev + (cur - prev) * t;
    let rel = hit - gate.center;
    let lateral = rel.dot(&gate.right());
    let vertical = rel.z;
    if lateral.abs() > gate.width / 2.0 || vertical.abs() > gate.height / 2.0 {
        return Crossing::None;
    }
    if forward {
        Crossing::Passed
    } else {
        Crossing::WrongDirection
    }
}
