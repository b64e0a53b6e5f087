//! Flat-shaded software rasterizer for the first-person camera.
//!
//! Scene layers are drawn back to front: sky and ground per pixel, then the
//! lane surface, then cones and gate frames sorted by distance. Rendering
//! happens at `supersample` times the output resolution and is box-filtered
//! down, which keeps thin features visible at low resolutions.

use std::io::{self, Read, Write};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::UavState;
use crate::track::TrackSpec;

pub const CULL_DISTANCE: f64 = 120.0;
const NEAR_PLANE: f64 = 0.05;

pub const SKY_HORIZON: [u8; 3] = [200, 222, 240];
pub const SKY_ZENITH: [u8; 3] = [80, 130, 205];
pub const GROUND: [u8; 3] = [72, 118, 58];
pub const LANE: [u8; 3] = [156, 144, 122];
pub const STRIPE: [u8; 3] = [235, 235, 230];
pub const CONE: [u8; 3] = [255, 122, 0];
pub const GATE: [u8; 3] = [215, 25, 30];

const CONE_HALF_WIDTH: f64 = 0.2;
const CONE_HEIGHT: f64 = 0.5;
const GATE_BAR: f64 = 0.2;
const STRIPE_HALF_WIDTH: f64 = 0.15;
const LANE_STEP: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PPM: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Horizontal field of view, radians.
    pub fov: f64,
    pub width: u32,
    pub height: u32,
    /// Upward tilt of the optical axis relative to the body, radians.
    pub pitch_tilt: f64,
    /// Camera position in the body frame, meters.
    pub mount_offset: Vector3<f64>,
    pub supersample: u32,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fov: 90f64.to_radians(),
            width: 64,
            height: 36,
            pitch_tilt: 20f64.to_radians(),
            mount_offset: Vector3::new(0.1, 0.0, 0.0),
            supersample: 2,
        }
    }
}

impl CameraModel {
    pub fn with_resolution(width: u32, height: u32) -> Self {
        Self { width, height, ..Self::default() }
    }

    /// Focal length in output pixels.
    pub fn focal_px(&self) -> f64 {
        self.width as f64 / 2.0 / (self.fov / 2.0).tan()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err("fov must be in (0, pi)".into());
        }
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err("resolution and supersample must be positive".into());
        }
        Ok(())
    }
}

/// Displacement of a synthetic camera from the pilot view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewOffset {
    /// Meters, positive to body right.
    pub lateral: f64,
    /// Radians, positive clockwise seen from above.
    pub yaw: f64,
}

impl ViewOffset {
    pub const ZERO: ViewOffset = ViewOffset { lateral: 0.0, yaw: 0.0 };
    pub const MAX_LATERAL: f64 = 2.0;
    pub const MAX_YAW: f64 = std::f64::consts::FRAC_PI_2;

    pub fn new(lateral: f64, yaw: f64) -> Self {
        Self { lateral, yaw }
    }

    pub fn is_valid(&self) -> bool {
        self.lateral.is_finite()
            && self.yaw.is_finite()
            && self.lateral.abs() <= Self::MAX_LATERAL
            && self.yaw.abs() <= Self::MAX_YAW
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    /// Camera frame is forward-left-up like the body.
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn forward(&self) -> Vector3<f64> {
        self.orientation * Vector3::x()
    }
}

/// World pose of the (possibly offset) camera.
pub fn camera_pose(state: &UavState, cam: &CameraModel, offset: ViewOffset) -> Pose {
    let body = state.orientation;
    let local = cam.mount_offset + Vector3::new(0.0, -offset.lateral, 0.0);
    let position = state.position + body * local;
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -offset.yaw);
    let tilt = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -cam.pitch_tilt);
    Pose { position, orientation: body * yaw * tilt }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    /// Continuous pixel coordinates; (0, 0) is the top-left image corner.
    Pixel { x: f64, y: f64, depth: f64 },
    BehindCamera,
}

pub fn project(point: &Vector3<f64>, pose: &Pose, cam: &CameraModel) -> Projection {
    let c = pose.orientation.inverse() * (point - pose.position);
    if c.x <= 1e-9 {
        return Projection::BehindCamera;
    }
    let f = cam.focal_px();
    Projection::Pixel {
        x: cam.width as f64 / 2.0 - f * c.y / c.x,
        y: cam.height as f64 / 2.0 - f * c.z / c.x,
        depth: c.x,
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, pixels: vec![0; width as usize * height as usize * 3] }
    }

    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 20);
        self.write_ppm(&mut out).expect("vec write");
        out
    }

    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self, ImageError> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        Self::from_ppm(&data)
    }

    pub fn from_ppm(data: &[u8]) -> Result<Self, ImageError> {
        let bad = |m: &str| ImageError::Format(m.to_string());
        let mut pos = 0;
        let mut token = || -> Result<String, ImageError> {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(bad("not a P6 file"));
        }
        let width: u32 = token()?.parse().map_err(|_| bad("width"))?;
        let height: u32 = token()?.parse().map_err(|_| bad("height"))?;
        if token()? != "255" {
            return Err(bad("max value must be 255"));
        }
        let body = &data[pos + 1..];
        let n = width as usize * height as usize * 3;
        if body.len() != n {
            return Err(bad("pixel data length mismatch"));
        }
        Ok(Self { width, height, pixels: body.to_vec() })
    }
}

struct Frame {
    width: usize,
    height: usize,
    buf: Vec<[u8; 3]>,
}

struct View {
    inv: Matrix3<f64>,
    position: Vector3<f64>,
    focal: f64,
    cx: f64,
    cy: f64,
}

impl View {
    fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.inv * (p - self.position)
    }
}

/// Renders the camera view with sky and ground only.
pub fn render_background(pose: &Pose, cam: &CameraModel) -> Image {
    let (mut frame, _) = background(pose, cam);
    downsample(&mut frame, cam)
}

fn background(pose: &Pose, cam: &CameraModel) -> (Frame, View) {
    let ss = cam.supersample as usize;
    let width = cam.width as usize * ss;
    let height = cam.height as usize * ss;
    let rot = pose.orientation.to_rotation_matrix().into_inner();
    let view = View {
        inv: rot.transpose(),
        position: pose.position,
        focal: width as f64 / 2.0 / (cam.fov / 2.0).tan(),
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
    };
    let mut buf = vec![[0u8; 3]; width * height];
    let col_x = rot.column(0).into_owned();
    let col_y = rot.column(1).into_owned();
    let col_z = rot.column(2).into_owned();
    for j in 0..height {
        let vz = (view.cy - (j as f64 + 0.5)) / view.focal;
        for i in 0..width {
            let vy = (view.cx - (i as f64 + 0.5)) / view.focal;
            let d = col_x + col_y * vy + col_z * vz;
            buf[j * width + i] = if d.z < 0.0 {
                GROUND
            } else {
                let elevation = d.z / d.norm();
                lerp_color(SKY_HORIZON, SKY_ZENITH, elevation)
            };
        }
    }
    (Frame { width, height, buf }, view)
}

fn lerp_color(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (a[k] as f64 + (b[k] as f64 - a[k] as f64) * t).round() as u8;
    }
    out
}

fn downsample(frame: &mut Frame, cam: &CameraModel) -> Image {
    let ss = cam.supersample as usize;
    let mut img = Image::new(cam.width, cam.height);
    let n = (ss * ss) as u32;
    for y in 0..cam.height as usize {
        for x in 0..cam.width as usize {
            let mut acc = [0u32; 3];
            for dy in 0..ss {
                let row = (y * ss + dy) * frame.width;
                for dx in 0..ss {
                    let c = frame.buf[row + x * ss + dx];
                    for k in 0..3 {
                        acc[k] += c[k] as u32;
                    }
                }
            }
            let i = (y * cam.width as usize + x) * 3;
            for k in 0..3 {
                img.pixels[i + k] = ((acc[k] + n / 2) / n) as u8;
            }
        }
    }
    img
}

/// One flat polygon queued for drawing.
struct Prim {
    depth: f64,
    color: [u8; 3],
    verts: Vec<Vector3<f64>>,
}

/// Renders the track from `pose`.
pub fn render_view(track: &TrackSpec, pose: &Pose, cam: &CameraModel) -> Image {
    let (mut frame, view) = background(pose, cam);

    // Lane surface first: it lies on the ground, below every object.
    let samples = &track.centerline;
    let stride = ((LANE_STEP / track.sample_step()).round() as usize).max(1);
    let hw = track.params.lane_half_width;
    let n = samples.len();
    let mut strip = Vec::new();
    let mut i = 0;
    while i < n {
        let j = (i + stride).min(n);
        let a = &samples[i];
        let b = &samples[j % n];
        i = j;
        let mid = (a.point + b.point) * 0.5;
        if (mid.xy() - pose.position.xy()).norm() > CULL_DISTANCE {
            continue;
        }
        let la = Vector3::new(-a.tangent.y, a.tangent.x, 0.0);
        let lb = Vector3::new(-b.tangent.y, b.tangent.x, 0.0);
        let ga = Vector3::new(a.point.x, a.point.y, 0.0);
        let gb = Vector3::new(b.point.x, b.point.y, 0.0);
        let lane = [ga + la * hw, gb + lb * hw, gb - lb * hw, ga - la * hw];
        draw_polygon(&mut frame, &view, &lane, LANE);
        let w = STRIPE_HALF_WIDTH;
        strip.push([ga + la * w, gb + lb * w, gb - lb * w, ga - la * w]);
    }
    for quad in &strip {
        draw_polygon(&mut frame, &view, quad, STRIPE);
    }

    let mut prims: Vec<Prim> = Vec::new();
    let cam_pos = pose.position;
    for cone in &track.cones {
        let to = cone - cam_pos;
        let dist = to.norm();
        if dist > CULL_DISTANCE {
            continue;
        }
        let horiz = Vector3::new(to.x, to.y, 0.0);
        let right = if horiz.norm() > 1e-9 {
            Vector3::new(horiz.y, -horiz.x, 0.0).normalize()
        } else {
            Vector3::x()
        };
        prims.push(Prim {
            depth: dist,
            color: CONE,
            verts: vec![
                cone - right * CONE_HALF_WIDTH,
                cone + right * CONE_HALF_WIDTH,
                cone + Vector3::new(0.0, 0.0, CONE_HEIGHT),
            ],
        });
    }
    for gate in &track.gates {
        if (gate.center - cam_pos).norm() > CULL_DISTANCE {
            continue;
        }
        let r = gate.right();
        let half_w = gate.width / 2.0;
        let bottom = (gate.center.z - gate.height / 2.0).max(0.0);
        let top = gate.center.z + gate.height / 2.0;
        let base = Vector3::new(gate.center.x, gate.center.y, 0.0);
        let quad = |l0: f64, l1: f64, z0: f64, z1: f64| -> Vec<Vector3<f64>> {
            vec![
                base + r * l0 + Vector3::new(0.0, 0.0, z0),
                base + r * l1 + Vector3::new(0.0, 0.0, z0),
                base + r * l1 + Vector3::new(0.0, 0.0, z1),
                base + r * l0 + Vector3::new(0.0, 0.0, z1),
            ]
        };
        let bars = [
            quad(-half_w - GATE_BAR, -half_w, 0.0, top + GATE_BAR),
            quad(half_w, half_w + GATE_BAR, 0.0, top + GATE_BAR),
            quad(-half_w, half_w, top, top + GATE_BAR),
        ];
        for verts in bars {
            let centroid = verts.iter().fold(Vector3::zeros(), |a, v| a + v) / verts.len() as f64;
            prims.push(Prim { depth: (centroid - cam_pos).norm(), color: GATE, verts });
        }
        if bottom > 0.0 {
            let verts = quad(-half_w, half_w, bottom - GATE_BAR, bottom);
            let centroid = verts.iter().fold(Vector3::zeros(), |a, v| a + v) / 4.0;
            prims.push(Prim { depth: (centroid - cam_pos).norm(), color: GATE, verts });
        }
    }
    prims.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for p in &prims {
        draw_polygon(&mut frame, &view, &p.verts, p.color);
    }
    downsample(&mut frame, cam)
}

fn draw_polygon(frame: &mut Frame, view: &View, world: &[Vector3<f64>], color: [u8; 3]) {
    let cam: Vec<Vector3<f64>> = world.iter().map(|p| view.to_camera(p)).collect();
    if cam.iter().all(|c| c.x < NEAR_PLANE) {
        return;
    }
    let clipped = clip_near(&cam);
    if clipped.len() < 3 {
        return;
    }
    let screen: Vec<(f64, f64)> = clipped
        .iter()
        .map(|c| (view.cx - view.focal * c.y / c.x, view.cy - view.focal * c.z / c.x))
        .collect();
    for k in 1..screen.len() - 1 {
        fill_triangle(frame, screen[0], screen[k], screen[k + 1], color);
    }
}

fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let a_in = a.x >= NEAR_PLANE;
        let b_in = b.x >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.x) / (b.x - a.x);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn fill_triangle(frame: &mut Frame, a: (f64, f64), b: (f64, f64), c: (f64, f64), color: [u8; 3]) {
    let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let (b, c) = if area < 0.0 { (c, b) } else { (b, c) };
    let min_x = a.0.min(b.0).min(c.0).floor().max(0.0);
    let max_x = a.0.max(b.0).max(c.0).ceil().min(frame.width as f64);
    let min_y = a.1.min(b.1).min(c.1).floor().max(0.0);
    let max_y = a.1.max(b.1).max(c.1).ceil().min(frame.height as f64);
    if min_x >= max_x || min_y >= max_y {
        return;
    }
    let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
    for y in (min_y as usize)..(max_y as usize) {
        let py = y as f64 + 0.5;
        let row = y * frame.width;
        for x in (min_x as usize)..(max_x as usize) {
            let px = x as f64 + 0.5;
            if edge(a, b, px, py) >= 0.0 && edge(b, c, px, py) >= 0.0 && edge(c, a, px, py) >= 0.0 {
                frame.buf[row + x] = color;
            }
        }
    }
}

/// True for pixels that read as gate red after filtering.
pub fn is_gate_red(c: [u8; 3]) -> bool {
    c[0] > 150 && c[1] < 90 && c[2] < 90
}
