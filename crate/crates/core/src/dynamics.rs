//! Fixed-timestep quadcopter model flown in racing mode: angle-mode
//! attitude control on roll and pitch, rate control on yaw, and a
//! climb-rate throttle with altitude assist.
//!
//! Frames: world is right-handed z-up (x east, y north). Body is
//! forward-left-up. Positive aileron rolls right, positive elevator pitches
//! the nose down (accelerates forward), positive rudder yaws clockwise seen
//! from above.

use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::track::TrackSpec;

pub const TICK_RATE: f64 = 60.0;
pub const DT: f64 = 1.0 / TICK_RATE;
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite simulation state at tick {0}")]
    NonFiniteState(u64),
    #[error("invalid UAV parameters: {0}")]
    InvalidParams(String),
    #[error("track has no gates to spawn at")]
    EmptyTrack,
}

/// The four transmitter channels for one tick.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StickInput {
    pub throttle: f32,
    pub elevator: f32,
    pub aileron: f32,
    pub rudder: f32,
}

impl StickInput {
    pub const fn new(throttle: f32, elevator: f32, aileron: f32, rudder: f32) -> Self {
        Self { throttle, elevator, aileron, rudder }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.throttle, self.elevator, self.aileron, self.rudder]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Clamps each channel to its range. NaN channels map to neutral.
    pub fn clamped(self) -> Self {
        let c = |v: f32, lo: f32, hi: f32, neutral: f32| if v.is_nan() { neutral } else { v.clamp(lo, hi) };
        Self {
            throttle: c(self.throttle, 0.0, 1.0, 0.5),
            elevator: c(self.elevator, -1.0, 1.0, 0.0),
            aileron: c(self.aileron, -1.0, 1.0, 0.0),
            rudder: c(self.rudder, -1.0, 1.0, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// Body-frame angular velocity.
    pub angular_velocity: Vector3<f64>,
    /// Integrator of the body rate loop.
    pub rate_integral: Vector3<f64>,
    pub tick: u64,
    /// Set when the last step clamped the vehicle to the ground.
    pub ground_contact: bool,
}

impl UavState {
    pub fn at_rest(position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            angular_velocity: Vector3::zeros(),
            rate_integral: Vector3::zeros(),
            tick: 0,
            ground_contact: false,
        }
    }

    /// (roll, pitch, yaw) in the z-y-x convention. Positive pitch is nose down.
    pub fn euler(&self) -> (f64, f64, f64) {
        self.orientation.euler_angles()
    }

    pub fn yaw(&self) -> f64 {
        self.euler().2
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    pub fn is_finite(&self) -> bool {
        let q = self.orientation.quaternion();
        self.position.iter().chain(self.velocity.iter()).chain(self.angular_velocity.iter())
            .chain(self.rate_integral.iter())
            .chain(q.coords.iter())
            .all(|v| v.is_finite())
    }
}

/// Per-axis gains. For roll and pitch `kp` maps angle error to a rate
/// setpoint; for all axes `kd` and `ki` act on the body-rate error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavParams {
    pub mass: f64,
    pub max_tilt: f64,
    pub max_yaw_rate: f64,
    pub max_thrust: f64,
    /// Rotor drag acting on velocity in the rotor plane, N s/m.
    pub linear_drag: f64,
    /// Extra drag on the body-lateral velocity component, N s/m.
    pub side_drag: f64,
    pub quadratic_drag: f64,
    pub inertia: [f64; 3],
    pub roll: AxisGains,
    pub pitch: AxisGains,
    pub yaw: AxisGains,
    /// Vertical-velocity loop gain, 1/s.
    pub climb_gain: f64,
    pub max_climb_rate: f64,
    /// Half width of the centered throttle band that commands zero climb.
    pub throttle_deadband: f64,
    pub rate_integral_limit: f64,
    pub dt: f64,
}

impl Default for UavParams {
    fn default() -> Self {
        let mass = 0.7;
        Self {
            mass,
            max_tilt: 60f64.to_radians(),
            max_yaw_rate: 2.0 * PI,
            max_thrust: 4.0 * mass * GRAVITY,
            linear_drag: 0.5,
            side_drag: 1.0,
            quadratic_drag: 0.001,
            inertia: [0.004, 0.004, 0.007],
            roll: AxisGains { kp: 8.0, ki: 0.0, kd: 30.0 },
            pitch: AxisGains { kp: 8.0, ki: 0.0, kd: 30.0 },
            yaw: AxisGains { kp: 0.0, ki: 0.0, kd: 20.0 },
            climb_gain: 4.0,
            max_climb_rate: 4.0,
            throttle_deadband: 0.05,
            rate_integral_limit: 1.0,
            dt: DT,
        }
    }
}

impl UavParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidParams(m.to_string()));
        if !(self.mass > 0.0) {
            return bad("mass must be > 0");
        }
        if !(self.max_thrust > self.mass * GRAVITY) {
            return bad("max_thrust must exceed mass * g (hover capability)");
        }
        if self.dt != DT {
            return bad("dt must be exactly 1/60 s");
        }
        if !(self.max_tilt > 0.0 && self.max_tilt < PI / 2.0) {
            return bad("max_tilt must be in (0, pi/2)");
        }
        if !(self.throttle_deadband >= 0.0 && self.throttle_deadband < 0.5) {
            return bad("throttle_deadband must be in [0, 0.5)");
        }
        if self.inertia.iter().any(|i| !(*i > 0.0)) {
            return bad("inertia must be positive");
        }
        if !(self.linear_drag >= 0.0 && self.side_drag >= 0.0 && self.quadratic_drag >= 0.0) {
            return bad("drag coefficients must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, DynamicsError> {
        let p: Self = toml::from_str(text).map_err(|e| DynamicsError::InvalidParams(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("params serialize")
    }

    /// Stable hash of every parameter, used to key logs to the model that
    /// produced them.
    pub fn hash(&self) -> u64 {
        crate::track::hash64(self.to_toml().as_bytes())
    }

    /// Climb-rate setpoint for a throttle stick position.
    pub fn climb_setpoint(&self, throttle: f32) -> f64 {
        let t = throttle as f64 - 0.5;
        let band = self.throttle_deadband;
        if t.abs() <= band {
            0.0
        } else {
            t.signum() * (t.abs() - band) / (0.5 - band) * self.max_climb_rate
        }
    }
}

/// Sticks that hold altitude with level attitude.
pub fn hover_trim(_params: &UavParams) -> StickInput {
    StickInput::new(0.5, 0.0, 0.0, 0.0)
}

/// Initial state at gate 0, facing the race direction.
pub fn spawn(track: &TrackSpec) -> Result<UavState, DynamicsError> {
    let g = track.gates.first().ok_or(DynamicsError::EmptyTrack)?;
    Ok(UavState::at_rest(g.center, g.heading))
}

/// Advances the state by one tick.
pub fn step(state: &UavState, sticks: StickInput, params: &UavParams) -> Result<UavState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState(state.tick));
    }
    let sticks = sticks.clamped();
    let dt = params.dt;
    let (roll, pitch, _) = state.euler();

    let roll_target = sticks.aileron as f64 * params.max_tilt;
    let pitch_target = sticks.elevator as f64 * params.max_tilt;
    let yaw_rate_target = -(sticks.rudder as f64) * params.max_yaw_rate;

    // Euler-rate setpoints mapped onto body rates.
    let roll_rate = params.roll.kp * (roll_target - roll);
    let pitch_rate = params.pitch.kp * (pitch_target - pitch);
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let rate_sp = Vector3::new(
        roll_rate - yaw_rate_target * sp,
        pitch_rate * cr + yaw_rate_target * sr * cp,
        -pitch_rate * sr + yaw_rate_target * cr * cp,
    );

    let err = rate_sp - state.angular_velocity;
    let lim = params.rate_integral_limit;
    let integral = (state.rate_integral + err * dt).map(|v| v.clamp(-lim, lim));
    let gains = [params.roll, params.pitch, params.yaw];
    let alpha_cmd = Vector3::from_fn(|i, _| gains[i].kd * err[i] + gains[i].ki * integral[i]);
    let inertia = Vector3::from(params.inertia);
    let w = state.angular_velocity;
    let gyro = w.cross(&inertia.component_mul(&w)).component_div(&inertia);
    let alpha = alpha_cmd - gyro;

    // Collective thrust from the climb-rate loop, tilt compensated.
    let body_up = state.orientation * Vector3::z();
    let climb_sp = params.climb_setpoint(sticks.throttle);
    // The assist also cancels the vertical part of drag.
    let drag = drag_force(state, params);
    let accel_z = GRAVITY + params.climb_gain * (climb_sp - state.velocity.z) - drag.z / params.mass;
    let thrust = (params.mass * accel_z / body_up.z.max(0.25)).clamp(0.0, params.max_thrust);

    let (velocity, mut position) = integrate_translation(state, body_up * thrust, params);
    let angular_velocity = w + alpha * dt;
    let dq = UnitQuaternion::from_scaled_axis(angular_velocity * dt);
    let q = state.orientation * dq;
    let orientation = UnitQuaternion::new_normalize(Quaternion::from(q.into_inner().coords));

    let mut velocity = velocity;
    let mut ground_contact = false;
    if position.z < 0.0 {
        position.z = 0.0;
        velocity.z = velocity.z.max(0.0);
        ground_contact = true;
    }

    let next = UavState {
        position,
        velocity,
        orientation,
        angular_velocity,
        rate_integral: integral,
        tick: state.tick + 1,
        ground_contact,
    };
    if !next.is_finite() {
        return Err(DynamicsError::NonFiniteState(next.tick));
    }
    Ok(next)
}

/// Rotor drag on the velocity component in the rotor plane, side drag on
/// the body-lateral component, and isotropic quadratic air drag.
pub fn drag_force(state: &UavState, params: &UavParams) -> Vector3<f64> {
    let v = state.velocity;
    let up = state.orientation * Vector3::z();
    let planar = v - up * v.dot(&up);
    let side = state.orientation * Vector3::y();
    -params.linear_drag * planar - params.side_drag * side * v.dot(&side) - params.quadratic_drag * v.norm() * v
}

/// Semi-implicit Euler update of velocity then position under a given
/// thrust force, gravity and drag.
pub fn integrate_translation(
    state: &UavState,
    thrust: Vector3<f64>,
    params: &UavParams,
) -> (Vector3<f64>, Vector3<f64>) {
    let force = thrust + drag_force(state, params) - Vector3::new(0.0, 0.0, params.mass * GRAVITY);
    let velocity = state.velocity + force / params.mass * params.dt;
    let position = state.position + velocity * params.dt;
    (velocity, position)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level() -> UavState {
        UavState::at_rest(Vector3::new(0.0, 0.0, 10.0), 0.3)
    }

    #[test]
    fn hover_holds_altitude() {
        let p = UavParams::default();
        let mut s = level();
        let trim = hover_trim(&p);
        for _ in 0..600 {
            s = step(&s, trim, &p).unwrap();
        }
        assert!((s.position.z - 10.0).abs() < 0.1);
        assert!(s.velocity.norm() < 0.05);
        assert_eq!(s.tick, 600);
    }

    #[test]
    fn hover_trim_is_mid_stick() {
        let p = UavParams::default();
        assert_eq!(hover_trim(&p).throttle, 0.5);
        let heavy = UavParams { mass: 1.4, ..UavParams::default() };
        heavy.validate().unwrap();
        assert_eq!(hover_trim(&heavy).throttle, 0.5);
        let mut s = level();
        for _ in 0..600 {
            s = step(&s, hover_trim(&heavy), &heavy).unwrap();
        }
        assert!((s.position.z - 10.0).abs() < 0.1);
    }

    #[test]
    fn underpowered_params_rejected() {
        let p = UavParams { max_thrust: 0.5 * 0.7 * GRAVITY, ..UavParams::default() };
        assert!(matches!(p.validate(), Err(DynamicsError::InvalidParams(_))));
        let p = UavParams { dt: 0.01, ..UavParams::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn full_aileron_reaches_max_tilt() {
        let p = UavParams::default();
        let mut s = level();
        for _ in 0..120 {
            s = step(&s, StickInput::new(0.5, 0.0, 1.0, 0.0), &p).unwrap();
        }
        let (roll, _, _) = s.euler();
        assert!((roll - p.max_tilt).abs() < 0.05 * p.max_tilt, "roll {roll}");
        // Rolling right accelerates toward body right.
        let right = s.orientation * Vector3::new(0.0, -1.0, 0.0);
        assert!(s.velocity.dot(&Vector3::new(right.x, right.y, 0.0)) > 0.0);
    }

    #[test]
    fn elevator_accelerates_forward_and_rudder_yaws_clockwise() {
        let p = UavParams::default();
        let mut s = level();
        for _ in 0..60 {
            s = step(&s, StickInput::new(0.5, 0.5, 0.0, 0.0), &p).unwrap();
        }
        let fwd = Vector3::new(0.3f64.cos(), 0.3f64.sin(), 0.0);
        assert!(s.velocity.dot(&fwd) > 1.0);
        let mut s = level();
        for _ in 0..30 {
            s = step(&s, StickInput::new(0.5, 0.0, 0.0, 0.5), &p).unwrap();
        }
        assert!(s.yaw() < 0.3 - 0.5);
    }

    #[test]
    fn replay_is_bit_identical() {
        let p = UavParams::default();
        let sticks: Vec<StickInput> = (0..500)
            .map(|i| {
                let t = i as f32 * 0.05;
                StickInput::new(0.5 + 0.3 * t.sin(), 0.4 * (0.7 * t).cos(), 0.6 * (1.3 * t).sin(), 0.2 * t.cos())
            })
            .collect();
        let run = || {
            let mut s = level();
            let mut out = Vec::new();
            for st in &sticks {
                s = step(&s, *st, &p).unwrap();
                out.push(s);
            }
            out
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.position.map(f64::to_bits), y.position.map(f64::to_bits));
            assert_eq!(x.orientation.coords.map(f64::to_bits), y.orientation.coords.map(f64::to_bits));
        }
    }

    #[test]
    fn non_finite_state_halts() {
        let p = UavParams::default();
        let mut s = level();
        s.velocity.x = f64::NAN;
        assert_eq!(step(&s, hover_trim(&p), &p), Err(DynamicsError::NonFiniteState(0)));
    }

    #[test]
    fn ground_contact_clamps() {
        let p = UavParams::default();
        let mut s = UavState::at_rest(Vector3::new(0.0, 0.0, 0.05), 0.0);
        let mut hit = false;
        for _ in 0..60 {
            s = step(&s, StickInput::new(0.0, 0.0, 0.0, 0.0), &p).unwrap();
            assert!(s.position.z >= 0.0);
            hit |= s.ground_contact;
        }
        assert!(hit);
    }

    #[test]
    fn terminal_speed_exceeds_100_kmh() {
        let p = UavParams::default();
        let mut s = level();
        for _ in 0..(60 * 40) {
            s = step(&s, StickInput::new(1.0, 1.0, 0.0, 0.0), &p).unwrap();
        }
        let speed = s.speed();
        eprintln!("terminal speed {speed}");
        assert!(speed > 27.8 && speed < 40.0, "terminal speed {speed}");
    }

    #[test]
    fn energy_non_increasing_without_thrust() {
        let p = UavParams::default();
        let mut s = UavState::at_rest(Vector3::new(0.0, 0.0, 50.0), 0.0);
        s.velocity = Vector3::new(12.0, -3.0, 4.0);
        let energy = |s: &UavState| 0.5 * s.velocity.norm_squared() + GRAVITY * s.position.z;
        for _ in 0..300 {
            let before = energy(&s);
            let (v, x) = integrate_translation(&s, Vector3::zeros(), &p);
            s.velocity = v;
            s.position = x;
            assert!(energy(&s) <= before + 1e-12);
        }
    }

    #[test]
    fn climb_mapping_is_symmetric() {
        let p = UavParams::default();
        assert_eq!(p.climb_setpoint(0.5), 0.0);
        assert_eq!(p.climb_setpoint(0.53), 0.0);
        assert!((p.climb_setpoint(1.0) - p.max_climb_rate).abs() < 1e-6);
        assert!((p.climb_setpoint(0.0) + p.max_climb_rate).abs() < 1e-6);
    }

    #[test]
    fn params_toml_round_trip() {
        let p = UavParams::default();
        let back = UavParams::from_toml(&p.to_toml()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.hash(), p.hash());
        let other = UavParams { mass: 0.8, ..p.clone() };
        assert_ne!(other.hash(), p.hash());
    }
}
