//! Viewpoint augmentation: offset grids and the corrective stick model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::StickInput;
use crate::render::ViewOffset;

#[derive(Debug, Error, PartialEq)]
pub enum IntervalError {
    #[error("expected `[min:inc:max]` or `[None]`, got {0:?}")]
    Syntax(String),
    #[error("increment must be positive")]
    Increment,
    #[error("min must not exceed max")]
    Order,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSpec {
    pub min: f64,
    pub increment: f64,
    pub max: f64,
}

impl IntervalSpec {
    /// The arithmetic sequence with zero removed.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.increment + 1e-9).floor() as i64;
        (0..=n)
            .map(|i| self.min + i as f64 * self.increment)
            .filter(|v| v.abs() > 1e-9 * self.increment.max(1.0))
            .collect()
    }
}

/// Parses the bracket syntax; `Ok(None)` for `[None]`.
pub fn parse_interval_spec(text: &str) -> Result<Option<IntervalSpec>, IntervalError> {
    let syntax = || IntervalError::Syntax(text.to_string());
    let inner = text.trim().strip_prefix('[').and_then(|t| t.strip_suffix(']')).ok_or_else(syntax)?.trim();
    if inner.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    let parts: Vec<&str> = inner.split(':').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(syntax());
    }
    let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(syntax);
    let spec = IntervalSpec { min: num(parts[0])?, increment: num(parts[1])?, max: num(parts[2])? };
    if spec.increment <= 0.0 {
        return Err(IntervalError::Increment);
    }
    if spec.min > spec.max {
        return Err(IntervalError::Order);
    }
    Ok(Some(spec))
}

pub fn parse_interval(text: &str) -> Result<Vec<f64>, IntervalError> {
    Ok(parse_interval_spec(text)?.map(|s| s.values()).unwrap_or_default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Meters.
    pub lateral_offsets: Vec<f64>,
    /// Radians.
    pub yaw_offsets: Vec<f64>,
    /// Aileron per meter of lateral offset.
    pub k_lat: f64,
    /// Rudder per radian of yaw offset.
    pub k_yaw: f64,
    /// Aileron per radian of yaw offset.
    pub k_couple: f64,
}

pub const DEFAULT_K_LAT: f64 = 0.4;
pub const DEFAULT_K_YAW: f64 = 0.5;
pub const DEFAULT_K_COUPLE: f64 = 0.3;

impl AugmentConfig {
    pub fn empty() -> Self {
        Self {
            lateral_offsets: Vec::new(),
            yaw_offsets: Vec::new(),
            k_lat: DEFAULT_K_LAT,
            k_yaw: DEFAULT_K_YAW,
            k_couple: DEFAULT_K_COUPLE,
        }
    }

    /// Lateral {±0.5 m}, yaw {±15°, ±30°}.
    pub fn default_grid() -> Self {
        make_grid("[-50:50:50]", "[-30:15:30]").expect("default grid parses")
    }

    /// Lateral-only offsets followed by yaw-only offsets.
    pub fn offsets(&self) -> Vec<ViewOffset> {
        self.lateral_offsets
            .iter()
            .map(|&l| ViewOffset::new(l, 0.0))
            .chain(self.yaw_offsets.iter().map(|&y| ViewOffset::new(0.0, y)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_lat > 0.0 && self.k_yaw > 0.0 && self.k_couple > 0.0) {
            return Err("gains must be positive".into());
        }
        if self.lateral_offsets.iter().chain(&self.yaw_offsets).any(|v| *v == 0.0 || !v.is_finite()) {
            return Err("offsets must be finite and non-zero".into());
        }
        if self.offsets().iter().any(|o| !o.is_valid()) {
            return Err("offset outside sanity bounds".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        crate::track::hash64(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Grid cell from a lateral spec in centimeters and a yaw spec in degrees.
pub fn make_grid(lateral_cm: &str, yaw_deg: &str) -> Result<AugmentConfig, IntervalError> {
    let lateral = parse_interval(lateral_cm)?.into_iter().map(|cm| cm / 100.0).collect();
    let yaw = parse_interval(yaw_deg)?.into_iter().map(f64::to_radians).collect();
    Ok(AugmentConfig { lateral_offsets: lateral, yaw_offsets: yaw, ..AugmentConfig::empty() })
}

/// Sticks that steer a displaced view back to the demonstrated path. A view
/// displaced right or rotated clockwise gets left or counter-clockwise input.
pub fn corrective_controls(sticks: StickInput, offset: ViewOffset, cfg: &AugmentConfig) -> StickInput {
    let a = sticks.aileron as f64 - cfg.k_lat * offset.lateral - cfg.k_couple * offset.yaw;
    let r = sticks.rudder as f64 - cfg.k_yaw * offset.yaw;
    StickInput {
        aileron: a.clamp(-1.0, 1.0) as f32,
        rudder: r.clamp(-1.0, 1.0) as f32,
        ..sticks
    }
}
