//! Domain types shared by every stage of the pipeline.
//!
//! All geometry is local Cartesian meters with z pointing up. Users sit on
//! the ground plane (z = 0) and are described by their horizontal position
//! only; the UAV moves in 3D.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::units;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_na(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_na(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn horizontal(self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn distance(self, other: Vec3) -> f64 {
        (self.to_na() - other.to_na()).norm()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// The ground point below/at this horizontal position.
    pub fn lift(self) -> Vec3 {
        Vec3::new(self.x, self.y, 0.0)
    }

    pub fn to_na(self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn from_na(v: &Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self.to_na() - other.to_na()).norm()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

/// Axis-aligned obstacle, used to decide line-of-sight blockage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl AxisBox {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToaNoiseKind {
    Constant,
    ExponentialOfDistance,
}

/// Delay-estimation error model.
///
/// The standard deviation is `sigma0` for the constant model and
/// `sigma0 + amp * exp(d / scale)` for the distance-dependent one. Clock
/// drift accumulates `drift_rate` seconds of RTT offset per step and resets
/// every `drift_reset_period` steps. Blocked links get an extra half-normal
/// excess delay with mean `nlos_bias_mean`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToaNoiseModel {
    pub kind: ToaNoiseKind,
    #[serde(deserialize_with = "units::time")]
    pub sigma0: f64,
    #[serde(default, deserialize_with = "units::time")]
    pub amp: f64,
    #[serde(default = "default_scale", deserialize_with = "units::length")]
    pub scale: f64,
    #[serde(default, deserialize_with = "units::time")]
    pub drift_rate: f64,
    #[serde(default = "default_reset_period")]
    pub drift_reset_period: u32,
    #[serde(default, deserialize_with = "units::time")]
    pub nlos_bias_mean: f64,
}

fn default_scale() -> f64 {
    100.0
}

fn default_reset_period() -> u32 {
    1
}

impl ToaNoiseModel {
    pub fn constant(sigma0: f64) -> Self {
        Self {
            kind: ToaNoiseKind::Constant,
            sigma0,
            amp: 0.0,
            scale: default_scale(),
            drift_rate: 0.0,
            drift_reset_period: 1,
            nlos_bias_mean: 0.0,
        }
    }

    pub fn exponential(sigma0: f64, amp: f64, scale: f64) -> Self {
        Self {
            kind: ToaNoiseKind::ExponentialOfDistance,
            amp,
            scale,
            ..Self::constant(sigma0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::invalid("toa_noise.sigma0", "must be > 0"));
        }
        if self.kind == ToaNoiseKind::ExponentialOfDistance {
            if !(self.amp >= 0.0 && self.amp.is_finite()) {
                return Err(Error::invalid("toa_noise.amp", "must be >= 0"));
            }
            if !(self.scale > 0.0 && self.scale.is_finite()) {
                return Err(Error::invalid("toa_noise.scale", "must be > 0"));
            }
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate.is_finite()) {
            return Err(Error::invalid("toa_noise.drift_rate", "must be >= 0"));
        }
        if self.drift_reset_period < 1 {
            return Err(Error::invalid("toa_noise.drift_reset_period", "must be >= 1"));
        }
        if !(self.nlos_bias_mean >= 0.0 && self.nlos_bias_mean.is_finite()) {
            return Err(Error::invalid("toa_noise.nlos_bias_mean", "must be >= 0"));
        }
        Ok(())
    }
}

impl Default for ToaNoiseModel {
    fn default() -> Self {
        Self::constant(12.5e-9)
    }
}

/// World description for one mission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub users: Vec<Vec2>,
    pub uav_start: Vec3,
    pub uav_terminal: Vec3,
    pub mission_steps: usize,
    #[serde(default = "defaults::d_max", deserialize_with = "units::length")]
    pub d_max: f64,
    #[serde(default = "defaults::delta_keep", deserialize_with = "units::length")]
    pub delta_keep: f64,
    #[serde(default = "defaults::sigma_gps", deserialize_with = "units::length")]
    pub sigma_gps: f64,
    #[serde(default)]
    pub toa_noise: ToaNoiseModel,
    #[serde(default = "defaults::numerology")]
    pub numerology: u32,
    #[serde(default = "defaults::sample_rate", deserialize_with = "units::frequency")]
    pub sample_rate: f64,
    #[serde(default)]
    pub buildings: Vec<AxisBox>,
    #[serde(default)]
    pub seed: u64,
}

pub mod defaults {
    pub fn d_max() -> f64 {
        5.0
    }
    pub fn delta_keep() -> f64 {
        2.0
    }
    pub fn sigma_gps() -> f64 {
        1.0
    }
    pub fn numerology() -> u32 {
        1
    }
    /// 40 MHz carrier at 30 kHz subcarrier spacing samples at 61.44 MHz.
    pub fn sample_rate() -> f64 {
        61.44e6
    }
}

impl Scenario {
    /// Scenario with the documented defaults for everything but the geometry.
    pub fn new(users: Vec<Vec2>, uav_start: Vec3, uav_terminal: Vec3, mission_steps: usize) -> Self {
        Self {
            users,
            uav_start,
            uav_terminal,
            mission_steps,
            d_max: defaults::d_max(),
            delta_keep: defaults::delta_keep(),
            sigma_gps: defaults::sigma_gps(),
            toa_noise: ToaNoiseModel::default(),
            numerology: defaults::numerology(),
            sample_rate: defaults::sample_rate(),
            buildings: Vec::new(),
            seed: 0,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Maximum distance the UAV can cover over the whole mission.
    pub fn travel_budget(&self) -> f64 {
        self.d_max * (self.mission_steps.saturating_sub(1)) as f64
    }
}

/// Checks every scenario invariant and wraps the scenario on success.
pub fn validate_scenario(s: Scenario) -> Result<ValidatedScenario> {
    if s.users.is_empty() {
        return Err(Error::invalid("users", "at least one user is required"));
    }
    if s.users.iter().any(|u| !u.is_finite()) {
        return Err(Error::invalid("users", "non-finite coordinate"));
    }
    if !s.uav_start.is_finite() {
        return Err(Error::invalid("uav_start", "non-finite coordinate"));
    }
    if !s.uav_terminal.is_finite() {
        return Err(Error::invalid("uav_terminal", "non-finite coordinate"));
    }
    if s.mission_steps < 2 {
        return Err(Error::invalid("mission_steps", "must be >= 2"));
    }
    if !(s.d_max > 0.0 && s.d_max.is_finite()) {
        return Err(Error::invalid("d_max", "must be > 0"));
    }
    if !(s.delta_keep >= 0.0 && s.delta_keep.is_finite()) {
        return Err(Error::invalid("delta_keep", "must be >= 0"));
    }
    if !(s.sigma_gps > 0.0 && s.sigma_gps.is_finite()) {
        return Err(Error::invalid("sigma_gps", "must be > 0"));
    }
    if s.numerology > 5 {
        return Err(Error::invalid("numerology", "must be in 0..=5"));
    }
    if !(s.sample_rate > 0.0 && s.sample_rate.is_finite()) {
        return Err(Error::invalid("sample_rate", "must be > 0"));
    }
    s.toa_noise.validate()?;
    for b in &s.buildings {
        if !(b.min.is_finite() && b.max.is_finite()) {
            return Err(Error::invalid("buildings", "non-finite corner"));
        }
        if b.min.x > b.max.x || b.min.y > b.max.y || b.min.z > b.max.z {
            return Err(Error::invalid("buildings", "min corner exceeds max corner"));
        }
    }
    let distance = s.uav_start.distance(s.uav_terminal);
    let budget = s.travel_budget();
    if distance > budget * (1.0 + 1e-12) {
        return Err(Error::TerminalUnreachable { distance, budget });
    }
    Ok(ValidatedScenario(s))
}

/// A scenario that passed [`validate_scenario`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedScenario(Scenario);

impl ValidatedScenario {
    pub fn into_inner(self) -> Scenario {
        self.0
    }
}

impl Deref for ValidatedScenario {
    type Target = Scenario;

    fn deref(&self) -> &Scenario {
        &self.0
    }
}

/// One ToA observation of user `user_id` at mission step `step`, together
/// with the GPS fix reported at that step. Both indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub step: usize,
    pub user_id: usize,
    pub gps_pos: Vec3,
    pub toa: f64,
}
