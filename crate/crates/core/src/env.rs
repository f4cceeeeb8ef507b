//! A kinematic top-down grasping task whose dynamics commute with quarter turns.
//!
//! The gripper moves over a square workspace, closes on a rectangular block and
//! must lift it. Observations are gripper-centered height maps in world axes
//! plus a constant channel holding the grasp flag.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_8, TAU};
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group::FactoredAction;

pub const ENV_NAME: &str = "grasp2d";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Half side length of the square workspace, meters.
    pub half_extent: f64,
    /// Observation side length in pixels.
    pub resolution: usize,
    pub grasp_tolerance: f64,
    /// The gripper must be at or below this height to grasp.
    pub grasp_height: f64,
    pub lift_height: f64,
    pub max_steps: usize,
    pub object_half_extents: [f64; 2],
    pub object_height: f64,
    pub start_height: f64,
    pub max_height: f64,
    /// Samples per pixel side when rendering coverage.
    pub supersample: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            half_extent: 0.15,
            resolution: 65,
            grasp_tolerance: 0.02,
            grasp_height: 0.02,
            lift_height: 0.08,
            max_steps: 50,
            object_half_extents: [0.015, 0.03],
            object_height: 0.03,
            start_height: 0.10,
            max_height: 0.20,
            supersample: 4,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.half_extent,
            self.grasp_tolerance,
            self.grasp_height,
            self.lift_height,
            self.object_half_extents[0],
            self.object_half_extents[1],
            self.object_height,
            self.start_height,
            self.max_height,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) || self.resolution == 0 || self.max_steps == 0 || self.supersample == 0 {
            return Err(Error::Config("environment sizes must be positive".into()));
        }
        if self.grasp_tolerance >= self.half_extent {
            return Err(Error::Config("grasp tolerance must be smaller than the workspace".into()));
        }
        if self.object_margin() >= self.half_extent {
            return Err(Error::Config("object does not fit in the workspace".into()));
        }
        if self.start_height > self.max_height || self.lift_height > self.max_height {
            return Err(Error::Config("heights exceed max_height".into()));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Side length of one pixel, `2 · half_extent / resolution`.
    pub fn pixel_pitch(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    /// Full diagonal of the object footprint.
    pub fn object_margin(&self) -> f64 {
        let [a, b] = self.object_half_extents;
        2.0 * (a * a + b * b).sqrt()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        [2, self.resolution, self.resolution]
    }
}

/// Physical action ranges; `gripper` below 0.5 opens, at or above closes.
pub mod bounds {
    use super::*;

    pub const GRIPPER: [f64; 2] = [0.0, 1.0];
    pub const XY: f64 = 0.05;
    pub const Z: f64 = 0.05;
    pub const THETA: f64 = FRAC_PI_8;

    pub fn clip(a: &FactoredAction) -> FactoredAction {
        FactoredAction::new(
            a.gripper.clamp(GRIPPER[0], GRIPPER[1]),
            [a.xy[0].clamp(-XY, XY), a.xy[1].clamp(-XY, XY)],
            a.z.clamp(-Z, Z),
            a.theta.clamp(-THETA, THETA),
        )
    }

    pub fn contains(a: &FactoredAction) -> bool {
        clip(a) == *a
    }

    /// Maps a physical action to `[-1, 1]^5` in `(λ, x, y, z, θ)` order.
    pub fn normalize(a: &FactoredAction) -> [f64; 5] {
        [a.gripper * 2.0 - 1.0, a.xy[0] / XY, a.xy[1] / XY, a.z / Z, a.theta / THETA]
    }

    /// Inverse of [`normalize`]; inputs are clipped to `[-1, 1]` first.
    pub fn denormalize(n: [f64; 5]) -> FactoredAction {
        let c = n.map(|v| v.clamp(-1.0, 1.0));
        FactoredAction::new((c[0] + 1.0) / 2.0, [c[1] * XY, c[2] * XY], c[3] * Z, c[4] * THETA)
    }
}

/// An angle stored as whole quarter turns plus a residual in `[-π/4, π/4)`, so
/// adding a quarter turn is exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuarterAngle {
    pub quarter: u8,
    pub residual: f64,
}

impl QuarterAngle {
    pub fn from_radians(a: f64) -> Self {
        let k = ((a + FRAC_PI_4) / FRAC_PI_2).floor();
        Self {
            quarter: (k as i64).rem_euclid(4) as u8,
            residual: a - k * FRAC_PI_2,
        }
        .normalized()
    }

    fn normalized(mut self) -> Self {
        while self.residual >= FRAC_PI_4 {
            self.residual -= FRAC_PI_2;
            self.quarter = (self.quarter + 1) % 4;
        }
        while self.residual < -FRAC_PI_4 {
            self.residual += FRAC_PI_2;
            self.quarter = (self.quarter + 3) % 4;
        }
        self
    }

    pub fn add(self, delta: f64) -> Self {
        Self {
            quarter: self.quarter,
            residual: self.residual + delta,
        }
        .normalized()
    }

    pub fn turned(self, quarters: u8) -> Self {
        Self {
            quarter: (self.quarter + quarters) % 4,
            residual: self.residual,
        }
    }

    /// The angle in `[0, 2π)`.
    pub fn radians(self) -> f64 {
        (self.quarter as f64 * FRAC_PI_2 + self.residual).rem_euclid(TAU)
    }
}

fn quarter_vec(q: u8, [x, y]: [f64; 2]) -> [f64; 2] {
    match q % 4 {
        0 => [x, y],
        1 => [-y, x],
        2 => [-x, -y],
        _ => [y, -x],
    }
}

/// Full simulator state in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper: [f64; 2],
    pub gripper_z: f64,
    pub gripper_angle: QuarterAngle,
    pub closed: bool,
    pub holding: bool,
    /// Object center minus gripper position, fixed while holding.
    pub grasp_offset: [f64; 2],
    pub object: [f64; 2],
    pub object_angle: QuarterAngle,
    pub steps: usize,
    pub done: bool,
}

impl EnvState {
    /// The same scene rotated by `quarters` quarter turns about the origin.
    pub fn rotated(&self, quarters: u8) -> Self {
        Self {
            gripper: quarter_vec(quarters, self.gripper),
            gripper_angle: self.gripper_angle.turned(quarters),
            grasp_offset: quarter_vec(quarters, self.grasp_offset),
            object: quarter_vec(quarters, self.object),
            object_angle: self.object_angle.turned(quarters),
            ..self.clone()
        }
    }
}

/// Outcome of one [`GraspEnv::step`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Array3<f32>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct GraspEnv {
    config: EnvConfig,
    state: EnvState,
}

impl GraspEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let state = EnvState {
            gripper: [0.0, 0.0],
            gripper_z: config.start_height,
            gripper_angle: QuarterAngle::from_radians(0.0),
            closed: false,
            holding: false,
            grasp_offset: [0.0, 0.0],
            object: [0.0, 0.0],
            object_angle: QuarterAngle::from_radians(0.0),
            steps: 0,
            done: true,
        };
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Array3<f32> {
        let lim = self.config.half_extent - self.config.object_margin();
        let object = [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)];
        let angle = rng.random_range(0.0..TAU);
        self.state = EnvState {
            gripper: [0.0, 0.0],
            gripper_z: self.config.start_height,
            gripper_angle: QuarterAngle::from_radians(0.0),
            closed: false,
            holding: false,
            grasp_offset: [0.0, 0.0],
            object,
            object_angle: QuarterAngle::from_radians(angle),
            steps: 0,
            done: false,
        };
        self.observe()
    }

    pub fn observe(&self) -> Array3<f32> {
        render_observation(&self.config, &self.state)
    }

    /// Whether the gripper is close enough to grasp the object.
    fn can_grasp(&self) -> bool {
        let s = &self.state;
        let dx = s.object[0] - s.gripper[0];
        let dy = s.object[1] - s.gripper[1];
        let tol = self.config.grasp_tolerance;
        dx * dx + dy * dy <= tol * tol && s.gripper_z <= self.config.grasp_height
    }

    /// Applies a (clipped) action. Stepping a finished episode is an error.
    pub fn step(&mut self, action: &FactoredAction) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::EpisodeFinished);
        }
        if !bounds::contains(action) {
            log::debug!("clipping out-of-bounds action {action:?}");
        }
        let a = bounds::clip(action);
        let h = self.config.half_extent;
        let s = &mut self.state;
        s.gripper = [
            (s.gripper[0] + a.xy[0]).clamp(-h, h),
            (s.gripper[1] + a.xy[1]).clamp(-h, h),
        ];
        s.gripper_z = (s.gripper_z + a.z).clamp(0.0, self.config.max_height);
        s.gripper_angle = s.gripper_angle.add(a.theta);
        if s.holding {
            s.object = [s.gripper[0] + s.grasp_offset[0], s.gripper[1] + s.grasp_offset[1]];
            s.object_angle = s.object_angle.add(a.theta);
        }
        if a.gripper >= 0.5 {
            self.state.closed = true;
            if !self.state.holding && self.can_grasp() {
                let s = &mut self.state;
                s.holding = true;
                s.grasp_offset = [s.object[0] - s.gripper[0], s.object[1] - s.gripper[1]];
            }
        } else {
            let s = &mut self.state;
            s.closed = false;
            s.holding = false;
        }
        let s = &mut self.state;
        s.steps += 1;
        let success = s.holding && s.gripper_z >= self.config.lift_height;
        s.done = success || s.steps >= self.config.max_steps;
        let reward = if success { 1.0 } else { 0.0 };
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.state.done,
        })
    }
}

/// Channel 0: object height map (coverage-weighted) centered on the gripper;
/// channel 1: 1 where the object is held, 0 otherwise.
pub fn render_observation(cfg: &EnvConfig, s: &EnvState) -> Array3<f32> {
    let n = cfg.resolution;
    let c = (n as f64 - 1.0) / 2.0;
    let pitch = cfg.pixel_pitch();
    let m = cfg.supersample;
    let offsets: Vec<f64> = (0..m).map(|k| (k as f64 + 0.5) / m as f64 - 0.5).collect();
    let [hx, hy] = cfg.object_half_extents;
    let (sin, cos) = s.object_angle.residual.sin_cos();
    let undo = (4 - s.object_angle.quarter) % 4;
    let mut out = Array3::<f32>::zeros((2, n, n));
    for i in 0..n {
        for j in 0..n {
            let mut hits = 0usize;
            for &oi in &offsets {
                for &oj in &offsets {
                    let px = ((j as f64 - c) + oj) * pitch;
                    let py = ((c - i as f64) - oi) * pitch;
                    let d = [px + s.gripper[0] - s.object[0], py + s.gripper[1] - s.object[1]];
                    let [dx, dy] = quarter_vec(undo, d);
                    let ux = cos * dx + sin * dy;
                    let uy = cos * dy - sin * dx;
                    if ux.abs() <= hx && uy.abs() <= hy {
                        hits += 1;
                    }
                }
            }
            out[[0, i, j]] = (cfg.object_height * hits as f64 / (m * m) as f64) as f32;
        }
    }
    if s.holding {
        out.index_axis_mut(ndarray::Axis(0), 1).fill(1.0);
    }
    out
}

fn wrap_half_turn(a: f64) -> f64 {
    let mut x = a.rem_euclid(std::f64::consts::PI);
    if x >= FRAC_PI_2 {
        x -= std::f64::consts::PI;
    }
    x
}

/// Scripted expert: align over the object (and with its short side), close
/// while descending, lift.
pub fn expert_action(cfg: &EnvConfig, s: &EnvState) -> FactoredAction {
    if s.holding {
        return FactoredAction::new(1.0, [0.0, 0.0], bounds::Z, 0.0);
    }
    let d = [s.object[0] - s.gripper[0], s.object[1] - s.gripper[1]];
    let xy = [d[0].clamp(-bounds::XY, bounds::XY), d[1].clamp(-bounds::XY, bounds::XY)];
    let quarters = (s.object_angle.quarter as i64 + 1 - s.gripper_angle.quarter as i64) as f64;
    let dtheta = wrap_half_turn(quarters * FRAC_PI_2 + s.object_angle.residual - s.gripper_angle.residual);
    let theta = dtheta.clamp(-bounds::THETA, bounds::THETA);
    let rem = [d[0] - xy[0], d[1] - xy[1]];
    let tol = 0.25 * cfg.grasp_tolerance;
    let aligned = rem[0].abs() <= tol && rem[1].abs() <= tol && (dtheta - theta).abs() < 1e-9;
    if !aligned {
        return FactoredAction::new(0.0, xy, 0.0, theta);
    }
    let z = (-s.gripper_z).max(-bounds::Z);
    FactoredAction::new(1.0, xy, z, theta)
}

/// Behavior policy families used to collect offline data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyTag {
    Expert,
    Medium,
    NearRandom,
}

impl PolicyTag {
    /// `(ε, σ)`: probability of a uniform random action, and Gaussian noise
    /// scale on the normalized expert action otherwise.
    pub fn noise(self) -> (f64, f64) {
        match self {
            PolicyTag::Expert => (0.0, 0.0),
            PolicyTag::Medium => MEDIUM_NOISE,
            PolicyTag::NearRandom => NEAR_RANDOM_NOISE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyTag::Expert => "expert",
            PolicyTag::Medium => "medium",
            PolicyTag::NearRandom => "near-random",
        }
    }
}

impl std::str::FromStr for PolicyTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(PolicyTag::Expert),
            "medium" => Ok(PolicyTag::Medium),
            "near-random" | "near_random" => Ok(PolicyTag::NearRandom),
            _ => Err(Error::Config(format!("unknown policy {s:?}"))),
        }
    }
}

pub const MEDIUM_NOISE: (f64, f64) = (0.6, 0.42);
pub const NEAR_RANDOM_NOISE: (f64, f64) = (0.7, 0.4);

/// Expert action perturbed in normalized coordinates, then clipped.
pub fn noisy_action<R: Rng + ?Sized>(cfg: &EnvConfig, s: &EnvState, eps: f64, sigma: f64, rng: &mut R) -> FactoredAction {
    if eps > 0.0 && rng.random_bool(eps.min(1.0)) {
        let n: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        return bounds::denormalize(n);
    }
    let mut n = bounds::normalize(&expert_action(cfg, s));
    if sigma > 0.0 {
        for v in &mut n {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    bounds::denormalize(n)
}

pub fn behavior_action<R: Rng + ?Sized>(cfg: &EnvConfig, s: &EnvState, tag: PolicyTag, rng: &mut R) -> FactoredAction {
    let (eps, sigma) = tag.noise();
    noisy_action(cfg, s, eps, sigma, rng)
}

/// `Σ_t γ^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Mean discounted return of a behavior policy over `episodes` seeded episodes.
pub fn evaluate_behavior<R: Rng + ?Sized>(
    cfg: &EnvConfig,
    tag: PolicyTag,
    episodes: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut env = GraspEnv::new(cfg.clone())?;
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset(rng);
        let mut rewards = Vec::new();
        loop {
            let a = behavior_action(cfg, env.state(), tag, rng);
            let st = env.step(&a)?;
            rewards.push(st.reward);
            if st.done {
                break;
            }
        }
        total += discounted_return(&rewards, gamma);
    }
    Ok(total / episodes.max(1) as f64)
}
