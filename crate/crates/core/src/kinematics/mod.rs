//! Rigid-body execution of gesture scripts.
//!
//! Frames: body axes are forward-right-down, so positive roll dips the
//! right side, positive pitch raises the nose and positive yaw turns
//! right. The world frame is north-east-down and the robot starts at the
//! origin with identity orientation. Heave is positive upwards.

mod quat;

pub use quat::Quat;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::GestureScript;

/// Imperfect tracking of commanded body rates.
///
/// Each channel follows its command through a second-order response with
/// natural time constant `lag_time_constant` and damping
/// `1 / (1 + overshoot_gain)`, so a positive gain makes achieved rates
/// (and therefore angles) overshoot. `rate_noise_std` adds zero-mean
/// Gaussian noise to the angular rates, held for [`NOISE_HOLD`] seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerModel {
    pub overshoot_gain: f64,
    pub lag_time_constant: f64,
    pub rate_noise_std: f64,
}

impl ControllerModel {
    pub const IDEAL: ControllerModel = ControllerModel {
        overshoot_gain: 0.0,
        lag_time_constant: 0.0,
        rate_noise_std: 0.0,
    };

    pub fn is_ideal(&self) -> bool {
        self.lag_time_constant == 0.0 && self.rate_noise_std == 0.0
    }

    fn validate(&self) -> Result<(), KinematicsError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.overshoot_gain) && ok(self.lag_time_constant) && ok(self.rate_noise_std) {
            Ok(())
        } else {
            Err(KinematicsError::InvalidProfile(format!("{self:?}")))
        }
    }
}

impl Default for ControllerModel {
    fn default() -> Self {
        Self::IDEAL
    }
}

/// Seconds each noise sample is held for.
pub const NOISE_HOLD: f64 = 0.1;

/// Controller substeps per frame interval when the controller is not ideal.
const SUBSTEPS_PER_FRAME: f64 = 8.0;

/// Physical rate limits the script percentages are scaled by.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotProfile {
    pub max_roll_rate: f64,
    pub max_pitch_rate: f64,
    pub max_yaw_rate: f64,
    pub max_surge: f64,
    pub max_heave: f64,
    pub controller: ControllerModel,
}

impl Default for RobotProfile {
    fn default() -> Self {
        RobotProfile {
            max_roll_rate: 4.8,
            max_pitch_rate: 2.0,
            max_yaw_rate: 2.2,
            max_surge: 1.0,
            max_heave: 0.5,
            controller: ControllerModel::IDEAL,
        }
    }
}

impl RobotProfile {
    pub fn with_controller(mut self, controller: ControllerModel) -> Self {
        self.controller = controller;
        self
    }

    fn maxima(&self) -> [f64; 5] {
        [
            self.max_roll_rate,
            self.max_pitch_rate,
            self.max_yaw_rate,
            self.max_surge,
            self.max_heave,
        ]
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.maxima().iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(KinematicsError::InvalidProfile(
                "all maximum rates must be positive".into(),
            ));
        }
        self.controller.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let p: RobotProfile =
            serde_json::from_str(text).map_err(|e| KinematicsError::InvalidProfile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("fps must be positive and finite, got {0}")]
    InvalidFps(f64),
    #[error("invalid robot profile: {0}")]
    InvalidProfile(String),
}

/// Pose and rates at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub t: f64,
    pub position: [f64; 3],
    pub orientation: Quat,
    /// Commanded roll, pitch, yaw (rad/s), surge, heave (m/s).
    pub commanded: [f64; 5],
    /// Rates actually achieved after the controller model.
    pub achieved: [f64; 5],
    /// Integral of achieved roll, pitch and yaw rates since t = 0.
    pub accumulated: [f64; 3],
}

impl BodyState {
    pub fn initial() -> Self {
        BodyState {
            t: 0.0,
            position: [0.0; 3],
            orientation: Quat::IDENTITY,
            commanded: [0.0; 5],
            achieved: [0.0; 5],
            accumulated: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub fps: f64,
    pub samples: Vec<BodyState>,
}

impl Trajectory {
    /// A trajectory holding the initial pose for `len` samples.
    pub fn stationary(fps: f64, len: usize) -> Self {
        let samples = (0..len.max(1))
            .map(|k| BodyState {
                t: k as f64 / fps,
                ..BodyState::initial()
            })
            .collect();
        Trajectory { fps, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> &BodyState {
        self.samples.last().expect("trajectory is never empty")
    }

    /// CSV with one row per sample: `t,x,y,z,qw,qx,qy,qz`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,y,z,qw,qx,qy,qz")?;
        for s in &self.samples {
            let [x, y, z] = s.position;
            let Quat { w, x: qx, y: qy, z: qz } = s.orientation;
            writeln!(out, "{},{x},{y},{z},{w},{qx},{qy},{qz}", s.t)?;
        }
        Ok(())
    }
}

/// Number of samples a clip of `duration` seconds has at `fps`.
pub fn sample_count(duration: f64, fps: f64) -> usize {
    // Tolerate representation error in products like 3.18 * 50.
    (duration * fps + 1e-9).floor() as usize + 1
}

/// Advances `q` by a constant body-frame angular velocity for `dt` seconds.
pub fn integrate_orientation(q: Quat, body_rates: [f64; 3], dt: f64) -> Quat {
    let step = Quat::from_rotation_vector([
        body_rates[0] * dt,
        body_rates[1] * dt,
        body_rates[2] * dt,
    ]);
    (q * step).normalized()
}

#[derive(Debug, Clone, Copy, Default)]
struct ChannelState {
    rate: f64,
    accel: f64,
}

struct Integrator<'a> {
    script: &'a GestureScript,
    bounds: Vec<f64>,
    maxima: [f64; 5],
    controller: ControllerModel,
    noise: Vec<[f64; 3]>,
    frame_dt: f64,
    channels: [ChannelState; 5],
    state: BodyState,
}

impl<'a> Integrator<'a> {
    fn segment_at(&self, t: f64) -> usize {
        let n = self.script.segments.len();
        match self.bounds[1..].iter().position(|&b| t < b) {
            Some(i) => i,
            None => n - 1,
        }
    }

    fn command_at(&self, t: f64) -> [f64; 5] {
        let seg = &self.script.segments[self.segment_at(t)];
        let pct = [
            seg.roll_pct,
            seg.pitch_pct,
            seg.yaw_pct,
            seg.surge_pct,
            seg.heave_pct,
        ];
        std::array::from_fn(|i| pct[i] / 100.0 * self.maxima[i])
    }

    fn noise_at(&self, t: f64) -> [f64; 3] {
        if self.noise.is_empty() {
            return [0.0; 3];
        }
        let idx = ((t / NOISE_HOLD).floor() as usize).min(self.noise.len() - 1);
        self.noise[idx]
    }

    /// Updates the controller over `h` seconds and returns the achieved rates.
    fn track(&mut self, cmd: [f64; 5], h: f64) -> [f64; 5] {
        let tau = self.controller.lag_time_constant;
        if tau == 0.0 {
            for (c, &v) in self.channels.iter_mut().zip(&cmd) {
                *c = ChannelState { rate: v, accel: 0.0 };
            }
            return cmd;
        }
        let wn = 1.0 / tau;
        let zeta = 1.0 / (1.0 + self.controller.overshoot_gain);
        let mut out = [0.0; 5];
        for i in 0..5 {
            let ch = &mut self.channels[i];
            // Semi-implicit Euler on r'' = wn^2 (c - r) - 2 zeta wn r'.
            let acc = wn * wn * (cmd[i] - ch.rate) - 2.0 * zeta * wn * ch.accel;
            ch.accel += h * acc;
            ch.rate += h * ch.accel;
            out[i] = ch.rate;
        }
        out
    }

    fn advance(&mut self, rates: [f64; 5], dt: f64) {
        let s = &mut self.state;
        let omega = [rates[0], rates[1], rates[2]];
        let mid = integrate_orientation(s.orientation, omega, 0.5 * dt);
        let v = mid.rotate([rates[3], 0.0, -rates[4]]);
        for i in 0..3 {
            s.position[i] += v[i] * dt;
            s.accumulated[i] += omega[i] * dt;
        }
        s.orientation = integrate_orientation(s.orientation, omega, dt);
        s.achieved = rates;
    }

    /// Integrates from the current time to `t_end`, splitting at every
    /// segment and noise boundary so piecewise-constant inputs are exact.
    fn run_to(&mut self, t_end: f64) {
        let mut t = self.state.t;
        while t < t_end - 1e-12 {
            let mut next = t_end;
            if let Some(&b) = self.bounds.iter().find(|&&b| b > t + 1e-12) {
                next = next.min(b);
            }
            if !self.noise.is_empty() {
                let mut k = (t / NOISE_HOLD).floor() + 1.0;
                while k * NOISE_HOLD <= t + 1e-12 {
                    k += 1.0;
                }
                next = next.min(k * NOISE_HOLD);
            }
            let mid = 0.5 * (t + next);
            let cmd = self.command_at(mid);
            let noise = self.noise_at(mid);
            let span = next - t;
            let pieces = if self.controller.is_ideal() {
                1
            } else {
                (span * SUBSTEPS_PER_FRAME / self.frame_dt - 1e-9).ceil().max(1.0) as usize
            };
            let h = span / pieces as f64;
            for _ in 0..pieces {
                let mut rates = self.track(cmd, h);
                for i in 0..3 {
                    rates[i] += noise[i];
                }
                self.advance(rates, h);
            }
            self.state.commanded = cmd;
            t = next;
        }
        self.state.t = t_end;
    }
}

/// Executes `script` on `profile`, sampling the pose at `fps`.
pub fn simulate(
    script: &GestureScript,
    profile: &RobotProfile,
    fps: f64,
    seed: u64,
) -> Result<Trajectory, KinematicsError> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(KinematicsError::InvalidFps(fps));
    }
    profile.validate()?;
    let total = script.total_duration();
    let count = sample_count(total, fps);

    let controller = profile.controller;
    let noise = if controller.rate_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, controller.rate_noise_std).expect("finite std");
        let n = (total / NOISE_HOLD).ceil() as usize + 1;
        (0..n)
            .map(|_| std::array::from_fn(|_| dist.sample(&mut rng)))
            .collect()
    } else {
        Vec::new()
    };

    let mut integ = Integrator {
        script,
        bounds: script.segment_boundaries(),
        maxima: profile.maxima(),
        controller,
        noise,
        frame_dt: 1.0 / fps,
        channels: [ChannelState::default(); 5],
        state: BodyState::initial(),
    };
    let first = integ.command_at(0.0);
    integ.state.commanded = first;
    if controller.lag_time_constant == 0.0 {
        integ.state.achieved = first;
    }

    let mut samples = Vec::with_capacity(count);
    samples.push(integ.state);
    for k in 1..count {
        integ.run_to(k as f64 / fps);
        samples.push(integ.state);
    }
    Ok(Trajectory { fps, samples })
}
