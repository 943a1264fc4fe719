//! Procedural rasterizer turning trajectories into video clips.
//!
//! The robot is a 3:2:1 box (length along body x) with a contrasting
//! patch on its nose, drawn with the painter's algorithm and shaded by
//! face normal. The camera is fixed for the whole clip and looks at the
//! robot's starting position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip::VideoClip;
use crate::kinematics::{BodyState, ControllerModel, Quat, Trajectory};

pub const BODY_LENGTH: f64 = 0.6;
pub const BODY_WIDTH: f64 = 0.4;
pub const BODY_HEIGHT: f64 = 0.2;

/// Nearest depth in front of the camera that still projects.
pub const NEAR_PLANE: f64 = 0.05;

/// Vertical field of view, radians.
const FIELD_OF_VIEW: f64 = 0.96;
/// Camera elevation above the robot for the two side-on views.
const ELEVATION: f64 = 0.35;
/// Supersampling factor per axis.
const SUPERSAMPLE: usize = 3;

/// Canonical observer placements relative to the robot's start pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViewAngle {
    HeadOn,
    #[serde(rename = "YAW_90")]
    Yaw90,
    #[serde(rename = "PITCH_90")]
    Pitch90,
}

impl ViewAngle {
    pub const ALL: [ViewAngle; 3] = [ViewAngle::HeadOn, ViewAngle::Yaw90, ViewAngle::Pitch90];

    pub fn name(self) -> &'static str {
        match self {
            ViewAngle::HeadOn => "HEAD_ON",
            ViewAngle::Yaw90 => "YAW_90",
            ViewAngle::Pitch90 => "PITCH_90",
        }
    }
}

impl std::str::FromStr for ViewAngle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ViewAngle::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| format!("unknown viewpoint `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub angle: ViewAngle,
    /// Camera distance in meters; three body lengths when unset.
    pub distance: Option<f64>,
}

impl Viewpoint {
    pub fn new(angle: ViewAngle) -> Self {
        Viewpoint {
            angle,
            distance: None,
        }
    }

    pub fn distance(&self) -> f64 {
        self.distance.unwrap_or(3.0 * BODY_LENGTH)
    }
}

impl From<ViewAngle> for Viewpoint {
    fn from(angle: ViewAngle) -> Self {
        Viewpoint::new(angle)
    }
}

/// Background style; the last one is reserved for held-out conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureStyle {
    Seabed,
    Rocks,
    Haze,
    Stripes,
}

/// One environmental variation of the simulated scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvCondition {
    pub condition_id: u32,
    pub background_texture: u64,
    pub texture_style: TextureStyle,
    pub visibility: f64,
    pub robot_color: [f32; 3],
    pub brightness: f64,
    pub pixel_noise_std: f64,
    /// Stands in for hydrodynamic variation when simulating in this condition.
    pub controller: ControllerModel,
}

impl EnvCondition {
    /// A clean condition: full visibility, no noise, ideal controller.
    pub fn clear() -> Self {
        EnvCondition {
            condition_id: 0,
            background_texture: 7,
            texture_style: TextureStyle::Seabed,
            visibility: 1.0,
            robot_color: [0.95, 0.8, 0.1],
            brightness: 0.7,
            pixel_noise_std: 0.0,
            controller: ControllerModel::IDEAL,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.visibility)
            && unit(self.brightness)
            && (0.0..=0.1).contains(&self.pixel_noise_std)
            && self.robot_color.iter().all(|c| (0.0..=1.0).contains(c));
        if ok {
            Ok(())
        } else {
            Err(RenderError::InvalidCondition(self.condition_id))
        }
    }

    fn nose_color(&self) -> [f32; 3] {
        const CANDIDATES: [[f32; 3]; 4] = [
            [0.9, 0.08, 0.08],
            [0.08, 0.2, 0.95],
            [0.97, 0.97, 0.97],
            [0.05, 0.05, 0.05],
        ];
        let dist = |c: &[f32; 3]| -> f32 {
            c.iter()
                .zip(&self.robot_color)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        *CANDIDATES
            .iter()
            .max_by(|a, b| dist(a).total_cmp(&dist(b)))
            .expect("non-empty")
    }
}

#[allow(clippy::too_many_arguments)]
const fn preset(
    id: u32,
    texture: u64,
    visibility: f64,
    robot_color: [f32; 3],
    brightness: f64,
    noise: f64,
    overshoot: f64,
    lag: f64,
    rate_noise: f64,
) -> EnvCondition {
    let style = match id % 3 {
        0 => TextureStyle::Seabed,
        1 => TextureStyle::Rocks,
        _ => TextureStyle::Haze,
    };
    EnvCondition {
        condition_id: id,
        background_texture: texture,
        texture_style: style,
        visibility,
        robot_color,
        brightness,
        pixel_noise_std: noise,
        controller: ControllerModel {
            overshoot_gain: overshoot,
            lag_time_constant: lag,
            rate_noise_std: rate_noise,
        },
    }
}

/// The 25 training conditions.
pub const CONDITIONS: [EnvCondition; 25] = [
    preset(0, 0xaf5f29f6, 0.81, [0.95, 0.8, 0.1], 0.59, 0.01, 0.3, 0.0, 0.08),
    preset(1, 0xd04577bb, 0.85, [0.95, 0.55, 0.1], 0.8, 0.02, 0.1, 0.1, 0.0),
    preset(2, 0xedfa6d5d, 0.9, [0.9, 0.9, 0.85], 0.5, 0.01, 0.1, 0.1, 0.0),
    preset(3, 0x6bacdef6, 0.77, [0.85, 0.2, 0.15], 0.59, 0.0, 0.0, 0.03, 0.08),
    preset(4, 0x46c36a27, 0.63, [0.55, 0.55, 0.6], 0.41, 0.0, 0.3, 0.1, 0.08),
    preset(5, 0xee2b1e1f, 0.97, [0.2, 0.6, 0.25], 0.82, 0.03, 0.1, 0.1, 0.05),
    preset(6, 0x8a337221, 0.98, [0.95, 0.4, 0.6], 0.59, 0.0, 0.0, 0.1, 0.05),
    preset(7, 0x69d15d3b, 0.77, [0.3, 0.3, 0.35], 0.4, 0.0, 0.3, 0.03, 0.0),
    preset(8, 0x9da23b5b, 0.76, [0.6, 0.4, 0.9], 0.89, 0.02, 0.3, 0.03, 0.05),
    preset(9, 0x20819538, 0.77, [0.8, 0.75, 0.3], 0.44, 0.005, 0.0, 0.0, 0.08),
    preset(10, 0x8c007efb, 0.85, [0.85, 0.41, 0.7], 0.59, 0.005, 0.1, 0.03, 0.05),
    preset(11, 0x7f4d1827, 0.79, [0.14, 0.63, 0.35], 0.72, 0.02, 0.2, 0.03, 0.08),
    preset(12, 0xd668d109, 0.75, [0.88, 0.12, 0.2], 0.4, 0.01, 0.3, 0.06, 0.02),
    preset(13, 0x50e46dd4, 0.67, [0.65, 0.6, 0.67], 0.47, 0.01, 0.0, 0.0, 0.02),
    preset(14, 0x6e566a9a, 0.87, [0.98, 0.84, 0.08], 0.72, 0.03, 0.2, 0.0, 0.02),
    preset(15, 0xeca3e6d3, 0.72, [0.95, 0.12, 0.07], 0.53, 0.02, 0.1, 0.1, 0.0),
    preset(16, 0x0f02d0d4, 0.69, [0.91, 0.3, 0.19], 0.62, 0.01, 0.0, 0.1, 0.08),
    preset(17, 0x786a0c5a, 0.68, [0.83, 0.76, 0.12], 0.47, 0.03, 0.1, 0.06, 0.05),
    preset(18, 0xf829e0e5, 0.66, [1.0, 0.43, 0.65], 0.89, 0.03, 0.3, 0.0, 0.0),
    preset(19, 0xdf43ec09, 0.95, [1.0, 0.87, 0.16], 0.55, 0.005, 0.2, 0.03, 0.02),
    preset(20, 0xab471e9f, 0.99, [0.18, 0.34, 0.26], 0.77, 0.0, 0.0, 0.1, 0.0),
    preset(21, 0x475c9b07, 0.77, [0.93, 0.31, 0.21], 0.84, 0.02, 0.0, 0.0, 0.02),
    preset(22, 0xf38b40a4, 0.62, [0.48, 0.5, 0.54], 0.49, 0.01, 0.2, 0.1, 0.08),
    preset(23, 0x552ded4e, 0.79, [0.86, 0.64, 0.2], 0.79, 0.03, 0.2, 0.06, 0.0),
    preset(24, 0x498672fb, 0.93, [0.9, 0.26, 0.19], 0.43, 0.005, 0.1, 0.06, 0.05),
];

/// Held-out conditions: unseen background style, murkier water, more
/// sensor noise and a sloppier controller.
pub fn hard_conditions() -> Vec<EnvCondition> {
    let rows: [(u64, f64, [f32; 3], f64, f64); 5] = [
        (0x1badb002, 0.55, [0.95, 0.8, 0.1], 0.45, 0.05),
        (0x5eed5eed, 0.5, [0.7, 0.7, 0.75], 0.6, 0.06),
        (0xc0ffee11, 0.6, [0.95, 0.45, 0.1], 0.35, 0.05),
        (0x0ddba11, 0.5, [0.85, 0.25, 0.2], 0.7, 0.07),
        (0xfeedface, 0.55, [0.9, 0.9, 0.8], 0.5, 0.06),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(tex, vis, color, bright, noise))| EnvCondition {
            condition_id: 100 + i as u32,
            background_texture: tex,
            texture_style: TextureStyle::Stripes,
            visibility: vis,
            robot_color: color,
            brightness: bright,
            pixel_noise_std: noise,
            controller: ControllerModel {
                overshoot_gain: 0.5,
                lag_time_constant: 0.15,
                rate_noise_std: 0.12,
            },
        })
        .collect()
}

/// Looks up a condition by id among the standard and held-out presets.
pub fn condition_by_id(id: u32) -> Option<EnvCondition> {
    CONDITIONS
        .iter()
        .copied()
        .chain(hard_conditions())
        .find(|c| c.condition_id == id)
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("resolution {0}x{1} is below the 16x16 minimum")]
    Resolution(usize, usize),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("robot is behind the camera from the first frame")]
    DegenerateProjection,
    #[error("condition {0} has parameters out of range")]
    InvalidCondition(u32),
}

/// A rendered clip plus the frame at which rendering stopped, if the
/// robot crossed behind the camera plane.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub clip: VideoClip,
    pub degenerate_at: Option<usize>,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Pinhole camera; image rows grow downwards.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    eye: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
    focal: f64,
    cx: f64,
    cy: f64,
}

impl Camera {
    /// Camera for `viewpoint` rendering an image of `height x width` pixels.
    pub fn new(viewpoint: &Viewpoint, height: usize, width: usize) -> Self {
        let d = viewpoint.distance();
        let (ce, se) = (ELEVATION.cos(), ELEVATION.sin());
        // World is north-east-down, so "up" is -z.
        let (eye, up_hint) = match viewpoint.angle {
            ViewAngle::HeadOn => ([d * ce, 0.0, -d * se], [0.0, 0.0, -1.0]),
            ViewAngle::Yaw90 => ([0.0, d * ce, -d * se], [0.0, 0.0, -1.0]),
            ViewAngle::Pitch90 => ([0.0, 0.0, -d], [1.0, 0.0, 0.0]),
        };
        let forward = normalize(sub([0.0; 3], eye));
        let right = normalize(cross(forward, up_hint));
        let up = cross(right, forward);
        let focal = 0.5 * height as f64 / (0.5 * FIELD_OF_VIEW).tan();
        Camera {
            eye,
            right,
            up,
            forward,
            focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    /// Image coordinates `(column, row)` and depth of a world point, or
    /// `None` if it is not in front of the near plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let rel = sub(p, self.eye);
        let depth = dot(rel, self.forward);
        if depth < NEAR_PLANE {
            return None;
        }
        let u = self.cx + self.focal * dot(rel, self.right) / depth;
        let v = self.cy - self.focal * dot(rel, self.up) / depth;
        Some((u, v, depth))
    }

    pub fn eye(&self) -> [f64; 3] {
        self.eye
    }
}

/// World position of a body-frame point for a given pose.
pub fn body_to_world(state: &BodyState, p: [f64; 3]) -> [f64; 3] {
    let r = state.orientation.rotate(p);
    [
        r[0] + state.position[0],
        r[1] + state.position[1],
        r[2] + state.position[2],
    ]
}

/// Body-frame center of the nose patch.
pub const NOSE_CENTER: [f64; 3] = [0.5 * BODY_LENGTH + 0.002, 0.0, 0.0];

struct Polygon {
    pts: [(f64, f64); 4],
    color: [f32; 3],
    depth: f64,
}

fn box_faces() -> [([f64; 3], [[f64; 3]; 4]); 6] {
    let (l, w, h) = (0.5 * BODY_LENGTH, 0.5 * BODY_WIDTH, 0.5 * BODY_HEIGHT);
    [
        ([1.0, 0.0, 0.0], [[l, -w, -h], [l, w, -h], [l, w, h], [l, -w, h]]),
        ([-1.0, 0.0, 0.0], [[-l, -w, -h], [-l, -w, h], [-l, w, h], [-l, w, -h]]),
        ([0.0, 1.0, 0.0], [[-l, w, -h], [-l, w, h], [l, w, h], [l, w, -h]]),
        ([0.0, -1.0, 0.0], [[-l, -w, -h], [l, -w, -h], [l, -w, h], [-l, -w, h]]),
        ([0.0, 0.0, 1.0], [[-l, -w, h], [l, -w, h], [l, w, h], [-l, w, h]]),
        ([0.0, 0.0, -1.0], [[-l, -w, -h], [-l, w, -h], [l, w, -h], [l, -w, -h]]),
    ]
}

fn nose_patch() -> [[f64; 3]; 4] {
    let x = NOSE_CENTER[0];
    let (w, h) = (0.3 * BODY_WIDTH, 0.3 * BODY_HEIGHT);
    [[x, -w, -h], [x, w, -h], [x, w, h], [x, -w, h]]
}

fn hash64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = hash64(seed ^ hash64((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ (iy as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bottom = c + (d - c) * sx;
    top + (bottom - top) * sy
}

fn water_colors(env: &EnvCondition) -> ([f32; 3], [f32; 3]) {
    let seed = env.background_texture;
    let r = |k: u64| lattice(seed, 1000 + k as i64, -7) as f32;
    let top = [0.12 + 0.15 * r(0), 0.45 + 0.25 * r(1), 0.55 + 0.3 * r(2)];
    let deep = [0.02 + 0.06 * r(3), 0.15 + 0.2 * r(4), 0.25 + 0.25 * r(5)];
    (top, deep)
}

/// Static background image, `3 x height x width`.
fn background(env: &EnvCondition, height: usize, width: usize) -> Vec<f32> {
    let (top, deep) = water_colors(env);
    let seed = env.background_texture;
    let mut out = vec![0.0f32; 3 * height * width];
    let sand = [
        0.55 + 0.2 * lattice(seed, 3, 3) as f32,
        0.5 + 0.15 * lattice(seed, 4, 4) as f32,
        0.35 + 0.15 * lattice(seed, 5, 5) as f32,
    ];
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
            let grad = fy as f32;
            let mut c: [f32; 3] = std::array::from_fn(|i| top[i] + (deep[i] - top[i]) * grad);
            let n = value_noise(seed, fx * 6.0, fy * 6.0) as f32;
            let fine = value_noise(seed ^ 0xabcd, fx * 14.0, fy * 14.0) as f32;
            match env.texture_style {
                TextureStyle::Seabed => {
                    let horizon = 0.62 + 0.08 * (value_noise(seed, fx * 3.0, 0.5) as f32 - 0.5);
                    if (fy as f32) > horizon {
                        let t = 0.75 + 0.5 * fine;
                        c = std::array::from_fn(|i| sand[i] * t * (0.6 + 0.4 * n));
                    } else {
                        c = c.map(|v| v * (0.85 + 0.3 * n));
                    }
                }
                TextureStyle::Rocks => {
                    let k = if n > 0.62 { 0.35 + 0.4 * fine } else { 0.9 + 0.2 * n };
                    c = c.map(|v| v * k);
                }
                TextureStyle::Haze => {
                    let glow = 0.25 * n + 0.1 * fine;
                    c = c.map(|v| v + glow * (1.0 - v) * 0.6);
                }
                TextureStyle::Stripes => {
                    let phase = (fx * 9.0 + fy * 4.0 + 3.0 * n as f64) * std::f64::consts::PI;
                    let k = if phase.sin() > 0.0 { 1.35 } else { 0.55 };
                    c = c.map(|v| v * k as f32);
                }
            }
            for (i, v) in c.iter().enumerate() {
                out[(i * height + y) * width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn fill_polygon(
    poly: &Polygon,
    buf: &mut [f32],
    covered: &mut [bool],
    height: usize,
    width: usize,
) {
    let xs = poly.pts.iter().map(|p| p.0);
    let ys = poly.pts.iter().map(|p| p.1);
    let min_x = xs.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_x = xs.fold(f64::NEG_INFINITY, f64::max).ceil().min(width as f64) as usize;
    let min_y = ys.clone().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_y = ys.fold(f64::NEG_INFINITY, f64::max).ceil().min(height as f64) as usize;
    let pts = &poly.pts;
    for y in min_y..max_y {
        for x in min_x..max_x {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let e: [f64; 4] = std::array::from_fn(|i| edge(pts[i], pts[(i + 1) % 4], p));
            let inside = e.iter().all(|&v| v >= 0.0) || e.iter().all(|&v| v <= 0.0);
            if inside {
                let idx = y * width + x;
                covered[idx] = true;
                for c in 0..3 {
                    buf[c * height * width + idx] = poly.color[c];
                }
            }
        }
    }
}

fn box_blur(img: &mut [f32], height: usize, width: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let mut tmp = vec![0.0f32; height * width];
    for plane in img.chunks_mut(height * width) {
        for y in 0..height {
            for x in 0..width {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(width - 1);
                let s: f32 = plane[y * width + lo..=y * width + hi].iter().sum();
                tmp[y * width + x] = s / (hi - lo + 1) as f32;
            }
        }
        for y in 0..height {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(height - 1);
            for x in 0..width {
                let s: f32 = (lo..=hi).map(|yy| tmp[yy * width + x]).sum();
                plane[y * width + x] = s / (hi - lo + 1) as f32;
            }
        }
    }
}

/// Pixel-space blur radius implied by a visibility level.
fn blur_radius(visibility: f64, width: usize) -> usize {
    ((1.0 - visibility) * 2.5 * width as f64 / 40.0).round() as usize
}

/// Rasterizes the robot for one pose; `None` when a vertex is behind the camera.
fn robot_polygons(
    state: &BodyState,
    camera: &Camera,
    env: &EnvCondition,
    water: [f32; 3],
) -> Option<Vec<Polygon>> {
    let light = normalize([0.3, 0.2, -1.0]);
    let attenuation = 1.2 * (1.0 - env.visibility);
    let eye = camera.eye();
    let tint = |color: [f32; 3], shade: f64, depth: f64| -> [f32; 3] {
        let keep = (-attenuation * depth).exp() as f32;
        std::array::from_fn(|i| water[i] + (color[i] * shade as f32 - water[i]) * keep)
    };

    let mut polys = Vec::with_capacity(7);
    let mut front_visible = None;
    for (face_idx, (normal, corners)) in box_faces().iter().enumerate() {
        let world: Vec<[f64; 3]> = corners.iter().map(|&c| body_to_world(state, c)).collect();
        let mut pts = [(0.0, 0.0); 4];
        let mut depth = 0.0;
        for (i, w) in world.iter().enumerate() {
            let (u, v, d) = camera.project(*w)?;
            pts[i] = (u, v);
            depth += 0.25 * d;
        }
        let n = state.orientation.rotate(*normal);
        let center = body_to_world(state, [
            0.5 * BODY_LENGTH * normal[0],
            0.5 * BODY_WIDTH * normal[1],
            0.5 * BODY_HEIGHT * normal[2],
        ]);
        if dot(n, sub(eye, center)) <= 0.0 {
            continue;
        }
        let shade = 0.35 + 0.65 * dot(n, light).max(0.0);
        if face_idx == 0 {
            front_visible = Some((shade, depth));
        }
        polys.push(Polygon {
            pts,
            color: tint(env.robot_color, shade, depth),
            depth,
        });
    }
    // Far faces first; ties keep face order.
    polys.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    if let Some((shade, depth)) = front_visible {
        let mut pts = [(0.0, 0.0); 4];
        for (i, c) in nose_patch().iter().enumerate() {
            let (u, v, _) = camera.project(body_to_world(state, *c))?;
            pts[i] = (u, v);
        }
        polys.push(Polygon {
            pts,
            color: tint(env.nose_color(), shade, depth),
            depth,
        });
    }
    Some(polys)
}

/// Renders one frame into `out` (`3 x height x width`); returns false if
/// the pose cannot be projected.
fn render_frame(
    state: &BodyState,
    camera: &Camera,
    env: &EnvCondition,
    bg: &[f32],
    water: [f32; 3],
    height: usize,
    width: usize,
    out: &mut [f32],
) -> bool {
    let Some(polys) = robot_polygons(state, camera, env, water) else {
        return false;
    };
    let (sh, sw) = (height * SUPERSAMPLE, width * SUPERSAMPLE);
    let mut buf = vec![0.0f32; 3 * sh * sw];
    let mut covered = vec![false; sh * sw];
    for p in &polys {
        fill_polygon(p, &mut buf, &mut covered, sh, sw);
    }
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for c in 0..3 {
        for y in 0..height {
            for x in 0..width {
                let bgv = bg[(c * height + y) * width + x];
                let mut acc = 0.0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let idx = (y * SUPERSAMPLE + sy) * sw + x * SUPERSAMPLE + sx;
                        acc += if covered[idx] { buf[c * sh * sw + idx] } else { bgv };
                    }
                }
                out[(c * height + y) * width + x] = acc * norm;
            }
        }
    }
    true
}

/// Renders `traj` from `viewpoint` under `env` at `height x width`.
pub fn render_clip(
    traj: &Trajectory,
    viewpoint: &Viewpoint,
    env: &EnvCondition,
    (height, width): (usize, usize),
    seed: u64,
) -> Result<Rendered, RenderError> {
    if height < 16 || width < 16 {
        return Err(RenderError::Resolution(height, width));
    }
    if traj.is_empty() {
        return Err(RenderError::EmptyTrajectory);
    }
    env.validate()?;
    let (sh, sw) = (height * SUPERSAMPLE, width * SUPERSAMPLE);
    let camera = Camera::new(viewpoint, sh, sw);
    let bg = background(env, height, width);
    let (top, deep) = water_colors(env);
    let water: [f32; 3] = std::array::from_fn(|i| 0.5 * (top[i] + deep[i]));
    let frame_len = 3 * height * width;
    let gain = (0.55 + 0.7 * env.brightness) as f32;
    let radius = blur_radius(env.visibility, width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (env.pixel_noise_std > 0.0)
        .then(|| Normal::new(0.0f32, env.pixel_noise_std as f32).expect("finite std"));

    let mut frames = Vec::with_capacity(traj.len() * frame_len);
    let mut degenerate_at = None;
    let mut frame = vec![0.0f32; frame_len];
    for (i, state) in traj.samples.iter().enumerate() {
        if !render_frame(state, &camera, env, &bg, water, height, width, &mut frame) {
            degenerate_at = Some(i);
            break;
        }
        box_blur(&mut frame, height, width, radius);
        for v in frame.iter_mut() {
            let mut x = *v * gain;
            if let Some(n) = &noise {
                x += n.sample(&mut rng);
            }
            *v = x.clamp(0.0, 1.0);
        }
        frames.extend_from_slice(&frame);
    }
    if let Some(i) = degenerate_at {
        if i == 0 {
            return Err(RenderError::DegenerateProjection);
        }
        log::warn!("robot crossed the camera plane; clip truncated at frame {i}");
    }
    let t = frames.len() / frame_len;
    let clip = VideoClip::new(frames, [t, 3, height, width], traj.fps, None)
        .expect("renderer produces consistent dims");
    Ok(Rendered {
        clip,
        degenerate_at,
    })
}

/// Image position of the nose patch center and the body center for a pose.
pub fn project_marker(
    state: &BodyState,
    viewpoint: &Viewpoint,
    (height, width): (usize, usize),
) -> Option<((f64, f64), (f64, f64))> {
    let cam = Camera::new(viewpoint, height, width);
    let (nu, nv, _) = cam.project(body_to_world(state, NOSE_CENTER))?;
    let (bu, bv, _) = cam.project(body_to_world(state, [0.0; 3]))?;
    Some(((nu, nv), (bu, bv)))
}

/// Convenience pose with a given orientation at the origin.
pub fn pose(orientation: Quat) -> BodyState {
    BodyState {
        orientation,
        ..BodyState::initial()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{bundled_library, MessageId};
    use crate::kinematics::{simulate, RobotProfile};

    #[test]
    fn presets_valid_and_distinct() {
        let mut ids: Vec<u32> = CONDITIONS.iter().map(|c| c.condition_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 25);
        assert_eq!(ids, (0..25).collect::<Vec<_>>());
        for c in CONDITIONS.iter().chain(hard_conditions().iter()) {
            c.validate().unwrap();
        }
        assert!(hard_conditions().iter().all(|c| c.texture_style == TextureStyle::Stripes));
        assert!(CONDITIONS.iter().all(|c| c.texture_style != TextureStyle::Stripes));
    }

    #[test]
    fn static_scene_frames_identical() {
        let traj = Trajectory::stationary(10.0, 5);
        for env in [CONDITIONS[3], CONDITIONS[7]] {
            let clip = render_clip(&traj, &ViewAngle::HeadOn.into(), &env, (24, 32), 5)
                .unwrap()
                .clip;
            assert_eq!(clip.dims(), [5, 3, 24, 32]);
            if env.pixel_noise_std == 0.0 {
                for i in 1..5 {
                    assert_eq!(clip.frame(i), clip.frame(0));
                }
            }
        }
    }

    #[test]
    fn noise_depends_on_seed_only_when_enabled() {
        let traj = simulate(&bundled_library()[&MessageId::No], &RobotProfile::default(), 5.0, 0).unwrap();
        let noisy = CONDITIONS[5];
        assert!(noisy.pixel_noise_std > 0.0);
        let a = render_clip(&traj, &ViewAngle::Yaw90.into(), &noisy, (32, 32), 1).unwrap().clip;
        let b = render_clip(&traj, &ViewAngle::Yaw90.into(), &noisy, (32, 32), 2).unwrap().clip;
        let a2 = render_clip(&traj, &ViewAngle::Yaw90.into(), &noisy, (32, 32), 1).unwrap().clip;
        assert_ne!(a.frames, b.frames);
        assert_eq!(a.frames, a2.frames);
        let clean = EnvCondition { pixel_noise_std: 0.0, ..noisy };
        let c = render_clip(&traj, &ViewAngle::Yaw90.into(), &clean, (32, 32), 1).unwrap().clip;
        let d = render_clip(&traj, &ViewAngle::Yaw90.into(), &clean, (32, 32), 2).unwrap().clip;
        assert_eq!(c.frames, d.frames);
    }

    #[test]
    fn pixels_in_unit_range_and_frame_count() {
        let lib = bundled_library();
        for (i, env) in CONDITIONS.iter().enumerate().step_by(4) {
            let id = MessageId::ALL[i % 15];
            let traj = simulate(&lib[&id], &RobotProfile::default(), 4.0, 0).unwrap();
            let r = render_clip(&traj, &ViewAngle::ALL[i % 3].into(), env, (20, 28), 0).unwrap();
            assert!(r.clip.frames.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(r.clip.t, r.degenerate_at.unwrap_or(traj.len()));
        }
    }

    #[test]
    fn robot_is_visible() {
        let traj = Trajectory::stationary(10.0, 1);
        let env = EnvCondition::clear();
        for view in ViewAngle::ALL {
            let with = render_clip(&traj, &view.into(), &env, (32, 32), 0).unwrap().clip;
            let far = Viewpoint {
                angle: view,
                distance: Some(1e4),
            };
            let without = render_clip(&traj, &far, &env, (32, 32), 0).unwrap().clip;
            let changed = with
                .frames
                .iter()
                .zip(&without.frames)
                .filter(|(a, b)| (*a - *b).abs() > 0.05)
                .count();
            // Robot covers a reasonable share of the frame from every view.
            assert!(changed > 3 * 40, "{view:?}: {changed}");
        }
    }

    #[test]
    fn behind_camera_truncates() {
        let mut traj = Trajectory::stationary(10.0, 6);
        for (k, s) in traj.samples.iter_mut().enumerate() {
            s.position[0] = 0.5 * k as f64;
        }
        let r = render_clip(&traj, &ViewAngle::HeadOn.into(), &EnvCondition::clear(), (16, 16), 0).unwrap();
        let cut = r.degenerate_at.expect("robot passes the camera");
        assert_eq!(r.clip.t, cut);
        assert!(cut >= 1 && cut < 6);
    }

    #[test]
    fn rejects_small_resolution() {
        let traj = Trajectory::stationary(10.0, 1);
        assert!(matches!(
            render_clip(&traj, &ViewAngle::HeadOn.into(), &EnvCondition::clear(), (15, 32), 0),
            Err(RenderError::Resolution(15, 32))
        ));
    }

    #[test]
    fn u_turn_moves_nose_to_other_side() {
        let traj = simulate(&bundled_library()[&MessageId::UTurn], &RobotProfile::default(), 10.0, 0).unwrap();
        let view = ViewAngle::Yaw90.into();
        let side = |s: &BodyState| {
            let ((nu, _), (bu, _)) = project_marker(s, &view, (64, 64)).unwrap();
            nu - bu
        };
        let (start, end) = (side(&traj.samples[0]), side(traj.last()));
        assert!(start.abs() > 2.0, "{start}");
        assert!(start * end < 0.0, "{start} {end}");
        assert!((start + end).abs() < 0.25 * start.abs(), "{start} {end}");
    }
}
