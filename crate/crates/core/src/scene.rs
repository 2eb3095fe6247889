//! Procedural world: device placement, target trajectories, obstacles,
//! occlusion, pinhole rendering and ground-truth motion parameters.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetClass {
    Car,
    RobotDog,
    Drone,
}

impl TargetClass {
    pub const ALL: [TargetClass; 3] = [TargetClass::Car, TargetClass::RobotDog, TargetClass::Drone];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn rcs(self) -> f64 {
        match self {
            TargetClass::Car => 100.0,
            TargetClass::RobotDog => 10.0,
            TargetClass::Drone => 1.0,
        }
    }

    /// Nominal speed in m/s before jitter.
    pub fn speed(self) -> f64 {
        match self {
            TargetClass::Car => 10.0,
            TargetClass::RobotDog => 2.0,
            TargetClass::Drone => 5.0,
        }
    }

    /// Physical radius used for rendering, in metres.
    pub fn radius(self) -> f64 {
        match self {
            TargetClass::Car => 2.0,
            TargetClass::RobotDog => 0.6,
            TargetClass::Drone => 0.5,
        }
    }

    /// BGR colour.
    pub fn color(self) -> [u8; 3] {
        match self {
            TargetClass::Car => [0, 0, 255],
            TargetClass::RobotDog => [0, 255, 0],
            TargetClass::Drone => [255, 0, 0],
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl ObstacleBox {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Slab test for the closed segment `a -> b`.
    pub fn intersects_segment(&self, a: Vec3, b: Vec3) -> bool {
        let d = sub(b, a);
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if a[i] < self.min[i] || a[i] > self.max[i] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[i];
                let (mut ta, mut tb) = ((self.min[i] - a[i]) * inv, (self.max[i] - a[i]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            [a[0], a[1], a[2]],
            [b[0], a[1], a[2]],
            [a[0], b[1], a[2]],
            [b[0], b[1], a[2]],
            [a[0], a[1], b[2]],
            [b[0], a[1], b[2]],
            [a[0], b[1], b[2]],
            [b[0], b[1], b[2]],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// x extent, y extent and ceiling, in metres.
    pub arena: Vec3,
    pub num_devices: usize,
    pub num_targets: usize,
    pub obstacles: Vec<ObstacleBox>,
    pub duration_s: f64,
    pub frame_rate: f64,
    pub seed: u64,
    pub image_width: usize,
    pub image_height: usize,
    pub fov_deg: f64,
    pub n_y: usize,
    pub n_z: usize,
    pub device_altitudes: Vec<f64>,
    /// Minimum distance from the walls for initial target positions.
    pub target_margin: f64,
    /// Altitude range for initial drone positions.
    pub drone_altitude: [f64; 2],
    /// Height of the point every camera looks at (above the arena centre).
    pub look_at_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            arena: [100.0, 100.0, 30.0],
            num_devices: 4,
            num_targets: 3,
            obstacles: vec![
                ObstacleBox {
                    min: [30.0, 62.0, 0.0],
                    max: [38.0, 70.0, 8.0],
                },
                ObstacleBox {
                    min: [62.0, 28.0, 0.0],
                    max: [70.0, 36.0, 6.0],
                },
                ObstacleBox {
                    min: [46.0, 46.0, 0.0],
                    max: [52.0, 52.0, 10.0],
                },
            ],
            duration_s: 5.0,
            frame_rate: 120.0,
            seed: 0,
            image_width: 64,
            image_height: 64,
            fov_deg: 100.0,
            n_y: 4,
            n_z: 4,
            device_altitudes: vec![2.0, 6.0, 10.0, 14.0],
            target_margin: 8.0,
            drone_altitude: [3.0, 25.0],
            look_at_height: 5.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if !(self.arena[0] > 0.0 && self.arena[1] > 0.0 && self.arena[2] > 0.0) {
            return bad("arena extents must be positive (zero-area arena)");
        }
        if self.num_devices == 0 {
            return bad("num_devices must be at least 1");
        }
        if self.num_targets == 0 {
            return bad("num_targets must be at least 1");
        }
        if !(self.frame_rate > 0.0) || !(self.duration_s > 0.0) {
            return bad("frame_rate and duration_s must be positive");
        }
        if self.image_width < 16 || self.image_height < 16 {
            return bad("image width and height must be at least 16");
        }
        if self.n_y * self.n_z == 0 {
            return bad("antenna grid must have at least one element");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov_deg must lie in (0, 180)");
        }
        if self.device_altitudes.is_empty() {
            return bad("device_altitudes must not be empty");
        }
        if self.device_altitudes.iter().any(|&z| z < 0.0 || z > self.arena[2]) {
            return bad("device altitudes must lie inside the arena");
        }
        if 2.0 * self.target_margin >= self.arena[0].min(self.arena[1]) || self.target_margin < 0.0 {
            return bad("target_margin leaves no room for targets");
        }
        let [z0, z1] = self.drone_altitude;
        if !(0.0 <= z0 && z0 <= z1 && z1 <= self.arena[2]) {
            return bad("drone_altitude must be an ordered range inside the arena");
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        (self.duration_s * self.frame_rate).round() as usize
    }

    pub fn focal(&self) -> f64 {
        (self.image_width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn look_at(&self) -> Vec3 {
        [self.arena[0] / 2.0, self.arena[1] / 2.0, self.look_at_height]
    }

    /// Devices spaced evenly along the arena perimeter starting at the origin corner;
    /// four devices land on the four corners.
    pub fn devices(&self) -> Vec<Device> {
        let [lx, ly, _] = self.arena;
        let perim = 2.0 * (lx + ly);
        (0..self.num_devices)
            .map(|k| {
                let s = perim * k as f64 / self.num_devices as f64;
                let (x, y) = if s <= lx {
                    (s, 0.0)
                } else if s <= lx + ly {
                    (lx, s - lx)
                } else if s <= 2.0 * lx + ly {
                    (lx - (s - lx - ly), ly)
                } else {
                    (0.0, ly - (s - 2.0 * lx - ly))
                };
                let z = self.device_altitudes[k % self.device_altitudes.len()];
                Device {
                    index: k,
                    position: [x, y, z],
                    image_width: self.image_width,
                    image_height: self.image_height,
                    focal: self.focal(),
                    look_at: self.look_at(),
                    n_y: self.n_y,
                    n_z: self.n_z,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub index: usize,
    pub position: Vec3,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    pub look_at: Vec3,
    pub n_y: usize,
    pub n_z: usize,
}

impl Device {
    /// Camera basis (forward, right, up).
    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = unit(sub(self.look_at, self.position));
        let mut r = cross(f, [0.0, 0.0, 1.0]);
        if norm(r) < 1e-9 {
            r = [1.0, 0.0, 0.0];
        }
        let r = unit(r);
        let u = cross(r, f);
        (f, r, u)
    }

    /// Image coordinates (column, row) and depth of a world point; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let (f, r, u) = self.basis();
        let rel = sub(p, self.position);
        let depth = dot(rel, f);
        if depth <= 1e-3 {
            return None;
        }
        let col = self.image_width as f64 / 2.0 + self.focal * dot(rel, r) / depth;
        let row = self.image_height as f64 / 2.0 - self.focal * dot(rel, u) / depth;
        Some((col, row, depth))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub index: usize,
    pub class: TargetClass,
    pub center: Vec3,
    pub velocity: Vec3,
    pub rcs: f64,
}

/// Constant-velocity motion folded back into `[lo, hi]` per axis (elastic walls).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub index: usize,
    pub class: TargetClass,
    pub start: Vec3,
    pub velocity: Vec3,
    pub lo: Vec3,
    pub hi: Vec3,
}

fn fold(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    let len = hi - lo;
    if len <= 0.0 {
        return (lo, 1.0);
    }
    let u = (x - lo).rem_euclid(2.0 * len);
    if u <= len {
        (lo + u, 1.0)
    } else {
        (lo + 2.0 * len - u, -1.0)
    }
}

impl Trajectory {
    pub fn state_at(&self, t: f64) -> TargetState {
        let mut center = [0.0; 3];
        let mut velocity = [0.0; 3];
        for i in 0..3 {
            let (p, dir) = fold(self.start[i] + self.velocity[i] * t, self.lo[i], self.hi[i]);
            center[i] = p;
            velocity[i] = self.velocity[i] * dir;
        }
        TargetState {
            index: self.index,
            class: self.class,
            center,
            velocity,
            rcs: self.class.rcs(),
        }
    }
}

/// One time step: every target's state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub time: f64,
    pub targets: Vec<TargetState>,
}

/// Draws the initial state of every target from the trajectory stream of `seed`.
pub fn trajectories(config: &SceneConfig, seed: u64) -> Result<Vec<Trajectory>> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[tag::TRAJECTORY]);
    let m = config.target_margin;
    let [lx, ly, lz] = config.arena;
    Ok((0..config.num_targets)
        .map(|n| {
            let class = TargetClass::ALL[n % 3];
            let speed = class.speed() * rng.random_range(0.8..=1.2);
            let heading = rng.random_range(-PI..PI);
            let x = rng.random_range(m..=lx - m);
            let y = rng.random_range(m..=ly - m);
            let (z, vz) = match class {
                TargetClass::Drone => (
                    rng.random_range(config.drone_altitude[0]..=config.drone_altitude[1]),
                    speed * rng.random_range(-0.2..=0.2),
                ),
                _ => (0.0, 0.0),
            };
            let vh = (speed * speed - vz * vz).sqrt();
            Trajectory {
                index: n,
                class,
                start: [x, y, z],
                velocity: [vh * heading.cos(), vh * heading.sin(), vz],
                lo: [0.0, 0.0, 0.0],
                hi: [lx, ly, lz],
            }
        })
        .collect())
}

/// Simulates one sequence of `duration_s * frame_rate` frames.
pub fn simulate(config: &SceneConfig) -> Result<Vec<Frame>> {
    simulate_seeded(config, config.seed)
}

pub fn simulate_seeded(config: &SceneConfig, seed: u64) -> Result<Vec<Frame>> {
    let trajs = trajectories(config, seed)?;
    Ok((0..config.num_frames())
        .map(|i| {
            let t = i as f64 / config.frame_rate;
            Frame {
                index: i,
                time: t,
                targets: trajs.iter().map(|tr| tr.state_at(t)).collect(),
            }
        })
        .collect())
}

/// Planar distance between device and target.
pub fn distance(device: &Device, target: &TargetState) -> f64 {
    let (d, c) = (device.position, target.center);
    ((d[0] - c[0]).powi(2) + (d[1] - c[1]).powi(2)).sqrt()
}

pub fn azimuth(device: &Device, target: &TargetState) -> f64 {
    let (d, c) = (device.position, target.center);
    (d[1] - c[1]).atan2(c[0] - d[0])
}

pub fn pitch(device: &Device, target: &TargetState) -> f64 {
    (device.position[2] - target.center[2]).atan2(distance(device, target))
}

/// Projection of the target velocity on the device-to-target direction (positive = receding).
pub fn radial_velocity(device: &Device, target: &TargetState) -> Result<f64> {
    let los = sub(target.center, device.position);
    let r = norm(los);
    if r == 0.0 {
        return Err(Error::Domain("device and target coincide in 3-D".into()));
    }
    Ok(dot(target.velocity, los) / r)
}

pub fn occluded(device: &Device, target: &TargetState, obstacles: &[ObstacleBox]) -> bool {
    obstacles
        .iter()
        .any(|b| b.intersects_segment(device.position, target.center))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub device: usize,
    pub target: usize,
    pub distance: f64,
    pub azimuth: f64,
    pub pitch: f64,
    pub radial_velocity: f64,
    pub class: TargetClass,
    pub occluded: bool,
}

impl GroundTruth {
    pub fn one_hot(&self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.class.index()] = 1.0;
        v
    }
}

pub fn ground_truth(device: &Device, target: &TargetState, obstacles: &[ObstacleBox]) -> Result<GroundTruth> {
    Ok(GroundTruth {
        device: device.index,
        target: target.index,
        distance: distance(device, target),
        azimuth: azimuth(device, target),
        pitch: pitch(device, target),
        radial_velocity: radial_velocity(device, target)?,
        class: target.class,
        occluded: occluded(device, target, obstacles),
    })
}

/// Row-major `H x W x 3` BGR image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub const BACKGROUND: [u8; 3] = [48, 48, 48];
pub const OBSTACLE: [u8; 3] = [128, 128, 128];

impl Image {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Image { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, c: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn count_color(&self, c: [u8; 3]) -> usize {
        self.data.chunks_exact(3).filter(|p| *p == c).count()
    }

    fn fill_rect(&mut self, c0: f64, r0: f64, c1: f64, r1: f64, color: [u8; 3]) {
        let clampc = |v: f64| v.clamp(0.0, self.width as f64);
        let clampr = |v: f64| v.clamp(0.0, self.height as f64);
        let (cs, ce) = (clampc(c0).round() as usize, clampc(c1).round() as usize);
        let (rs, re) = (clampr(r0).round() as usize, clampr(r1).round() as usize);
        for r in rs..re {
            for c in cs..ce {
                self.set(r, c, color);
            }
        }
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, radius: f64, color: [u8; 3]) {
        let r0 = (cy - radius).floor().max(0.0) as usize;
        let r1 = ((cy + radius).ceil().max(0.0) as usize).min(self.height);
        let c0 = (cx - radius).floor().max(0.0) as usize;
        let c1 = ((cx + radius).ceil().max(0.0) as usize).min(self.width);
        for r in r0..r1 {
            for c in c0..c1 {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                if dx * dx + dy * dy <= radius * radius {
                    self.set(r, c, color);
                }
            }
        }
    }
}

/// Renders the view of `device`: obstacles as grey projected bounding rectangles,
/// visible targets as class-coloured discs drawn far to near.
pub fn render(device: &Device, targets: &[TargetState], obstacles: &[ObstacleBox]) -> Image {
    let (w, h) = (device.image_width, device.image_height);
    let mut img = Image::filled(w, h, BACKGROUND);
    for b in obstacles {
        let pts: Vec<(f64, f64, f64)> = b.corners().iter().filter_map(|&p| device.project(p)).collect();
        if pts.len() < 8 {
            continue;
        }
        let c0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let c1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let r0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let r1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        img.fill_rect(c0, r0, c1, r1, OBSTACLE);
    }
    let mut visible: Vec<(f64, f64, f64, &TargetState)> = targets
        .iter()
        .filter(|t| !occluded(device, t, obstacles))
        .filter_map(|t| device.project(t.center).map(|(c, r, d)| (c, r, d, t)))
        .collect();
    visible.sort_by(|a, b| b.2.total_cmp(&a.2));
    let max_r = h as f64 / 4.0;
    for (c, r, depth, t) in visible {
        let radius = (device.focal * t.class.radius() / depth).clamp(1.0, max_r);
        img.fill_disc(c, r, radius, t.class.color());
    }
    img
}
