//! Synthetic labeled LiDAR sequences.
//!
//! A scene is a flat ground plane with cuboid vehicles, pedestrians and unlabeled
//! static clutter, observed by a moving sensor. Returns are produced by casting rays
//! uniformly over solid angle within the sensor's elevation band, so the density on
//! a surface falls off as `cos(incidence) / range²` and only surfaces facing the
//! sensor are hit.
//!
//! All generated coordinates, features and box parameters are rounded to `f32`
//! so the binary format round-trips them exactly.

mod format;
mod manifest;

pub use format::{read_sequence, read_sequence_from, write_sequence, write_sequence_to, SEQUENCE_MAGIC, SEQUENCE_VERSION};
pub use manifest::{DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{normalize_angle, BoundingBox, GeometryError, ObjectClass, Point3, PointCloudFrame, Pose};

#[derive(Debug, Error)]
pub enum SimDataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a sequence file")]
    BadMagic,
    #[error("unsupported sequence format version {0}")]
    Version(u16),
    #[error("truncated sequence file while reading {0}")]
    Truncated(&'static str),
    #[error("invalid sequence data: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const VEHICLE_SIZE: [f64; 3] = [1.9, 4.5, 1.6];
pub const PEDESTRIAN_SIZE: [f64; 3] = [0.6, 0.6, 1.8];

/// Shrink applied to each physical cuboid relative to its label so that surface
/// returns fall strictly inside the labeled box.
const SURFACE_INSET: f64 = 0.002;

/// Extra label margin, in units of the range noise σ, so that noisy returns on an
/// object's faces still fall inside its box. Without it about half the returns of a
/// moving object would be registered as static background by tracked aggregation.
const NOISE_MARGIN_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub n_frames: usize,
    pub frame_dt: f64,
    /// Objects are placed within `±area` meters of the sensor's start position.
    pub area: f64,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    pub n_static_clutter: usize,
    pub points_per_frame_target: usize,
    pub noise_sigma: f64,
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    /// Speed range of moving vehicles, m/s.
    pub vehicle_speed: (f64, f64),
    /// Yaw rates of moving vehicles are drawn from `±vehicle_yaw_rate` rad/s.
    pub vehicle_yaw_rate: f64,
    pub parked_fraction: f64,
    pub pedestrian_speed: (f64, f64),
    pub sensor_height: f64,
    pub max_range: f64,
    /// Elevation band of the emitted rays, radians.
    pub elevation: (f64, f64),
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_frames: 10,
            frame_dt: 0.1,
            area: 30.0,
            n_vehicles: 8,
            n_pedestrians: 4,
            n_static_clutter: 6,
            points_per_frame_target: 4096,
            noise_sigma: 0.02,
            ego_speed: 5.0,
            ego_yaw_rate: 0.05,
            vehicle_speed: (3.0, 12.0),
            vehicle_yaw_rate: 0.15,
            parked_fraction: 0.3,
            pedestrian_speed: (0.5, 1.6),
            sensor_height: 2.0,
            max_range: 60.0,
            elevation: (-30f64.to_radians(), 5f64.to_radians()),
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimDataError> {
        let finite = [self.frame_dt, self.area, self.noise_sigma, self.ego_speed, self.sensor_height, self.max_range]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.noise_sigma < 0.0 || self.frame_dt < 0.0 || self.area <= 0.0 || self.max_range <= 0.0 {
            return Err(SimDataError::Invalid(format!("invalid scene configuration {self:?}")));
        }
        if self.elevation.0 >= self.elevation.1 || self.vehicle_speed.0 > self.vehicle_speed.1 {
            return Err(SimDataError::Invalid("empty sampling range".into()));
        }
        Ok(())
    }
}

/// A labeled sequence; track ids are consistent across frames.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequence {
    pub frames: Vec<PointCloudFrame>,
}

/// Generator-side ground truth for one frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameTruth {
    /// Noise-free return positions, aligned with the frame's points.
    pub clean_points: Vec<Point3>,
    /// Track id of the labeled object each return hit, if any.
    pub source_track: Vec<Option<u32>>,
}

#[derive(Clone, Debug)]
struct Cuboid {
    center: Point3,
    size: [f64; 3],
    heading: f64,
}

impl Cuboid {
    /// Entry distance along a ray, if the ray starts outside and hits the cuboid.
    fn intersect(&self, origin: &Point3, dir: &Point3) -> Option<f64> {
        let (s, c) = self.heading.sin_cos();
        let rel = [origin[0] - self.center[0], origin[1] - self.center[1], origin[2] - self.center[2]];
        let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
        let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
        let half = [self.size[1] * 0.5, self.size[0] * 0.5, self.size[2] * 0.5];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if o[k].abs() > half[k] {
                    return None;
                }
                continue;
            }
            let a = (-half[k] - o[k]) / d[k];
            let b = (half[k] - o[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

#[derive(Clone, Debug)]
struct Actor {
    class: ObjectClass,
    track_id: u32,
    size: [f64; 3],
    reflectance: f64,
    /// World-frame `(x, y, heading)` per frame.
    states: Vec<(f64, f64, f64)>,
}

struct Clutter {
    shape: Cuboid,
    reflectance: f64,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Rounds a heading to `f32` while keeping it inside `[-π, π)`.
pub fn quantize_heading(h: f64) -> f64 {
    let q = h as f32;
    let lo = -std::f32::consts::PI;
    let q = if (q as f64) < -PI {
        lo.next_up()
    } else if (q as f64) >= PI {
        std::f32::consts::PI.next_down()
    } else {
        q
    };
    q as f64
}

fn ego_states(cfg: &SceneConfig) -> Vec<Pose> {
    (0..cfg.n_frames)
        .map(|i| {
            let t = i as f64 * cfg.frame_dt;
            let (x, y, yaw) = unicycle(0.0, 0.0, 0.0, cfg.ego_speed, cfg.ego_yaw_rate, t);
            Pose::from_yaw(yaw, [x, y, 0.0])
        })
        .collect()
}

/// Constant speed and yaw rate motion from `(x0, y0, yaw0)` after `t` seconds.
fn unicycle(x0: f64, y0: f64, yaw0: f64, speed: f64, yaw_rate: f64, t: f64) -> (f64, f64, f64) {
    let yaw = yaw0 + yaw_rate * t;
    if yaw_rate.abs() < 1e-9 {
        return (x0 + speed * t * yaw0.cos(), y0 + speed * t * yaw0.sin(), yaw);
    }
    let r = speed / yaw_rate;
    (x0 + r * (yaw.sin() - yaw0.sin()), y0 - r * (yaw.cos() - yaw0.cos()), yaw)
}

fn bev_radius(size: &[f64; 3]) -> f64 {
    0.5 * size[0].hypot(size[1])
}

fn scaled(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|v| v * rng.random_range(0.9..=1.1))
}

fn sample_actor(rng: &mut ChaCha8Rng, cfg: &SceneConfig, class: ObjectClass, track_id: u32) -> Actor {
    let x0 = rng.random_range(-cfg.area..=cfg.area);
    let y0 = rng.random_range(-cfg.area..=cfg.area);
    let reflectance = rng.random_range(0.3..0.9);
    let times = (0..cfg.n_frames).map(|i| i as f64 * cfg.frame_dt);
    match class {
        ObjectClass::Vehicle => {
            let size = scaled(rng, VEHICLE_SIZE);
            // Cuboids are symmetric under a half turn, so headings are kept in a
            // half-turn range; travel direction carries the sign instead.
            let heading0 = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let parked = rng.random_bool(cfg.parked_fraction.clamp(0.0, 1.0));
            let (speed, yaw_rate) = if parked {
                (0.0, 0.0)
            } else {
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let speed = if cfg.vehicle_speed.0 == cfg.vehicle_speed.1 {
                    cfg.vehicle_speed.0
                } else {
                    rng.random_range(cfg.vehicle_speed.0..cfg.vehicle_speed.1)
                };
                let yr = if cfg.vehicle_yaw_rate > 0.0 {
                    rng.random_range(-cfg.vehicle_yaw_rate..cfg.vehicle_yaw_rate)
                } else {
                    0.0
                };
                (dir * speed, yr)
            };
            let states = times.map(|t| unicycle(x0, y0, heading0, speed, yaw_rate, t)).collect();
            Actor { class, track_id, size, reflectance, states }
        }
        ObjectClass::Pedestrian => {
            let size = scaled(rng, PEDESTRIAN_SIZE);
            let speed = rng.random_range(cfg.pedestrian_speed.0..=cfg.pedestrian_speed.1);
            let turn = Normal::new(0.0, 0.15).expect("valid sigma");
            let mut heading = rng.random_range(-PI..PI);
            let (mut x, mut y) = (x0, y0);
            let mut states = Vec::with_capacity(cfg.n_frames);
            for i in 0..cfg.n_frames {
                if i > 0 {
                    x += speed * cfg.frame_dt * heading.cos();
                    y += speed * cfg.frame_dt * heading.sin();
                    heading = normalize_angle(heading + turn.sample(rng));
                }
                states.push((x, y, heading));
            }
            Actor { class, track_id, size, reflectance, states }
        }
    }
}

fn collides(a: &[(f64, f64)], ra: f64, b: &[(f64, f64)], rb: f64) -> bool {
    a.iter().zip(b).any(|(p, q)| (p.0 - q.0).hypot(p.1 - q.1) < ra + rb + 0.5)
}

struct Scene {
    ego: Vec<Pose>,
    actors: Vec<Actor>,
    clutter: Vec<Clutter>,
}

fn build_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Scene {
    let ego = ego_states(cfg);
    let ego_xy: Vec<(f64, f64)> = ego.iter().map(|p| (p.translation.x, p.translation.y)).collect();
    let mut placed: Vec<(Vec<(f64, f64)>, f64)> = Vec::new();
    let mut actors = Vec::new();
    let classes = std::iter::repeat_n(ObjectClass::Vehicle, cfg.n_vehicles)
        .chain(std::iter::repeat_n(ObjectClass::Pedestrian, cfg.n_pedestrians));
    let mut next_id = 0u32;
    for class in classes {
        for _attempt in 0..200 {
            let actor = sample_actor(rng, cfg, class, next_id);
            let path: Vec<(f64, f64)> = actor.states.iter().map(|s| (s.0, s.1)).collect();
            let r = bev_radius(&actor.size);
            if collides(&path, r, &ego_xy, 2.5) || placed.iter().any(|(p, rp)| collides(&path, r, p, *rp)) {
                continue;
            }
            placed.push((path, r));
            actors.push(actor);
            next_id += 1;
            break;
        }
    }
    let mut clutter = Vec::new();
    let n = cfg.n_frames.max(1);
    for _ in 0..cfg.n_static_clutter {
        for _attempt in 0..200 {
            let size = match rng.random_range(0..3) {
                0 => [0.3, 0.3, 3.0],
                1 => scaled(rng, [1.0, 1.0, 1.0]),
                _ => [0.3, rng.random_range(3.0..8.0), rng.random_range(1.5..2.5)],
            };
            let (x, y) = (rng.random_range(-cfg.area..=cfg.area), rng.random_range(-cfg.area..=cfg.area));
            let heading = rng.random_range(-PI..PI);
            let path = vec![(x, y); n];
            let r = bev_radius(&size);
            if collides(&path, r, &ego_xy, 2.5) || placed.iter().any(|(p, rp)| collides(&path, r, p, *rp)) {
                continue;
            }
            placed.push((path, r));
            clutter.push(Clutter {
                shape: Cuboid { center: [x, y, size[2] * 0.5], size, heading },
                reflectance: rng.random_range(0.2..0.8),
            });
            break;
        }
    }
    Scene { ego, actors, clutter }
}

/// Generates a sequence and the per-point generator truth.
pub fn generate_sequence_with_truth(cfg: &SceneConfig) -> Result<(Sequence, Vec<FrameTruth>), SimDataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let scene = build_scene(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| SimDataError::Invalid(e.to_string()))?;
    let refl_noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let inset = SURFACE_INSET + NOISE_MARGIN_SIGMAS * cfg.noise_sigma;
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut truths = Vec::with_capacity(cfg.n_frames);

    for (fi, ego) in scene.ego.iter().enumerate() {
        let world_to_sensor = ego.inverse();
        let mut boxes = Vec::with_capacity(scene.actors.len());
        // (physical cuboid in sensor coordinates, reflectance, track id)
        let mut targets: Vec<(Cuboid, f64, Option<u32>)> = Vec::new();
        for a in &scene.actors {
            let (x, y, h) = a.states[fi];
            let world = BoundingBox::new([x, y, a.size[2] * 0.5], a.size, h, a.track_id, a.class)?;
            let local = world.transformed(&world_to_sensor);
            let label = BoundingBox::new(
                local.center.map(f32_round),
                local.size.map(f32_round),
                quantize_heading(local.heading),
                a.track_id,
                a.class,
            )?;
            targets.push((
                Cuboid { center: label.center, size: label.size.map(|s| s - 2.0 * inset), heading: label.heading },
                a.reflectance,
                Some(a.track_id),
            ));
            boxes.push(label);
        }
        for c in &scene.clutter {
            let b = BoundingBox::new(c.shape.center, c.shape.size, c.shape.heading, 0, ObjectClass::Vehicle)?
                .transformed(&world_to_sensor);
            targets.push((Cuboid { center: b.center, size: b.size, heading: b.heading }, c.reflectance, None));
        }

        let origin = [0.0, 0.0, cfg.sensor_height];
        let (sin_lo, sin_hi) = (cfg.elevation.0.sin(), cfg.elevation.1.sin());
        let budget = cfg.points_per_frame_target;
        let mut points = Vec::with_capacity(budget);
        let mut features = Vec::with_capacity(budget);
        let mut truth = FrameTruth::default();
        let max_rays = budget.saturating_mul(50);
        let mut rays = 0;
        while points.len() < budget && rays < max_rays {
            rays += 1;
            let azimuth = rng.random_range(-PI..PI);
            let sin_el: f64 = rng.random_range(sin_lo..sin_hi);
            let cos_el = (1.0 - sin_el * sin_el).sqrt();
            let dir = [cos_el * azimuth.cos(), cos_el * azimuth.sin(), sin_el];
            let mut hit: Option<(f64, f64, Option<u32>)> = None;
            if dir[2] < 0.0 {
                hit = Some((-origin[2] / dir[2], 0.15, None));
            }
            for (shape, refl, track) in &targets {
                if let Some(t) = shape.intersect(&origin, &dir) {
                    if hit.is_none_or(|(best, _, _)| t < best) {
                        hit = Some((t, *refl, *track));
                    }
                }
            }
            let Some((t, refl, track)) = hit else { continue };
            if t > cfg.max_range {
                continue;
            }
            let clean = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
            let noisy = [
                f32_round(clean[0] + noise.sample(&mut rng)),
                f32_round(clean[1] + noise.sample(&mut rng)),
                f32_round(clean[2] + noise.sample(&mut rng)),
            ];
            let r: f64 = refl + refl_noise.sample(&mut rng);
            points.push(noisy);
            features.push(f32_round(r.clamp(0.0, 1.0)));
            truth.clean_points.push(clean);
            truth.source_track.push(track);
        }
        frames.push(PointCloudFrame::new(fi as u32, points, features, 1, *ego, boxes)?);
        truths.push(truth);
    }
    Ok((Sequence { frames }, truths))
}

pub fn generate_sequence(cfg: &SceneConfig) -> Result<Sequence, SimDataError> {
    generate_sequence_with_truth(cfg).map(|(s, _)| s)
}

/// Scene mix used for a dataset targeting one class.
pub fn scene_for_class(class: ObjectClass, n_frames: usize, seed: u64) -> SceneConfig {
    let base = SceneConfig { n_frames, rng_seed: seed, ..SceneConfig::default() };
    match class {
        ObjectClass::Vehicle => base,
        ObjectClass::Pedestrian => SceneConfig { n_vehicles: 3, n_pedestrians: 10, ..base },
    }
}

/// Scene seed of the `index`-th sequence of a split.
pub fn sequence_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1,
        Split::Val => 2,
    };
    let mut h = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    for v in [tag, index as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// All sequences of one split, in index order.
pub fn generate_split(
    class: ObjectClass,
    n_sequences: usize,
    n_frames: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<Sequence>, SimDataError> {
    (0..n_sequences)
        .into_par_iter()
        .map(|i| generate_sequence(&scene_for_class(class, n_frames, sequence_seed(seed, split, i))))
        .collect()
}
