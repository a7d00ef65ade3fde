//! Rigid transforms, labeled boxes and point-cloud frames.
//!
//! Everything here is `f64`. Points are `[x, y, z]` in meters, expressed in the
//! sensor frame of the frame they belong to unless stated otherwise. The sensor
//! frame has `x` forward, `y` left and `z` up with the origin on the ground below
//! the sensor.

mod aggregate;

pub use aggregate::{aggregate_static, aggregate_tracked, transform_frame, AggregatedCloud};

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Point3 = [f64; 3];

const POSE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("box size components must be finite and strictly positive, got {0:?}")]
    InvalidBoxSize([f64; 3]),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("frame has {points} points but {features} feature values for width {width}")]
    FeatureRows { points: usize, features: usize, width: usize },
    #[error("feature width mismatch: frame {frame} has width {found}, expected {expected}")]
    FeatureWidthMismatch { frame: usize, found: usize, expected: usize },
    #[error("target index {index} out of range for {len} frames")]
    TargetIndex { index: usize, len: usize },
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    if a < -PI {
        a = -PI;
    }
    a
}

/// Rigid SE(3) transform mapping local coordinates into a parent frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Validated constructor.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let pose = Pose { rotation, translation };
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        if !pose.is_valid() {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(pose)
    }

    /// Rotation about `z` by `yaw` followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Point3) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::from(translation),
        }
    }

    pub fn from_translation(translation: Point3) -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::from(translation) }
    }

    pub fn is_valid(&self) -> bool {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        err <= POSE_TOLERANCE && (r.determinant() - 1.0).abs() <= POSE_TOLERANCE
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }

    /// Heading of the rotated `x` axis projected onto the ground plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Row-major rotation followed by translation, the on-disk layout.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn from_array(v: &[f64; 12]) -> Result<Self, GeometryError> {
        Pose::new(
            Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            Vector3::new(v[9], v[10], v[11]),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ObjectClass {
    Vehicle = 0,
    Pedestrian = 1,
}

impl ObjectClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ObjectClass::Vehicle),
            1 => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }
}

impl std::str::FromStr for ObjectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vehicle" => Ok(ObjectClass::Vehicle),
            "pedestrian" => Ok(ObjectClass::Pedestrian),
            other => Err(format!("unknown class `{other}` (expected vehicle or pedestrian)")),
        }
    }
}

/// An upright cuboid with a yaw heading.
///
/// `size` is `(w, l, h)`: the length `l` runs along the heading (box-local `x`),
/// the width `w` along box-local `y` and the height `h` along `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub center: Point3,
    pub size: [f64; 3],
    pub heading: f64,
    pub track_id: u32,
    pub class: ObjectClass,
}

impl BoundingBox {
    pub fn new(
        center: Point3,
        size: [f64; 3],
        heading: f64,
        track_id: u32,
        class: ObjectClass,
    ) -> Result<Self, GeometryError> {
        if !center.iter().all(|v| v.is_finite()) || !heading.is_finite() {
            return Err(GeometryError::NonFinite("box"));
        }
        if !size.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(GeometryError::InvalidBoxSize(size));
        }
        let heading = if (-PI..PI).contains(&heading) { heading } else { normalize_angle(heading) };
        Ok(BoundingBox { center, size, heading, track_id, class })
    }

    pub fn width(&self) -> f64 {
        self.size[0]
    }

    pub fn length(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    /// Half extents in box-local `(x, y, z)` order.
    pub fn half_extents(&self) -> [f64; 3] {
        [self.size[1] * 0.5, self.size[0] * 0.5, self.size[2] * 0.5]
    }

    /// Box-local frame: yaw by heading, origin at the center.
    pub fn pose(&self) -> Pose {
        box_to_pose(self)
    }

    /// Coordinates of `p` relative to the box center, rotated by `-heading`.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let l = self.to_local(p);
        let h = self.half_extents();
        l[0].abs() <= h[0] && l[1].abs() <= h[1] && l[2].abs() <= h[2]
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let [hx, hy, _] = self.half_extents();
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn z_range(&self) -> (f64, f64) {
        let h = self.size[2] * 0.5;
        (self.center[2] - h, self.center[2] + h)
    }

    /// Same box expressed in another frame: `pose` maps this box's frame into that frame.
    pub fn transformed(&self, pose: &Pose) -> BoundingBox {
        let center = pose.transform_point(&self.center);
        BoundingBox {
            center,
            heading: normalize_angle(self.heading + pose.yaw()),
            ..*self
        }
    }

    pub fn bev_distance_to_origin(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }
}

pub fn box_to_pose(b: &BoundingBox) -> Pose {
    Pose::from_yaw(b.heading, b.center)
}

/// Per-point containment mask for one box.
pub fn points_in_box(points: &[Point3], b: &BoundingBox) -> Vec<bool> {
    points.iter().map(|p| b.contains(p)).collect()
}

/// Index of the box owning `p`; overlaps resolve to the nearest box center.
pub fn owning_box(p: &Point3, boxes: &[BoundingBox]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        if b.contains(p) {
            let d = (0..3).map(|k| (p[k] - b.center[k]).powi(2)).sum::<f64>();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// One LiDAR sweep with its pose and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudFrame {
    pub index: u32,
    pub points: Vec<Point3>,
    /// Row-major `points.len() × feature_width`.
    pub features: Vec<f64>,
    pub feature_width: usize,
    /// Maps this frame's sensor coordinates into the world frame.
    pub ego_pose: Pose,
    pub boxes: Vec<BoundingBox>,
}

impl PointCloudFrame {
    pub fn new(
        index: u32,
        points: Vec<Point3>,
        features: Vec<f64>,
        feature_width: usize,
        ego_pose: Pose,
        boxes: Vec<BoundingBox>,
    ) -> Result<Self, GeometryError> {
        let frame = PointCloudFrame { index, points, features, feature_width, ego_pose, boxes };
        frame.validate()?;
        Ok(frame)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.features.len() != self.points.len() * self.feature_width {
            return Err(GeometryError::FeatureRows {
                points: self.points.len(),
                features: self.features.len(),
                width: self.feature_width,
            });
        }
        if !self.points.iter().flatten().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("points"));
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("features"));
        }
        if !self.ego_pose.is_valid() {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_width..(i + 1) * self.feature_width]
    }

    /// Number of this frame's points inside `b`.
    pub fn count_points_in(&self, b: &BoundingBox) -> usize {
        self.points.iter().filter(|p| b.contains(p)).count()
    }
}
