//! Multi-frame registration into a target frame's sensor coordinates.

use rayon::prelude::*;

use super::{owning_box, BoundingBox, GeometryError, Point3, PointCloudFrame, Pose};

/// Dense cloud produced by merging several frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregatedCloud {
    pub points: Vec<Point3>,
    /// Row-major `points.len() × feature_width`.
    pub features: Vec<f64>,
    pub feature_width: usize,
    /// Points discarded because their track has no box in the target frame.
    pub dropped: usize,
}

impl AggregatedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Maps `src`'s points into the coordinates of a frame whose sensor pose is `target_pose`.
pub fn transform_frame(src: &PointCloudFrame, target_pose: &Pose) -> Vec<Point3> {
    let rel = relative_pose(&src.ego_pose, target_pose);
    src.points.iter().map(|p| rel.transform_point(p)).collect()
}

fn relative_pose(src_pose: &Pose, target_pose: &Pose) -> Pose {
    target_pose.inverse().compose(src_pose)
}

fn check_inputs(frames: &[PointCloudFrame], target_index: usize) -> Result<usize, GeometryError> {
    if target_index >= frames.len() {
        return Err(GeometryError::TargetIndex { index: target_index, len: frames.len() });
    }
    let width = frames[target_index].feature_width;
    for (i, f) in frames.iter().enumerate() {
        if f.feature_width != width {
            return Err(GeometryError::FeatureWidthMismatch { frame: i, found: f.feature_width, expected: width });
        }
    }
    Ok(width)
}

/// Union of all frames, registered with ego poses only. Frame order is preserved.
pub fn aggregate_static(frames: &[PointCloudFrame], target_index: usize) -> Result<AggregatedCloud, GeometryError> {
    let width = check_inputs(frames, target_index)?;
    let target_pose = frames[target_index].ego_pose;
    let parts: Vec<Vec<Point3>> = frames.par_iter().map(|f| transform_frame(f, &target_pose)).collect();
    let mut out = AggregatedCloud { feature_width: width, ..Default::default() };
    for (f, pts) in frames.iter().zip(parts) {
        out.points.extend(pts);
        out.features.extend_from_slice(&f.features);
    }
    Ok(out)
}

enum Mapping {
    Static,
    Object(Pose),
    Drop,
}

/// Union of all frames where points on labeled objects follow their box track.
///
/// A point inside box `k` of source frame `q` keeps its box-local coordinates and
/// is placed relative to box `k` of the target frame. Points outside every box are
/// registered exactly as in [`aggregate_static`]. Points on a track with no box in
/// the target frame are dropped.
pub fn aggregate_tracked(frames: &[PointCloudFrame], target_index: usize) -> Result<AggregatedCloud, GeometryError> {
    let width = check_inputs(frames, target_index)?;
    let target = &frames[target_index];
    let target_pose = target.ego_pose;

    let parts: Vec<(Vec<Point3>, Vec<f64>, usize)> = frames
        .par_iter()
        .map(|f| {
            let ego = relative_pose(&f.ego_pose, &target_pose);
            let mappings: Vec<Mapping> = f
                .boxes
                .iter()
                .map(|b| match find_track(&target.boxes, b) {
                    // target_box ∘ source_box⁻¹, both in their own frame's coordinates
                    Some(tb) => Mapping::Object(tb.pose().compose(&b.pose().inverse())),
                    None => Mapping::Drop,
                })
                .collect();
            let mut pts = Vec::with_capacity(f.points.len());
            let mut feats = Vec::with_capacity(f.features.len());
            let mut dropped = 0;
            for (i, p) in f.points.iter().enumerate() {
                let mapping = owning_box(p, &f.boxes).map_or(&Mapping::Static, |k| &mappings[k]);
                let q = match mapping {
                    Mapping::Static => ego.transform_point(p),
                    Mapping::Object(m) => m.transform_point(p),
                    Mapping::Drop => {
                        dropped += 1;
                        continue;
                    }
                };
                pts.push(q);
                feats.extend_from_slice(f.feature_row(i));
            }
            (pts, feats, dropped)
        })
        .collect();

    let mut out = AggregatedCloud { feature_width: width, ..Default::default() };
    for (pts, feats, dropped) in parts {
        out.points.extend(pts);
        out.features.extend(feats);
        out.dropped += dropped;
    }
    Ok(out)
}

fn find_track<'a>(boxes: &'a [BoundingBox], b: &BoundingBox) -> Option<&'a BoundingBox> {
    boxes.iter().find(|t| t.track_id == b.track_id && t.class == b.class)
}
