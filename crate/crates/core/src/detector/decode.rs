use crate::eval::bev_iou;
use crate::geometry::{BoundingBox, ObjectClass};
use crate::scalar::Scalar;

use super::model::DetectionOutput;
use super::targets::LOC_CHANNELS;
use super::GridConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Log-size clamp so a wild regression cannot overflow `exp`.
const MAX_LOG_SIZE: f64 = 5.0;

/// Inverse of the target encoding at output pixel `(row, col)`.
pub fn decode_pixel(loc: &[f64; LOC_CHANNELS], grid: &GridConfig, row: usize, col: usize, class: ObjectClass) -> Option<BoundingBox> {
    let d = grid.feature_pixel_size();
    let pc = grid.feature_pixel_center(row, col);
    let size = [loc[3], loc[4], loc[5]].map(|v| v.clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp());
    BoundingBox::new([pc[0] + loc[0] * d, pc[1] + loc[1] * d, loc[2]], size, loc[6].atan2(loc[7]), 0, class).ok()
}

/// Greedy rotated-BEV suppression: boxes are taken by descending score (ties keep
/// input order) and dropped when their IoU with an already kept box exceeds `iou`.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let cand = dets[i];
        if kept.iter().all(|k| bev_iou(&k.bbox, &cand.bbox) <= iou) {
            kept.push(cand);
        }
    }
    dets.clear();
    kept
}

/// Boxes at pixels whose existence probability exceeds `score_threshold`, after NMS.
pub fn decode<T: Scalar>(
    out: &DetectionOutput<T>,
    grid: &GridConfig,
    class: ObjectClass,
    score_threshold: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let plane = out.height * out.width;
    let mut dets = Vec::new();
    for idx in 0..plane {
        let score = out.existence[idx].to_f64_lossy();
        if !(score > score_threshold) {
            continue;
        }
        let loc: [f64; LOC_CHANNELS] = std::array::from_fn(|ch| out.localization[ch * plane + idx].to_f64_lossy());
        if let Some(bbox) = decode_pixel(&loc, grid, idx / out.width, idx % out.width, class) {
            dets.push(Detection { bbox, score });
        }
    }
    nms(dets, nms_iou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{assign_targets, TargetMap};

    fn output_from_targets(t: &TargetMap, channels: usize) -> DetectionOutput<f64> {
        DetectionOutput {
            channels,
            height: t.height,
            width: t.width,
            phi: vec![0.0; channels * t.height * t.width],
            existence: t.existence.clone(),
            localization: t.regression.clone(),
        }
    }

    #[test]
    fn encode_then_decode_recovers_box() {
        let g = GridConfig::default();
        let b = BoundingBox::new([3.3, -7.1, 0.8], [1.9, 4.5, 1.6], 2.5, 0, ObjectClass::Vehicle).unwrap();
        let t = assign_targets(&[b], &g);
        let out = output_from_targets(&t, 1);
        let plane = t.height * t.width;
        for idx in (0..plane).filter(|&i| t.owner[i].is_some()) {
            let loc = std::array::from_fn(|ch| out.localization[ch * plane + idx]);
            let d = decode_pixel(&loc, &g, idx / t.width, idx % t.width, ObjectClass::Vehicle).unwrap();
            for k in 0..3 {
                assert!((d.center[k] - b.center[k]).abs() < 1e-5);
                assert!((d.size[k] - b.size[k]).abs() < 1e-5);
            }
            assert!((crate::geometry::normalize_angle(d.heading - b.heading)).abs() < 1e-5);
        }
        let dets = decode(&out, &g, ObjectClass::Vehicle, 0.5, 0.5);
        assert_eq!(dets.len(), 1);
    }

    #[test]
    fn identical_boxes_suppressed() {
        let b = BoundingBox::new([0.0; 3], [2.0, 4.0, 1.5], 0.0, 0, ObjectClass::Vehicle).unwrap();
        let kept = nms(vec![Detection { bbox: b, score: 0.8 }, Detection { bbox: b, score: 0.9 }], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }
}
