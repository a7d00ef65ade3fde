use crate::geometry::BoundingBox;

use super::GridConfig;

/// `(Δx/d, Δy/d, Δz, ln w, ln l, ln h, sin θ, cos θ)`.
pub const LOC_CHANNELS: usize = 8;

/// Per-pixel training targets on the output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub height: usize,
    pub width: usize,
    /// `[H·W]`, 1 at positive pixels.
    pub existence: Vec<f64>,
    /// `[8, H, W]`, zero away from positives.
    pub regression: Vec<f64>,
    /// Index of the box each positive pixel regresses to.
    pub owner: Vec<Option<usize>>,
}

impl TargetMap {
    pub fn num_positives(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.owner.iter().map(|o| o.is_some()).collect()
    }
}

pub fn encode_box(b: &BoundingBox, pixel_center: [f64; 2], d: f64) -> [f64; LOC_CHANNELS] {
    let (s, c) = b.heading.sin_cos();
    [
        (b.center[0] - pixel_center[0]) / d,
        (b.center[1] - pixel_center[1]) / d,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        s,
        c,
    ]
}

/// Marks output pixels whose centers fall inside a box footprint.
///
/// Overlaps go to the nearest box center. A box that covers no pixel center claims
/// the pixel holding its own center, unless another box already owns it.
pub fn assign_targets(boxes: &[BoundingBox], grid: &GridConfig) -> TargetMap {
    let (h, w) = (grid.feature_height(), grid.feature_width());
    let d = grid.feature_pixel_size();
    let plane = h * w;
    let mut owner: Vec<Option<usize>> = vec![None; plane];
    let mut best = vec![f64::INFINITY; plane];
    let mut claimed = vec![false; boxes.len()];
    for (bi, b) in boxes.iter().enumerate() {
        let reach = 0.5 * b.size[0].hypot(b.size[1]);
        let span = |lo: f64, hi: f64, origin: f64, n: usize| {
            let a = ((lo - origin) / d).floor().max(0.0) as usize;
            let z = ((hi - origin) / d).floor();
            (z >= 0.0).then(|| (a, (z as usize).min(n - 1)))
        };
        let (Some((r0, r1)), Some((c0, c1))) = (
            span(b.center[1] - reach, b.center[1] + reach, grid.y_range.0, h),
            span(b.center[0] - reach, b.center[0] + reach, grid.x_range.0, w),
        ) else {
            continue;
        };
        let [hx, hy, _] = b.half_extents();
        for row in r0..=r1 {
            for col in c0..=c1 {
                let pc = grid.feature_pixel_center(row, col);
                let l = b.to_local(&[pc[0], pc[1], b.center[2]]);
                if l[0].abs() > hx || l[1].abs() > hy {
                    continue;
                }
                claimed[bi] = true;
                let dist = (pc[0] - b.center[0]).hypot(pc[1] - b.center[1]);
                let idx = row * w + col;
                if dist < best[idx] {
                    best[idx] = dist;
                    owner[idx] = Some(bi);
                }
            }
        }
    }
    for (bi, b) in boxes.iter().enumerate() {
        if claimed[bi] {
            continue;
        }
        if let Some((row, col)) = grid.feature_cell_of(b.center[0], b.center[1]) {
            let idx = row * w + col;
            if owner[idx].is_none() {
                owner[idx] = Some(bi);
            }
        }
    }

    let mut existence = vec![0.0; plane];
    let mut regression = vec![0.0; LOC_CHANNELS * plane];
    for (idx, o) in owner.iter().enumerate() {
        if let Some(bi) = *o {
            existence[idx] = 1.0;
            let pc = grid.feature_pixel_center(idx / w, idx % w);
            for (ch, v) in encode_box(&boxes[bi], pc, d).into_iter().enumerate() {
                regression[ch * plane + idx] = v;
            }
        }
    }
    TargetMap { height: h, width: w, existence, regression, owner }
}
