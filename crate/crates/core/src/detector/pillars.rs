use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Point3;

use super::GridConfig;

/// Per-point input width: x, y, z, reflectance, offsets to the pillar mean (3),
/// offsets to the pillar's pixel center (2).
pub const PILLAR_DIMS: usize = 9;

/// Non-empty pillars of one cloud, ordered by linear pixel index.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarTensor {
    pub points_per_pillar: usize,
    /// `[K, P, PILLAR_DIMS]`, padding rows zero.
    pub data: Vec<f64>,
    /// `[K, P]`, 1 for real points.
    pub mask: Vec<f64>,
    /// `(row, col)` of each pillar in the input grid.
    pub cells: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
}

impl PillarTensor {
    pub fn num_pillars(&self) -> usize {
        self.cells.len()
    }

    pub fn num_points(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Feature row of point `j` of pillar `k`.
    pub fn point(&self, k: usize, j: usize) -> &[f64] {
        let off = (k * self.points_per_pillar + j) * PILLAR_DIMS;
        &self.data[off..off + PILLAR_DIMS]
    }
}

/// Groups points into vertical columns of the input grid.
///
/// `features` is row-major with `feature_width` values per point; its first column is
/// reflectance (zero when the width is 0). Points outside the grid ranges are dropped.
/// Pillars above the point cap are subsampled uniformly, and pillars above
/// `max_pillars` are subsampled likewise, both from `seed`.
pub fn pillarize(points: &[Point3], features: &[f64], feature_width: usize, grid: &GridConfig, seed: u64) -> PillarTensor {
    let (w, h) = (grid.width(), grid.height());
    let d = grid.pixel_size;
    let mut keyed: Vec<(usize, usize)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let (x, y, z) = (p[0], p[1], p[2]);
        if !(x >= grid.x_range.0 && x < grid.x_range.1 && y >= grid.y_range.0 && y < grid.y_range.1) {
            continue;
        }
        if !(z >= grid.z_range.0 && z <= grid.z_range.1) {
            continue;
        }
        let col = ((x - grid.x_range.0) / d).floor() as usize;
        let row = ((y - grid.y_range.0) / d).floor() as usize;
        if col >= w || row >= h {
            continue;
        }
        keyed.push((row * w + col, i));
    }
    keyed.sort_by_key(|&(cell, _)| cell);

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (cell, i) in keyed {
        match groups.last_mut() {
            Some((c, members)) if *c == cell => members.push(i),
            _ => groups.push((cell, vec![i])),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if groups.len() > grid.max_pillars {
        let mut keep = sample(&mut rng, groups.len(), grid.max_pillars).into_vec();
        keep.sort_unstable();
        let mut all: Vec<Option<(usize, Vec<usize>)>> = groups.into_iter().map(Some).collect();
        groups = keep.into_iter().map(|k| all[k].take().unwrap()).collect();
    }

    let cap = grid.max_points_per_pillar;
    let k = groups.len();
    let mut out = PillarTensor {
        points_per_pillar: cap,
        data: vec![0.0; k * cap * PILLAR_DIMS],
        mask: vec![0.0; k * cap],
        cells: Vec::with_capacity(k),
        counts: Vec::with_capacity(k),
    };
    for (pk, (cell, mut members)) in groups.into_iter().enumerate() {
        if members.len() > cap {
            let mut pick = sample(&mut rng, members.len(), cap).into_vec();
            pick.sort_unstable();
            members = pick.into_iter().map(|j| members[j]).collect();
        }
        let (row, col) = (cell / w, cell % w);
        let n = members.len() as f64;
        let mut mean = [0.0; 3];
        for &i in &members {
            for a in 0..3 {
                mean[a] += points[i][a];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let cx = grid.x_range.0 + (col as f64 + 0.5) * d;
        let cy = grid.y_range.0 + (row as f64 + 0.5) * d;
        for (j, &i) in members.iter().enumerate() {
            let p = points[i];
            let refl = if feature_width > 0 { features[i * feature_width] } else { 0.0 };
            let row_vals = [p[0], p[1], p[2], refl, p[0] - mean[0], p[1] - mean[1], p[2] - mean[2], p[0] - cx, p[1] - cy];
            let off = (pk * cap + j) * PILLAR_DIMS;
            out.data[off..off + PILLAR_DIMS].copy_from_slice(&row_vals);
            out.mask[pk * cap + j] = 1.0;
        }
        out.cells.push((row, col));
        out.counts.push(members.len());
    }
    out
}
