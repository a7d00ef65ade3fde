//! Pillar-based BEV detector: pillarization, network, target encoding and decoding.

mod decode;
mod model;
mod pillars;
mod targets;

pub use decode::{decode, decode_pixel, nms, Detection};
pub use model::{DetectionOutput, Detector, DetectorConfig, ForwardOutput};
pub use pillars::{pillarize, PillarTensor, PILLAR_DIMS};
pub use targets::{assign_targets, encode_box, TargetMap, LOC_CHANNELS};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// BEV discretization shared by pillarization, targets and decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Input pixel edge in meters.
    pub pixel_size: f64,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x_range: (-30.72, 30.72),
            y_range: (-30.72, 30.72),
            z_range: (-1.0, 4.0),
            pixel_size: 0.96,
            max_points_per_pillar: 32,
            max_pillars: 4096,
        }
    }
}

fn cells_along(range: (f64, f64), pixel: f64) -> Option<usize> {
    let n = (range.1 - range.0) / pixel;
    let r = n.round();
    ((n - r).abs() < 1e-6 && r >= 1.0).then_some(r as usize)
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(DetectorError::Grid(format!("pixel size {}", self.pixel_size)));
        }
        if !(self.z_range.0 < self.z_range.1) {
            return Err(DetectorError::Grid(format!("z range {:?}", self.z_range)));
        }
        for (axis, r) in [("x", self.x_range), ("y", self.y_range)] {
            match cells_along(r, self.pixel_size) {
                Some(n) if n % 4 == 0 => {}
                _ => {
                    return Err(DetectorError::Grid(format!(
                        "{axis} range {r:?} is not a multiple of 4 pixels of {}",
                        self.pixel_size
                    )))
                }
            }
        }
        if self.max_points_per_pillar == 0 || self.max_pillars == 0 {
            return Err(DetectorError::Grid("pillar caps must be positive".into()));
        }
        Ok(())
    }

    /// Input grid columns (along x).
    pub fn width(&self) -> usize {
        cells_along(self.x_range, self.pixel_size).unwrap_or(0)
    }

    /// Input grid rows (along y).
    pub fn height(&self) -> usize {
        cells_along(self.y_range, self.pixel_size).unwrap_or(0)
    }

    /// Output maps are at half the input resolution.
    pub fn feature_width(&self) -> usize {
        self.width() / 2
    }

    pub fn feature_height(&self) -> usize {
        self.height() / 2
    }

    pub fn feature_pixel_size(&self) -> f64 {
        2.0 * self.pixel_size
    }

    /// BEV center of output pixel `(row, col)`.
    pub fn feature_pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let d = self.feature_pixel_size();
        [self.x_range.0 + (col as f64 + 0.5) * d, self.y_range.0 + (row as f64 + 0.5) * d]
    }

    /// Output pixel containing BEV point `(x, y)`, if inside the grid.
    pub fn feature_cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let d = self.feature_pixel_size();
        let (cx, cy) = (((x - self.x_range.0) / d).floor(), ((y - self.y_range.0) / d).floor());
        if cx < 0.0 || cy < 0.0 {
            return None;
        }
        let (col, row) = (cx as usize, cy as usize);
        (col < self.feature_width() && row < self.feature_height()).then_some((row, col))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_dims() {
        let g = GridConfig::default();
        g.validate().unwrap();
        assert_eq!((g.width(), g.height()), (64, 64));
        assert_eq!((g.feature_width(), g.feature_height()), (32, 32));
        assert_eq!(g.feature_cell_of(0.0, 0.0), Some((16, 16)));
        assert_eq!(g.feature_cell_of(-30.72, -30.72), Some((0, 0)));
        assert_eq!(g.feature_cell_of(30.72, 0.0), None);
        let c = g.feature_pixel_center(0, 0);
        assert!((c[0] + 29.76).abs() < 1e-12 && (c[1] + 29.76).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_integral_span() {
        let g = GridConfig { pixel_size: 1.0, ..GridConfig::default() };
        assert!(g.validate().is_err());
        let g = GridConfig { x_range: (-4.0, 4.0), y_range: (-4.0, 4.0), pixel_size: 1.0, ..GridConfig::default() };
        g.validate().unwrap();
        assert_eq!(g.width(), 8);
    }
}
