use std::path::Path;

use crate::detector::{pillarize, GridConfig, PillarTensor};
use crate::eval::GroundTruth;
use crate::geometry::{aggregate_tracked, BoundingBox, GeometryError, ObjectClass, Point3};
use crate::simdata::{read_sequence, DatasetManifest, Sequence, SimDataError, Split};

/// Sequences of one split, in manifest order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

/// A frame addressed as `(sequence, frame)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub sequence: usize,
    pub frame: usize,
}

/// Which cloud the network sees for a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    SingleFrame,
    /// Tracked aggregation of up to `frames` frames ending at the sample.
    Tracked { frames: usize },
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>, split: Split) -> Result<Self, SimDataError> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir)?;
        let sequences = manifest.files(split).map(|f| read_sequence(dir.join(f))).collect::<Result<_, _>>()?;
        Ok(Dataset { sequences })
    }

    pub fn samples(&self) -> Vec<SampleRef> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(sequence, s)| (0..s.frames.len()).map(move |frame| SampleRef { sequence, frame }))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points and features seen by the network for `s`, in the sample frame's coordinates.
    pub fn cloud(&self, s: SampleRef, mode: InputMode) -> Result<(Vec<Point3>, Vec<f64>, usize), GeometryError> {
        let frames = &self.sequences[s.sequence].frames;
        let f = &frames[s.frame];
        match mode {
            InputMode::SingleFrame => Ok((f.points.clone(), f.features.clone(), f.feature_width)),
            InputMode::Tracked { frames: n } => {
                let start = (s.frame + 1).saturating_sub(n.max(1));
                let window = &frames[start..=s.frame];
                let agg = aggregate_tracked(window, window.len() - 1)?;
                Ok((agg.points, agg.features, agg.feature_width))
            }
        }
    }

    pub fn pillars(&self, s: SampleRef, mode: InputMode, grid: &GridConfig, seed: u64) -> Result<PillarTensor, GeometryError> {
        let (p, f, w) = self.cloud(s, mode)?;
        Ok(pillarize(&p, &f, w, grid, pillar_seed(seed, s)))
    }

    /// Boxes of `class` at `s` with at least `min_points` single-frame returns.
    pub fn target_boxes(&self, s: SampleRef, class: ObjectClass, min_points: usize) -> Vec<BoundingBox> {
        let f = &self.sequences[s.sequence].frames[s.frame];
        f.boxes.iter().filter(|b| b.class == class && f.count_points_in(b) >= min_points).copied().collect()
    }

    /// Evaluation ground truth at `s`, with single-frame point counts.
    pub fn ground_truth(&self, s: SampleRef, class: ObjectClass) -> Vec<GroundTruth> {
        let f = &self.sequences[s.sequence].frames[s.frame];
        f.boxes
            .iter()
            .filter(|b| b.class == class)
            .map(|b| GroundTruth { bbox: *b, num_points: f.count_points_in(b) })
            .collect()
    }
}

/// Pillar subsampling seed of a sample; independent of epoch and input mode.
pub fn pillar_seed(seed: u64, s: SampleRef) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [s.sequence as u64, s.frame as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}
