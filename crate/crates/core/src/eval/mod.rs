//! Rotated-box IoU and distance-binned average precision.

mod dump;
mod iou;

pub use dump::{parse_predictions, render_predictions, PredictionRecord, DUMP_HEADER};
pub use iou::{bev_intersection_area, bev_iou, clip_convex, iou_3d};

use std::fmt::Write as _;

use crate::detector::Detection;
use crate::geometry::{BoundingBox, ObjectClass};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Half-open `[lo, hi)` ranges of BEV center distance from the sensor.
    pub bins: Vec<(f64, f64)>,
    /// Ground truth needs more than this many points to count.
    pub min_points: usize,
}

impl EvalConfig {
    pub fn for_class(class: ObjectClass) -> Self {
        let iou_threshold = match class {
            ObjectClass::Vehicle => 0.7,
            ObjectClass::Pedestrian => 0.5,
        };
        EvalConfig { iou_threshold, bins: vec![(0.0, 30.0), (30.0, 50.0), (50.0, f64::INFINITY)], min_points: 5 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(format!("IoU threshold {} outside (0, 1]", self.iou_threshold));
        }
        if self.bins.iter().any(|(a, b)| !(a < b)) || self.bins.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err("distance bins must be ordered and non-overlapping".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub num_points: usize,
}

/// Ground truth and detections of one frame, in the same coordinates.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FrameResult {
    pub gts: Vec<GroundTruth>,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IouKind {
    Bev,
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &BoundingBox, b: &BoundingBox) -> f64 {
        match self {
            IouKind::Bev => bev_iou(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}

/// AP for one metric, overall and per distance bin. `None` marks a region without
/// ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub overall: Option<f64>,
    pub bins: Vec<Option<f64>>,
    pub overall_gt: usize,
    pub bin_gt: Vec<usize>,
    /// Detections counted (true or false positive) per region.
    pub overall_predictions: usize,
    pub bin_predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bev: MetricRow,
    pub iou3d: MetricRow,
}

pub const CSV_HEADER: &str =
    "Method,BEV Overall,BEV 0-30m,BEV 30-50m,BEV 50m-Inf,3D Overall,3D 0-30m,3D 30-50m,3D 50m-Inf";

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    /// One CSV line in [`CSV_HEADER`] order, values in percent.
    pub fn csv_row(&self, method: &str) -> String {
        let mut s = method.to_string();
        for row in [&self.bev, &self.iou3d] {
            for v in std::iter::once(row.overall).chain(row.bins.iter().copied()) {
                let _ = write!(s, ",{}", fmt_ap(v));
            }
        }
        s
    }
}

impl MetricRow {
    /// Per-region mean over runs, skipping runs without ground truth in the region.
    /// Counts are summed.
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let mean_of = |vals: Vec<Option<f64>>| {
            let got: Vec<f64> = vals.into_iter().flatten().collect();
            (!got.is_empty()).then(|| got.iter().sum::<f64>() / got.len() as f64)
        };
        let n_bins = rows.iter().map(|r| r.bins.len()).max().unwrap_or(0);
        let sum_at = |f: fn(&MetricRow) -> &Vec<usize>, i: usize| rows.iter().map(|r| f(r).get(i).copied().unwrap_or(0)).sum();
        MetricRow {
            overall: mean_of(rows.iter().map(|r| r.overall).collect()),
            bins: (0..n_bins).map(|i| mean_of(rows.iter().map(|r| r.bins.get(i).copied().flatten()).collect())).collect(),
            overall_gt: rows.iter().map(|r| r.overall_gt).sum(),
            bin_gt: (0..n_bins).map(|i| sum_at(|r| &r.bin_gt, i)).collect(),
            overall_predictions: rows.iter().map(|r| r.overall_predictions).sum(),
            bin_predictions: (0..n_bins).map(|i| sum_at(|r| &r.bin_predictions, i)).collect(),
        }
    }
}

impl EvalReport {
    /// Mean of several runs of the same method, e.g. over seeds.
    pub fn mean(reports: &[EvalReport]) -> EvalReport {
        let bev: Vec<MetricRow> = reports.iter().map(|r| r.bev.clone()).collect();
        let iou3d: Vec<MetricRow> = reports.iter().map(|r| r.iou3d.clone()).collect();
        EvalReport { bev: MetricRow::mean(&bev), iou3d: MetricRow::mean(&iou3d) }
    }
}

pub fn render_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for (m, r) in rows {
        s.push_str(&r.csv_row(m));
        s.push('\n');
    }
    s
}

/// All-point interpolated area under the precision–recall curve.
///
/// `ranked` holds the true-positive flag of every counted detection in descending
/// score order.
pub fn ap_from_ranked(ranked: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(ranked.len());
    let mut rec = Vec::with_capacity(ranked.len());
    for (i, &hit) in ranked.iter().enumerate() {
        tp += hit as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

type Region = Option<(f64, f64)>;

fn in_region(region: Region, dist: f64) -> bool {
    region.is_none_or(|(lo, hi)| dist >= lo && dist < hi)
}

struct FrameIous {
    /// `[detection][gt]`
    iou: Vec<Vec<f64>>,
    /// Detection indices by descending score.
    order: Vec<usize>,
}

fn region_ap(frames: &[FrameResult], ious: &[FrameIous], cfg: &EvalConfig, region: Region) -> (Option<f64>, usize, usize) {
    let mut scored: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut n_gt = 0;
    for (fi, (f, fx)) in frames.iter().zip(ious).enumerate() {
        let care: Vec<bool> = f
            .gts
            .iter()
            .map(|g| g.num_points > cfg.min_points && in_region(region, g.bbox.bev_distance_to_origin()))
            .collect();
        n_gt += care.iter().filter(|c| **c).count();
        let mut matched = vec![false; f.gts.len()];
        for (rank, &di) in fx.order.iter().enumerate() {
            let row = &fx.iou[di];
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if care[j] && !matched[j] && v >= cfg.iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let det = &f.detections[di];
            if let Some((j, _)) = best {
                matched[j] = true;
                scored.push((det.score, fi, rank, true));
            } else if row.iter().enumerate().any(|(j, &v)| !care[j] && v >= cfg.iou_threshold) {
                continue;
            } else if in_region(region, det.bbox.bev_distance_to_origin()) {
                scored.push((det.score, fi, rank, false));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let ranked: Vec<bool> = scored.iter().map(|s| s.3).collect();
    let ap = (n_gt > 0).then(|| ap_from_ranked(&ranked, n_gt));
    (ap, n_gt, scored.len())
}

fn metric_row(frames: &[FrameResult], cfg: &EvalConfig, kind: IouKind) -> MetricRow {
    let ious: Vec<FrameIous> = frames
        .iter()
        .map(|f| {
            let iou = f.detections.iter().map(|d| f.gts.iter().map(|g| kind.iou(&d.bbox, &g.bbox)).collect()).collect();
            let mut order: Vec<usize> = (0..f.detections.len()).collect();
            order.sort_by(|&a, &b| f.detections[b].score.total_cmp(&f.detections[a].score).then(a.cmp(&b)));
            FrameIous { iou, order }
        })
        .collect();
    let (overall, overall_gt, overall_predictions) = region_ap(frames, &ious, cfg, None);
    let mut row = MetricRow { overall, bins: vec![], overall_gt, bin_gt: vec![], overall_predictions, bin_predictions: vec![] };
    for &bin in &cfg.bins {
        let (ap, g, p) = region_ap(frames, &ious, cfg, Some(bin));
        row.bins.push(ap);
        row.bin_gt.push(g);
        row.bin_predictions.push(p);
    }
    row
}

/// Greedy score-ordered matching per frame, then all-point AP per region.
///
/// Ground truth with too few points, or outside the region being scored, is ignored:
/// detections matching it are neither true nor false positives. An unmatched
/// detection counts as a false positive only inside its own region.
pub fn average_precision(frames: &[FrameResult], cfg: &EvalConfig) -> EvalReport {
    EvalReport { bev: metric_row(frames, cfg, IouKind::Bev), iou3d: metric_row(frames, cfg, IouKind::ThreeD) }
}
