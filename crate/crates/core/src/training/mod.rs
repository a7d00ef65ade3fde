//! Losses and the two-stage teacher/student training pipeline.

mod data;
mod experiment;
mod losses;

pub use data::{pillar_seed, Dataset, InputMode, SampleRef};
pub use experiment::{run_comparison, Comparison, ExperimentConfig, BASELINE_ROW, ORACLE_ROW, STUDENT_ROW};
pub use losses::{
    consistency_loss, focal_loss, focal_term, huber_loss, huber_term, ConsistencyReduction, FocalVariant, P_EPS,
};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::detector::{assign_targets, decode, Detector, DetectorConfig, DetectorError, ForwardOutput, PillarTensor, TargetMap};
use crate::eval::{average_precision, EvalConfig, EvalReport, FrameResult};
use crate::geometry::{GeometryError, ObjectClass};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, write_checkpoint, AdamConfig, AdamState, CheckpointError, Graph, LrSchedule, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the classification and localization sums are scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNormalization {
    /// Divided by the batch's positive pixel count (at least 1).
    PerPositive,
    Sum,
}

/// Which student/teacher feature map the consistency term compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayer {
    /// Shared map feeding both heads.
    Fused,
    /// Output of the second backbone block.
    Block2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub focal_variant: FocalVariant,
    pub normalization: LossNormalization,
    pub consistency: ConsistencyReduction,
    pub feature_layer: FeatureLayer,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma: 2.0,
            sigma: 3.0,
            lambda: 0.0,
            focal_variant: FocalVariant::AsPrinted,
            normalization: LossNormalization::PerPositive,
            consistency: ConsistencyReduction::Mean,
            feature_layer: FeatureLayer::Fused,
        }
    }
}

impl LossConfig {
    /// Consistency weight for element-mean consistency, tuned on held-out seeds at
    /// desk scale. Pedestrians keep the vehicle-to-pedestrian ratio of the sum-mode
    /// weights.
    pub fn default_lambda(class: ObjectClass) -> f64 {
        match class {
            ObjectClass::Vehicle => 0.15,
            ObjectClass::Pedestrian => 0.015,
        }
    }

    /// Consistency weight when the consistency term is a plain sum.
    pub fn default_lambda_sum(class: ObjectClass) -> f64 {
        match class {
            ObjectClass::Vehicle => 0.1,
            ObjectClass::Pedestrian => 0.01,
        }
    }

    pub fn for_class(class: ObjectClass) -> Self {
        LossConfig { lambda: Self::default_lambda(class), ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.alpha > 0.0 && self.alpha < 1.0 && self.gamma >= 0.0 && self.sigma > 0.0 && self.lambda >= 0.0;
        if !ok || !self.lambda.is_finite() || !self.gamma.is_finite() || !self.sigma.is_finite() {
            return Err(TrainError::Config(format!(
                "need 0<α<1, γ≥0, σ>0, λ≥0; got α={} γ={} σ={} λ={}",
                self.alpha, self.gamma, self.sigma, self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub detector: DetectorConfig,
    pub class: ObjectClass,
    pub n_frames_teacher: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Training targets need at least this many single-frame points.
    pub min_target_points: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            detector: DetectorConfig::default(),
            class: ObjectClass::Vehicle,
            n_frames_teacher: 5,
            epochs: 75,
            batch_size: 8,
            warmup_fraction: 5.0 / 75.0,
            seed: 0,
            min_target_points: 1,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.detector.validate()?;
        if self.n_frames_teacher == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("frames, epochs and batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::Config(format!("warmup fraction {}", self.warmup_fraction)));
        }
        Ok(())
    }

    pub fn teacher_input(&self) -> InputMode {
        InputMode::Tracked { frames: self.n_frames_teacher }
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_c: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,lr,l_cls,l_loc,l_c,total";

impl LogRecord {
    pub fn to_line(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e},{:e}", self.step, self.lr, self.l_cls, self.l_loc, self.l_c, self.total)
    }
}

/// Graph handles of the loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub loc: Var,
    pub consistency: Option<Var>,
    pub total: Var,
}

/// Existence and localization losses, plus `λ·L_c` when teacher features are given.
///
/// `teacher` holds the frozen teacher's features for the whole batch, laid out like
/// the student's selected feature map.
pub fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    fw: &ForwardOutput,
    targets: &[&TargetMap],
    teacher: Option<&[T]>,
    cfg: &LossConfig,
) -> Result<LossTerms, TrainError> {
    let labels: Vec<bool> = targets.iter().flat_map(|t| t.existence.iter().map(|v| *v > 0.5)).collect();
    let n_pos = labels.iter().filter(|v| **v).count();
    let norm = match cfg.normalization {
        LossNormalization::PerPositive => n_pos.max(1) as f64,
        LossNormalization::Sum => 1.0,
    };
    let cls = focal_loss(g, fw.existence, &labels, cfg.alpha, cfg.gamma, cfg.focal_variant, norm)?;

    let reg: Vec<T> = targets.iter().flat_map(|t| t.regression.iter().map(|v| T::from_f64_lossy(*v))).collect();
    let mask: Vec<bool> = targets
        .iter()
        .flat_map(|t| {
            let pos = t.positive_mask();
            (0..crate::detector::LOC_CHANNELS).flat_map(move |_| pos.clone())
        })
        .collect();
    let shape = g.shape(fw.localization).to_vec();
    let target = g.constant(reg, shape)?;
    let residual = g.sub(fw.localization, target)?;
    let loc = huber_loss(g, residual, &mask, cfg.sigma, norm)?;
    let mut total = g.add(cls, loc)?;

    let mut consistency = None;
    if let Some(tf) = teacher {
        let student = match cfg.feature_layer {
            FeatureLayer::Fused => fw.phi,
            FeatureLayer::Block2 => fw.block2,
        };
        let shape = g.shape(student).to_vec();
        if tf.len() != g.value(student).len() {
            return Err(TensorError::Shape { op: "consistency_loss", shapes: vec![shape, vec![tf.len()]] }.into());
        }
        let t = g.constant(tf.to_vec(), shape)?;
        let lc = consistency_loss(g, student, t, cfg.consistency)?;
        consistency = Some(lc);
        if cfg.lambda != 0.0 {
            let weighted = g.scale(lc, T::from_f64_lossy(cfg.lambda));
            total = g.add(total, weighted)?;
        }
    }
    Ok(LossTerms { cls, loc, consistency, total })
}

/// Where a run writes its artifacts; `None` skips the file.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Rewritten at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector<f32>,
    pub log: Vec<LogRecord>,
}

fn save_checkpoint(det: &Detector<f32>, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut w, &det.params)?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn prepare_batch(
    data: &Dataset,
    batch: &[SampleRef],
    mode: InputMode,
    cfg: &StageConfig,
) -> Result<(Vec<PillarTensor>, Vec<TargetMap>), TrainError> {
    let grid = &cfg.detector.grid;
    let items: Vec<Result<(PillarTensor, TargetMap), GeometryError>> = batch
        .par_iter()
        .map(|&s| {
            let pillars = data.pillars(s, mode, grid, cfg.seed)?;
            let targets = assign_targets(&data.target_boxes(s, cfg.class, cfg.min_target_points), grid);
            Ok((pillars, targets))
        })
        .collect();
    let mut pillars = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for it in items {
        let (p, t) = it?;
        pillars.push(p);
        targets.push(t);
    }
    Ok((pillars, targets))
}

/// Teacher features for every sample, computed once with the teacher frozen.
fn teacher_features(
    teacher: &Detector<f32>,
    data: &Dataset,
    samples: &[SampleRef],
    cfg: &StageConfig,
    layer: FeatureLayer,
) -> Result<Vec<Vec<f32>>, TrainError> {
    let chunks: Vec<Result<Vec<Vec<f32>>, TrainError>> = samples
        .par_chunks(cfg.batch_size)
        .map(|chunk| {
            let (pillars, _) = prepare_batch(data, chunk, cfg.teacher_input(), cfg)?;
            let refs: Vec<&PillarTensor> = pillars.iter().collect();
            let mut g = Graph::new();
            let fw = teacher.forward(&mut g, &refs, false)?;
            let v = match layer {
                FeatureLayer::Fused => fw.phi,
                FeatureLayer::Block2 => fw.block2,
            };
            let per = g.value(v).len() / chunk.len();
            Ok(g.value(v).chunks(per).map(|c| c.to_vec()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn run_training(
    data: &Dataset,
    mode: InputMode,
    teacher: Option<&Detector<f32>>,
    stage: &StageConfig,
    loss: &LossConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome, TrainError> {
    stage.validate()?;
    loss.validate()?;
    let samples = data.samples();
    if samples.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut det = Detector::<f32>::new(stage.detector.clone(), stage.seed)?;
    let cached = match teacher {
        Some(t) => {
            if t.config != det.config || t.params.layout() != det.params.layout() {
                return Err(DetectorError::Layout("teacher and student architectures differ".into()).into());
            }
            Some(teacher_features(t, data, &samples, stage, loss.feature_layer)?)
        }
        None => None,
    };
    let mut adam = AdamState::new(&det.params, stage.adam);
    let per_epoch = stage.steps_per_epoch(samples.len());
    let total_steps = per_epoch * stage.epochs;
    let warmup = (stage.warmup_fraction * total_steps as f64).round() as usize;
    let mut log = Vec::with_capacity(total_steps);
    let mut log_file = match &outputs.log {
        Some(p) => {
            let mut w = BufWriter::new(fs::File::create(p)?);
            writeln!(w, "{LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut step = 0;
    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stage.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        for chunk in order.chunks(stage.batch_size) {
            let refs: Vec<SampleRef> = chunk.iter().map(|&i| samples[i]).collect();
            let (pillars, targets) = prepare_batch(data, &refs, mode, stage)?;
            let prefs: Vec<&PillarTensor> = pillars.iter().collect();
            let trefs: Vec<&TargetMap> = targets.iter().collect();
            let teacher_batch: Option<Vec<f32>> =
                cached.as_ref().map(|c| chunk.iter().flat_map(|&i| c[i].iter().copied()).collect());

            let lr = stage.schedule.at(step, total_steps, warmup);
            let mut g = Graph::<f32>::new();
            let fw = det.forward(&mut g, &prefs, true).map_err(|e| match e {
                DetectorError::Tensor(TensorError::NonFinite(what)) => TrainError::NonFinite { step, what },
                other => other.into(),
            })?;
            let terms = build_objective(&mut g, &fw, &trefs, teacher_batch.as_deref(), loss)?;
            let rec = LogRecord {
                step,
                lr,
                l_cls: g.scalar(terms.cls) as f64,
                l_loc: g.scalar(terms.loc) as f64,
                l_c: terms.consistency.map_or(0.0, |v| g.scalar(v) as f64),
                total: g.scalar(terms.total) as f64,
            };
            if !rec.total.is_finite() {
                return Err(TrainError::NonFinite { step, what: "loss".into() });
            }
            let grads = g.backward(terms.total)?;
            let gv: Vec<Vec<f32>> =
                fw.params.iter().zip(det.params.iter()).map(|(v, t)| grads.get_or_zeros(*v, t.data.len())).collect();
            adam_step(&mut det.params, &gv, &mut adam, lr).map_err(|e| match e {
                TensorError::NonFinite(what) => TrainError::NonFinite { step, what },
                other => other.into(),
            })?;
            if let Some(w) = log_file.as_mut() {
                writeln!(w, "{}", rec.to_line())?;
            }
            log.push(rec);
            step += 1;
        }
        if let Some(w) = log_file.as_mut() {
            w.flush()?;
        }
        if let Some(p) = &outputs.checkpoint {
            save_checkpoint(&det, p)?;
        }
    }
    Ok(TrainOutcome { detector: det, log })
}

/// Stage 1: the multi-frame model on tracked aggregations ending at each frame.
pub fn train_stage1(data: &Dataset, stage: &StageConfig, loss: &LossConfig, outputs: &TrainOutputs) -> Result<TrainOutcome, TrainError> {
    run_training(data, stage.teacher_input(), None, stage, loss, outputs)
}

/// Stage 2: the single-frame model with consistency to the frozen teacher's features
/// of the same frame.
pub fn train_stage2(
    data: &Dataset,
    teacher: &Detector<f32>,
    stage: &StageConfig,
    loss: &LossConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome, TrainError> {
    run_training(data, InputMode::SingleFrame, Some(teacher), stage, loss, outputs)
}

/// Single-frame training with detection losses only.
pub fn train_baseline(data: &Dataset, stage: &StageConfig, loss: &LossConfig, outputs: &TrainOutputs) -> Result<TrainOutcome, TrainError> {
    run_training(data, InputMode::SingleFrame, None, stage, loss, outputs)
}

/// Decoding thresholds applied before scoring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_threshold: 0.3, nms_iou: 0.5 }
    }
}

/// Runs `det` on every frame of `data` and pairs detections with ground truth.
///
/// Ground truth point counts always come from the single frame, whatever `mode`.
pub fn predict_dataset<T: Scalar>(
    det: &Detector<T>,
    data: &Dataset,
    mode: InputMode,
    class: ObjectClass,
    decode_cfg: DecodeConfig,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<FrameResult>, TrainError> {
    let samples = data.samples();
    let grid = &det.config.grid;
    let chunks: Vec<Result<Vec<FrameResult>, TrainError>> = samples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let pillars = chunk.iter().map(|&s| data.pillars(s, mode, grid, seed)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&PillarTensor> = pillars.iter().collect();
            let outs = det.predict(&refs)?;
            Ok(chunk
                .iter()
                .zip(outs)
                .map(|(&s, o)| FrameResult {
                    gts: data.ground_truth(s, class),
                    detections: decode(&o, grid, class, decode_cfg.score_threshold, decode_cfg.nms_iou),
                })
                .collect())
        })
        .collect();
    let mut frames = Vec::with_capacity(samples.len());
    for c in chunks {
        frames.extend(c?);
    }
    Ok(frames)
}

pub fn evaluate_detector<T: Scalar>(
    det: &Detector<T>,
    data: &Dataset,
    mode: InputMode,
    class: ObjectClass,
    decode_cfg: DecodeConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    let frames = predict_dataset(det, data, mode, class, decode_cfg, seed, 8)?;
    Ok(average_precision(&frames, eval_cfg))
}
