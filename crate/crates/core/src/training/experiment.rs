//! The three-row comparison: single-frame baseline, distilled student and the
//! multi-frame oracle it learns from.

use crate::eval::{render_csv, EvalConfig, EvalReport};
use crate::geometry::ObjectClass;
use crate::simdata::{generate_split, SimDataError, Split};

use super::{
    evaluate_detector, train_baseline, train_stage1, train_stage2, Dataset, DecodeConfig, InputMode, LossConfig,
    StageConfig, TrainError, TrainOutcome, TrainOutputs,
};

pub const BASELINE_ROW: &str = "Baseline (single-frame)";
pub const STUDENT_ROW: &str = "+ Distillation (single-frame)";
pub const ORACLE_ROW: &str = "Oracle (multi-frame)";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub class: ObjectClass,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub frames: usize,
    pub stage: StageConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// 40 training and 10 evaluation sequences of 10 frames, 15 epochs per stage.
    pub fn desk(class: ObjectClass, seed: u64) -> Self {
        ExperimentConfig {
            class,
            train_sequences: 40,
            eval_sequences: 10,
            frames: 10,
            stage: StageConfig { class, epochs: 15, seed, ..StageConfig::default() },
            loss: LossConfig::for_class(class),
            decode: DecodeConfig::default(),
            eval: EvalConfig::for_class(class),
        }
    }

    pub fn seed(&self) -> u64 {
        self.stage.seed
    }

    /// Training and evaluation splits, generated from the run seed.
    pub fn generate(&self) -> Result<(Dataset, Dataset), SimDataError> {
        let train = generate_split(self.class, self.train_sequences, self.frames, self.seed(), Split::Train)?;
        let val = generate_split(self.class, self.eval_sequences, self.frames, self.seed(), Split::Val)?;
        Ok((Dataset { sequences: train }, Dataset { sequences: val }))
    }
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub teacher: TrainOutcome,
    pub baseline: TrainOutcome,
    pub student: TrainOutcome,
    /// Baseline, student, oracle.
    pub rows: Vec<(String, EvalReport)>,
}

impl Comparison {
    pub fn csv(&self) -> String {
        render_csv(&self.rows)
    }

    pub fn overall_3d(&self, row: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == row).and_then(|(_, r)| r.iou3d.overall)
    }
}

/// Trains teacher, baseline and student on `train` and scores all three on `val`.
pub fn run_comparison(cfg: &ExperimentConfig, train: &Dataset, val: &Dataset) -> Result<Comparison, TrainError> {
    let none = TrainOutputs::default();
    let (teacher, baseline) = rayon::join(
        || train_stage1(train, &cfg.stage, &cfg.loss, &none),
        || train_baseline(train, &cfg.stage, &cfg.loss, &none),
    );
    let (teacher, baseline) = (teacher?, baseline?);
    let student = train_stage2(train, &teacher.detector, &cfg.stage, &cfg.loss, &none)?;
    let score = |o: &TrainOutcome, mode: InputMode| {
        evaluate_detector(&o.detector, val, mode, cfg.class, cfg.decode, &cfg.eval, cfg.seed())
    };
    let rows = vec![
        (BASELINE_ROW.to_string(), score(&baseline, InputMode::SingleFrame)?),
        (STUDENT_ROW.to_string(), score(&student, InputMode::SingleFrame)?),
        (ORACLE_ROW.to_string(), score(&teacher, cfg.stage.teacher_input())?),
    ];
    Ok(Comparison { teacher, baseline, student, rows })
}
