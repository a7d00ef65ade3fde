//! `mf2sf`: data generation, teacher/student/baseline training, evaluation and reports.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage error.

mod config;
mod manifest;
mod plot;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use mf2sf::detector::{Detector, DetectorConfig};
use mf2sf::eval::{
    average_precision, parse_predictions, render_csv, render_predictions, EvalConfig, EvalReport, FrameResult,
    PredictionRecord, CSV_HEADER,
};
use mf2sf::geometry::ObjectClass;
use mf2sf::simdata::{generate_split, write_sequence, DatasetManifest, ManifestEntry, Split};
use mf2sf::tensor::read_checkpoint;
use mf2sf::training::{
    predict_dataset, train_baseline, train_stage1, train_stage2, ConsistencyReduction, Dataset, DecodeConfig,
    FeatureLayer, FocalVariant, InputMode, LossConfig, LossNormalization, StageConfig, TrainOutputs,
};

use manifest::RunManifest;

enum CliError {
    Usage(String),
    Internal(anyhow::Error),
}

impl<E: std::error::Error + Send + Sync + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Internal(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mf2sf", version, about = "Multi-frame to single-frame distillation for BEV object detection")]
struct Cli {
    /// Plain-text `key = value` defaults; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset directory with a manifest.
    GenData(GenDataArgs),
    /// Train the multi-frame teacher, the distilled student or the single-frame baseline.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction dump; writes a one-row metrics CSV.
    Eval(EvalArgs),
    /// Combine metrics CSVs of several runs into one table and a bar plot.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClassArg {
    Vehicle,
    Pedestrian,
}

impl From<ClassArg> for ObjectClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::Vehicle => ObjectClass::Vehicle,
            ClassArg::Pedestrian => ObjectClass::Pedestrian,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training sequences.
    #[arg(long, default_value_t = 40)]
    sequences: usize,
    #[arg(long, default_value_t = 10)]
    eval_sequences: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ClassArg::Vehicle)]
    class: ClassArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Teacher,
    Student,
    Baseline,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayerArg {
    Fused,
    Block2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FocalArg {
    AsPrinted,
    Balanced,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    PerPositive,
    Sum,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the checkpoint, log and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Frozen teacher checkpoint (student mode).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Consistency weight; defaults to the class default.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 75)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Frames aggregated for the teacher's input.
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// Defaults to the class recorded in the dataset manifest.
    #[arg(long, value_enum)]
    class: Option<ClassArg>,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    consistency: ReductionArg,
    #[arg(long, value_enum, default_value_t = LayerArg::Fused)]
    feature_layer: LayerArg,
    #[arg(long, value_enum, default_value_t = FocalArg::AsPrinted)]
    focal: FocalArg,
    #[arg(long, value_enum, default_value_t = NormArg::PerPositive)]
    normalization: NormArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InputArg {
    Single,
    Multi,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    ckpt: Option<PathBuf>,
    /// Prediction dump (`sequence,frame,x,y,z,w,l,h,heading,score` per line).
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    /// Model input: the single frame, or a tracked multi-frame aggregation.
    #[arg(long, value_enum, default_value_t = InputArg::Single)]
    input: InputArg,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, value_enum)]
    class: Option<ClassArg>,
    /// Match threshold; defaults to 0.7 for vehicles and 0.5 for pedestrians.
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    score_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// Pillar subsampling seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Row label; defaults to the checkpoint or dump file stem.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Eval output directories or metrics CSV files, in row order.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "Overall 3D mAP")]
    title: String,
}

/// Every argument of the chosen subcommand as `name=value`, defaults included.
fn snapshot(m: &ArgMatches) -> Vec<(String, String)> {
    let Some((_, sub)) = m.subcommand() else { return Vec::new() };
    let mut out: Vec<(String, String)> = sub
        .ids()
        .filter_map(|id| {
            let vals: Vec<String> = sub.get_raw(id.as_str())?.map(|v| v.to_string_lossy().into_owned()).collect();
            Some((id.as_str().to_string(), vals.join(" ")))
        })
        .collect();
    if let Some(c) = m.get_one::<PathBuf>("config") {
        out.push(("config".into(), c.display().to_string()));
    }
    out.sort();
    out.dedup();
    out
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("MF2SF_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| usage(format!("MF2SF_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Internal(e.into()))
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} directory {} does not exist", p.display())))
    }
}

fn manifest_class(dir: &Path) -> CliResult<ObjectClass> {
    let m = DatasetManifest::load(dir).map_err(|e| usage(format!("cannot read dataset manifest in {}: {e}", dir.display())))?;
    match m.header.iter().find(|(k, _)| k == "class") {
        Some((_, v)) => v.parse().map_err(|e: String| usage(e)),
        None => Ok(ObjectClass::Vehicle),
    }
}

fn load_data(dir: &Path, split: Split) -> CliResult<Dataset> {
    require_dir(dir, "data")?;
    let d = Dataset::load(dir, split).map_err(|e| usage(format!("cannot load {split} split of {}: {e}", dir.display())))?;
    if d.is_empty() {
        return Err(usage(format!("{split} split of {} is empty", dir.display())));
    }
    Ok(d)
}

fn load_detector(path: &Path) -> CliResult<Detector<f32>> {
    let mut f = fs::File::open(path).map_err(|e| usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let params = read_checkpoint(&mut std::io::BufReader::new(&mut f))?;
    Ok(Detector::from_params(DetectorConfig::default(), params)?)
}

fn gen_data(a: &GenDataArgs, config: Vec<(String, String)>) -> CliResult<()> {
    fs::create_dir_all(&a.out)?;
    let class = ObjectClass::from(a.class);
    let mut run = RunManifest::new("gen-data", config);
    run.seeds.push(("seed".into(), a.seed));
    let mut data = DatasetManifest {
        header: vec![
            ("class".into(), class.name().into()),
            ("frames".into(), a.frames.to_string()),
            ("seed".into(), a.seed.to_string()),
        ],
        entries: Vec::new(),
    };
    for (split, n) in [(Split::Train, a.sequences), (Split::Val, a.eval_sequences)] {
        let seqs = generate_split(class, n, a.frames, a.seed, split)?;
        for (i, s) in seqs.iter().enumerate() {
            let file = format!("{split}_{i:04}.mf2sf");
            let path = a.out.join(&file);
            write_sequence(s, &path)?;
            run.artifact("sequence", &path);
            data.entries.push(ManifestEntry { file, split });
        }
    }
    data.save(&a.out)?;
    run.artifact("dataset_manifest", &a.out.join(mf2sf::simdata::MANIFEST_FILE));
    run.write(&a.out)?;
    println!("wrote {} training and {} evaluation sequences to {}", a.sequences, a.eval_sequences, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs, config: Vec<(String, String)>) -> CliResult<()> {
    let teacher_path = match (a.mode, &a.teacher) {
        (Mode::Student, None) => return Err(usage("--mode student requires --teacher CKPT")),
        (Mode::Student, Some(p)) => Some(p.clone()),
        (_, Some(_)) => return Err(usage("--teacher is only used with --mode student")),
        _ => None,
    };
    require_dir(&a.data, "data")?;
    let class = match a.class {
        Some(c) => c.into(),
        None => manifest_class(&a.data)?,
    };
    let data = load_data(&a.data, Split::Train)?;
    let teacher = teacher_path.as_deref().map(load_detector).transpose()?;
    let stage = StageConfig {
        class,
        n_frames_teacher: a.frames,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..StageConfig::default()
    };
    stage.validate().map_err(|e| usage(e.to_string()))?;
    let loss = LossConfig {
        lambda: a.lambda.unwrap_or(LossConfig::default_lambda(class)),
        focal_variant: match a.focal {
            FocalArg::AsPrinted => FocalVariant::AsPrinted,
            FocalArg::Balanced => FocalVariant::Balanced,
        },
        normalization: match a.normalization {
            NormArg::PerPositive => LossNormalization::PerPositive,
            NormArg::Sum => LossNormalization::Sum,
        },
        consistency: match a.consistency {
            ReductionArg::Mean => ConsistencyReduction::Mean,
            ReductionArg::Sum => ConsistencyReduction::Sum,
        },
        feature_layer: match a.feature_layer {
            LayerArg::Fused => FeatureLayer::Fused,
            LayerArg::Block2 => FeatureLayer::Block2,
        },
        ..LossConfig::for_class(class)
    };
    loss.validate().map_err(|e| usage(e.to_string()))?;

    fs::create_dir_all(&a.out)?;
    let name = match a.mode {
        Mode::Teacher => "teacher",
        Mode::Student => "student",
        Mode::Baseline => "baseline",
    };
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.join(format!("{name}.ckpt"))),
        log: Some(a.out.join(format!("{name}_log.csv"))),
    };
    let outcome = match (a.mode, &teacher) {
        (Mode::Teacher, _) => train_stage1(&data, &stage, &loss, &outputs)?,
        (Mode::Baseline, _) => train_baseline(&data, &stage, &loss, &outputs)?,
        (Mode::Student, Some(t)) => train_stage2(&data, t, &stage, &loss, &outputs)?,
        (Mode::Student, None) => unreachable!("checked above"),
    };
    let mut run = RunManifest::new("train", config);
    run.seeds.push(("seed".into(), a.seed));
    run.config.push(("resolved-lambda".into(), loss.lambda.to_string()));
    run.config.push(("resolved-class".into(), class.name().into()));
    if let Some(p) = &teacher_path {
        run.artifact("teacher_checkpoint_input", p);
    }
    run.artifact("checkpoint", outputs.checkpoint.as_ref().expect("set above"));
    run.artifact("log", outputs.log.as_ref().expect("set above"));
    if let Some(last) = outcome.log.last() {
        run.metrics.push(("steps".into(), outcome.log.len().to_string()));
        run.metrics.push(("final_total_loss".into(), last.total.to_string()));
    }
    run.write(&a.out)?;
    println!("{name}: {} steps, checkpoint {}", outcome.log.len(), outputs.checkpoint.as_ref().expect("set above").display());
    Ok(())
}

fn frames_from_dump(data: &Dataset, class: ObjectClass, records: &[PredictionRecord]) -> CliResult<Vec<FrameResult>> {
    let samples = data.samples();
    let mut frames: Vec<FrameResult> =
        samples.iter().map(|&s| FrameResult { gts: data.ground_truth(s, class), detections: Vec::new() }).collect();
    for r in records {
        let idx = samples
            .iter()
            .position(|s| s.sequence == r.sequence && s.frame == r.frame)
            .ok_or_else(|| usage(format!("prediction for sequence {} frame {} is not in the split", r.sequence, r.frame)))?;
        frames[idx].detections.push(r.detection);
    }
    Ok(frames)
}

fn method_name(a: &EvalArgs) -> String {
    a.method.clone().unwrap_or_else(|| {
        a.ckpt
            .as_ref()
            .or(a.predictions.as_ref())
            .and_then(|p| p.file_stem())
            .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
    })
}

fn eval(a: &EvalArgs, config: Vec<(String, String)>) -> CliResult<()> {
    let split: Split = a.split.parse().map_err(|e: String| usage(e))?;
    require_dir(&a.data, "data")?;
    let class = match a.class {
        Some(c) => c.into(),
        None => manifest_class(&a.data)?,
    };
    let data = load_data(&a.data, split)?;
    let mut cfg = EvalConfig::for_class(class);
    if let Some(t) = a.iou {
        cfg.iou_threshold = t;
    }
    cfg.validate().map_err(usage)?;
    let mode = match a.input {
        InputArg::Single => InputMode::SingleFrame,
        InputArg::Multi => InputMode::Tracked { frames: a.frames.max(1) },
    };
    let (frames, dump) = match (&a.ckpt, &a.predictions) {
        (Some(ck), _) => {
            let det = load_detector(ck)?;
            let dc = DecodeConfig { score_threshold: a.score_threshold, nms_iou: a.nms_iou };
            let frames = predict_dataset(&det, &data, mode, class, dc, a.seed, 8)?;
            let records: Vec<PredictionRecord> = data
                .samples()
                .iter()
                .zip(&frames)
                .flat_map(|(s, f)| f.detections.iter().map(move |d| PredictionRecord { sequence: s.sequence, frame: s.frame, detection: *d }))
                .collect();
            (frames, Some(records))
        }
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read predictions {}: {e}", p.display())))?;
            let records = parse_predictions(&text, class).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            (frames_from_dump(&data, class, &records)?, None)
        }
        (None, None) => return Err(usage("one of --ckpt or --predictions is required")),
    };
    let report = average_precision(&frames, &cfg);
    let method = method_name(a);
    let csv = render_csv(&[(method.clone(), report.clone())]);
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        let mut run = RunManifest::new("eval", config);
        run.seeds.push(("seed".into(), a.seed));
        let metrics = out.join("metrics.csv");
        fs::write(&metrics, &csv)?;
        run.artifact("metrics", &metrics);
        if let Some(records) = dump {
            let p = out.join("predictions.csv");
            fs::write(&p, render_predictions(&records))?;
            run.artifact("predictions", &p);
        }
        run.metrics = metric_pairs(&report);
        run.write(out)?;
    }
    Ok(())
}

fn metric_pairs(r: &EvalReport) -> Vec<(String, String)> {
    let header: Vec<&str> = CSV_HEADER.split(',').skip(1).collect();
    let row = r.csv_row("x");
    header.iter().zip(row.split(',').skip(1)).map(|(h, v)| (h.to_string(), v.to_string())).collect()
}

/// Data rows of a metrics CSV, header removed.
fn read_rows(path: &Path) -> CliResult<Vec<String>> {
    let file = if path.is_dir() { path.join("metrics.csv") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| usage(format!("cannot read {}: {e}", file.display())))?;
    let rows: Vec<String> = text.lines().filter(|l| !l.trim().is_empty() && *l != CSV_HEADER).map(str::to_string).collect();
    let width = CSV_HEADER.split(',').count();
    for r in &rows {
        if r.split(',').count() != width {
            return Err(usage(format!("{}: malformed metrics row `{r}`", file.display())));
        }
    }
    Ok(rows)
}

fn report(a: &ReportArgs, config: Vec<(String, String)>) -> CliResult<()> {
    let mut rows = Vec::new();
    for r in &a.runs {
        rows.extend(read_rows(r)?);
    }
    let mut table = String::from(CSV_HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(r);
        table.push('\n');
    }
    let overall_3d = CSV_HEADER.split(',').position(|h| h == "3D Overall").expect("header has 3D Overall");
    let bars: Vec<(String, Option<f64>)> = rows
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[0].to_string(), f[overall_3d].parse().ok())
        })
        .collect();
    fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("comparison.csv");
    let svg_path = a.out.join("comparison.svg");
    fs::write(&csv_path, &table)?;
    fs::write(&svg_path, plot::bar_chart(&a.title, &bars))?;
    let mut run = RunManifest::new("report", config);
    for r in &a.runs {
        run.artifact("input", r);
    }
    run.artifact("table", &csv_path);
    run.artifact("plot", &svg_path);
    run.write(&a.out)?;
    print!("{table}");
    Ok(())
}

fn run(args: Vec<OsString>) -> CliResult<()> {
    let args = config::expand(args).map_err(usage)?;
    let matches = Cli::command().try_get_matches_from(args).map_err(|e| {
        let code = e.exit_code();
        let _ = e.print();
        if code == 0 {
            std::process::exit(0);
        }
        usage(String::new())
    })?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| usage(e.to_string()))?;
    init_threads()?;
    let config = snapshot(&matches);
    match &cli.command {
        Cmd::GenData(a) => gen_data(a, config),
        Cmd::Train(a) => train(a, config),
        Cmd::Eval(a) => eval(a, config),
        Cmd::Report(a) => report(a, config),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            if !m.is_empty() {
                eprintln!("error: {m}");
            }
            ExitCode::from(2)
        }
        Err(e @ CliError::Internal(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
