//! Checks shared by the per-area suites and the acceptance run. Each returns the
//! measured quantity or a description of what went wrong.

use super::{apply_h, gradient_error, homogeneous, micro_config, micro_detector, monte_carlo_iou, probe, random_box, rng, uniform};
use mf2sf::detector::{assign_targets, pillarize, Detection, PillarTensor};
use mf2sf::eval::{ap_from_ranked, average_precision, bev_iou, iou_3d, EvalConfig, FrameResult, GroundTruth};
use mf2sf::geometry::{
    aggregate_static, aggregate_tracked, transform_frame, BoundingBox, ObjectClass, Point3, PointCloudFrame, Pose,
};
use mf2sf::tensor::{Graph, Var};
use mf2sf::training::{
    build_objective, consistency_loss, focal_loss, huber_loss, ConsistencyReduction, FeatureLayer, FocalVariant,
    LossConfig,
};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSED_TOL: f64 = 1e-3;

type Leaf = (Vec<f64>, Vec<usize>);
type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Leaf>,
    pub build: Build,
}

impl GradCase {
    fn new(name: &'static str, inputs: Vec<Leaf>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> Self {
        GradCase { name, inputs, build: Box::new(build) }
    }

    pub fn error(&self) -> f64 {
        gradient_error(&self.inputs, FD_STEP, &self.build)
    }
}

fn leaf(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Leaf {
    (uniform(&mut rng(seed), shape.iter().product(), lo, hi), shape.to_vec())
}

/// Values bounded away from zero so ReLU kinks are not straddled.
fn away_from_zero(seed: u64, shape: &[usize]) -> Leaf {
    let (mut v, s) = leaf(seed, shape, 0.1, 1.0);
    let signs = uniform(&mut rng(seed + 99), v.len(), -1.0, 1.0);
    for (x, s) in v.iter_mut().zip(signs) {
        if s < 0.0 {
            *x = -*x;
        }
    }
    (v, s)
}

pub fn elementwise_cases() -> Vec<GradCase> {
    let a = leaf(1, &[3, 4], -1.0, 1.0);
    let b = leaf(2, &[3, 4], -1.0, 1.0);
    vec![
        GradCase::new("add", vec![a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            probe(g, y, 7)
        }),
        GradCase::new("sub", vec![a.clone(), b.clone()], |g, v| {
            let y = g.sub(v[0], v[1]).unwrap();
            probe(g, y, 7)
        }),
        GradCase::new("mul", vec![a.clone(), b], |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            probe(g, y, 7)
        }),
        GradCase::new("scale", vec![a.clone()], |g, v| {
            let y = g.scale(v[0], -2.5);
            probe(g, y, 7)
        }),
        GradCase::new("relu", vec![away_from_zero(3, &[3, 4])], |g, v| {
            let y = g.relu(v[0]);
            probe(g, y, 7)
        }),
        GradCase::new("sigmoid", vec![leaf(4, &[3, 4], -3.0, 3.0)], |g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y, 7)
        }),
        GradCase::new("log", vec![leaf(5, &[3, 4], 0.2, 3.0)], |g, v| {
            let y = g.log(v[0]);
            probe(g, y, 7)
        }),
        GradCase::new("pow", vec![leaf(6, &[3, 4], 0.2, 2.0)], |g, v| {
            let y = g.pow(v[0], 2.7);
            probe(g, y, 7)
        }),
        GradCase::new("square", vec![a], |g, v| {
            let y = g.square(v[0]);
            probe(g, y, 7)
        }),
    ]
}

pub fn layout_cases() -> Vec<GradCase> {
    let a = leaf(11, &[2, 3, 4], -1.0, 1.0);
    let mut cases = vec![
        GradCase::new("sum", vec![a.clone()], |g, v| {
            let y = g.square(v[0]);
            g.sum(y)
        }),
        GradCase::new("mean", vec![a.clone()], |g, v| {
            let y = g.square(v[0]);
            g.mean(y).unwrap()
        }),
    ];
    for axis in 0..3 {
        cases.push(GradCase::new("max_over_axis", vec![a.clone()], move |g, v| {
            let y = g.max_over_axis(v[0], axis).unwrap();
            probe(g, y, 8)
        }));
    }
    cases.push(GradCase::new("concat", vec![a.clone(), leaf(12, &[2, 5, 4], -1.0, 1.0)], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1).unwrap();
        probe(g, y, 9)
    }));
    cases.push(GradCase::new("reshape", vec![a], |g, v| {
        let y = g.reshape(v[0], &[6, 4]).unwrap();
        let y = g.square(y);
        probe(g, y, 10)
    }));
    cases.push(GradCase::new("add_bias", vec![leaf(13, &[5, 3], -1.0, 1.0), leaf(14, &[3], -1.0, 1.0)], |g, v| {
        let y = g.add_bias(v[0], v[1]).unwrap();
        let y = g.square(y);
        probe(g, y, 11)
    }));
    cases.push(GradCase::new("matmul", vec![leaf(15, &[4, 3], -1.0, 1.0), leaf(16, &[3, 5], -1.0, 1.0)], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        probe(g, y, 12)
    }));
    cases
}

pub fn spatial_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    for (k, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
        let x = leaf(21, &[2, 3, 6, 6], -1.0, 1.0);
        let w = leaf(22, &[4, 3, k, k], -1.0, 1.0);
        let b = leaf(23, &[4], -1.0, 1.0);
        cases.push(GradCase::new("conv2d", vec![x, w, b], move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride).unwrap();
            probe(g, y, 13)
        }));
    }
    cases.push(GradCase::new("scatter_to_grid", vec![leaf(24, &[4, 3], -1.0, 1.0)], |g, v| {
        let cells = [(0, 1, 2), (1, 0, 0), (0, 3, 3), (1, 2, 1)];
        let y = g.scatter_to_grid(v[0], &cells, [2, 4, 4]).unwrap();
        probe(g, y, 14)
    }));
    cases.push(GradCase::new("upsample2x", vec![leaf(25, &[2, 3, 3, 2], -1.0, 1.0)], |g, v| {
        let y = g.upsample2x(v[0]).unwrap();
        probe(g, y, 15)
    }));
    cases
}

pub fn loss_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let p = leaf(31, &[2, 1, 3, 3], 0.05, 0.95);
    let labels: Vec<bool> = (0..18).map(|i| i % 4 == 0).collect();
    for variant in [FocalVariant::AsPrinted, FocalVariant::Balanced] {
        for gamma in [0.0, 2.0] {
            let labels = labels.clone();
            cases.push(GradCase::new("focal_loss", vec![p.clone()], move |g, v| {
                focal_loss(g, v[0], &labels, 0.25, gamma, variant, 3.0).unwrap()
            }));
        }
    }
    // residuals straddling 1/σ² on both sides but not within 1e-3 of it
    let mut d = leaf(32, &[24], -1.0, 1.0);
    for x in d.0.iter_mut() {
        if (x.abs() - 1.0 / 9.0).abs() < 1e-3 {
            *x += 0.01;
        }
    }
    let mask: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
    cases.push(GradCase::new("huber_loss", vec![d], move |g, v| huber_loss(g, v[0], &mask, 3.0, 2.0).unwrap()));
    let t = uniform(&mut rng(33), 12, -1.0, 1.0);
    for red in [ConsistencyReduction::Mean, ConsistencyReduction::Sum] {
        let t = t.clone();
        cases.push(GradCase::new("consistency_loss", vec![leaf(34, &[3, 4], -1.0, 1.0)], move |g, v| {
            let tc = g.constant(t.clone(), vec![3, 4]).unwrap();
            consistency_loss(g, v[0], tc, red).unwrap()
        }));
    }
    cases
}

pub fn all_op_cases() -> Vec<GradCase> {
    let mut v = elementwise_cases();
    v.extend(layout_cases());
    v.extend(spatial_cases());
    v.extend(loss_cases());
    v
}

/// Runs every case; returns the worst error and an entry for each case over `tol`.
pub fn worst_case(cases: &[GradCase], tol: f64) -> (f64, Vec<String>) {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for c in cases {
        let e = c.error();
        worst = worst.max(e);
        if !(e < tol) {
            failures.push(format!("{}: {e:e}", c.name));
        }
    }
    (worst, failures)
}

fn micro_batch() -> (Vec<PillarTensor>, Vec<BoundingBox>) {
    let grid = micro_config().grid;
    let mut r = rng(41);
    let mut clouds = Vec::new();
    for _ in 0..2 {
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| [uniform(&mut r, 1, -3.9, 3.9)[0], uniform(&mut r, 1, -3.9, 3.9)[0], uniform(&mut r, 1, -0.5, 2.0)[0]])
            .collect();
        let feats = uniform(&mut r, 40, 0.0, 1.0);
        clouds.push(pillarize(&pts, &feats, 1, &grid, 3));
    }
    let boxes = vec![
        BoundingBox::new([1.0, -1.2, 0.8], [1.9, 4.5, 1.6], 0.4, 1, ObjectClass::Vehicle).unwrap(),
        BoundingBox::new([-2.0, 2.0, 0.9], [1.0, 2.0, 1.5], -1.2, 2, ObjectClass::Vehicle).unwrap(),
    ];
    (clouds, boxes)
}

/// Relative gradient error of the full objective (existence + localization +
/// λ·consistency) of the micro detector with respect to every parameter.
pub fn composed_objective_error() -> f64 {
    let det = micro_detector(5);
    let (clouds, boxes) = micro_batch();
    let grid = &det.config.grid;
    let targets = [assign_targets(&boxes[..1], grid), assign_targets(&boxes, grid)];
    let trefs: Vec<_> = targets.iter().collect();
    let prefs: Vec<_> = clouds.iter().collect();
    let phi_len = 2 * 3 * 4 * 4;
    let teacher = uniform(&mut rng(6), phi_len, 0.0, 0.5);
    let cfg = LossConfig { lambda: 0.7, feature_layer: FeatureLayer::Fused, ..LossConfig::default() };
    // Zero-initialised biases put every empty pixel exactly on a ReLU kink; evaluate at
    // a generic point instead.
    let mut r = rng(7);
    let inputs: Vec<Leaf> = det
        .params
        .iter()
        .map(|t| {
            let data = if t.name.ends_with(".bias") { uniform(&mut r, t.data.len(), -0.2, 0.2) } else { t.data.clone() };
            (data, t.shape.clone())
        })
        .collect();
    gradient_error(&inputs, FD_STEP, |g, vars| {
        let fw = det.forward_with(g, vars.to_vec(), &prefs).unwrap();
        build_objective(g, &fw, &trefs, Some(&teacher), &cfg).unwrap().total
    })
}

fn random_pose(r: &mut rand_chacha::ChaCha8Rng) -> Pose {
    let rot = Rotation3::from_euler_angles(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(-3.1..3.1));
    let t = Vector3::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(-2.0..2.0));
    Pose::new(rot.into_inner(), t).unwrap()
}

/// Worst coordinate deviation of `transform_frame` from the homogeneous-matrix oracle
/// over random pose pairs, including the round trip back to the source frame.
pub fn transform_oracle_worst(pairs: usize) -> f64 {
    let mut r = rng(17);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let src_pose = random_pose(&mut r);
        let dst_pose = random_pose(&mut r);
        let pts: Vec<Point3> = (0..100)
            .map(|_| {
                let v = uniform(&mut r, 3, -60.0, 60.0);
                [v[0], v[1], v[2]]
            })
            .collect();
        let frame = PointCloudFrame::new(0, pts.clone(), vec![], 0, src_pose, vec![]).unwrap();
        let oracle = homogeneous(&dst_pose).try_inverse().unwrap() * homogeneous(&src_pose);
        let got = transform_frame(&frame, &dst_pose);
        for (p, q) in pts.iter().zip(&got) {
            let e = apply_h(&oracle, p);
            for k in 0..3 {
                worst = worst.max((e[k] - q[k]).abs());
            }
        }
        let back_frame = PointCloudFrame::new(1, got, vec![], 0, dst_pose, vec![]).unwrap();
        for (p, q) in pts.iter().zip(transform_frame(&back_frame, &src_pose)) {
            for k in 0..3 {
                worst = worst.max((p[k] - q[k]).abs());
            }
        }
    }
    worst
}

pub const NOISE: f64 = 0.02;
const DT: f64 = 0.1;

/// Ego drives along x; one object follows `object_pose(t)` in world coordinates.
/// Every frame observes the same box-local surface points plus bounded noise.
pub fn scripted_frames(object_pose: impl Fn(f64) -> Pose, n: usize) -> (Vec<PointCloudFrame>, Vec<Point3>) {
    let size = [1.9, 4.5, 1.6];
    let mut r = rng(23);
    let local: Vec<Point3> = (0..300)
        .map(|_| [r.random_range(-2.2..2.2), r.random_range(-0.9..0.9), r.random_range(-0.75..0.75)])
        .collect();
    let frames = (0..n)
        .map(|i| {
            let t = i as f64 * DT;
            let ego = Pose::from_yaw(0.05 * t, [5.0 * t, 0.0, 2.0]);
            let to_sensor = ego.inverse().compose(&object_pose(t));
            let pts = local
                .iter()
                .map(|p| {
                    let q = to_sensor.transform_point(p);
                    let e = uniform(&mut r, 3, -NOISE, NOISE);
                    [q[0] + e[0], q[1] + e[1], q[2] + e[2]]
                })
                .collect();
            let c = to_sensor.transform_point(&[0.0, 0.0, 0.0]);
            let b = BoundingBox::new(c, size, to_sensor.yaw(), 7, ObjectClass::Vehicle).unwrap();
            PointCloudFrame::new(i as u32, pts, vec![], 0, ego, vec![b]).unwrap()
        })
        .collect();
    (frames, local)
}

/// Extent of `pts` along the target box's local x and y axes.
fn extents(pts: &[Point3], b: &BoundingBox) -> [f64; 2] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pts {
        let l = b.to_local(p);
        for k in 0..2 {
            lo[k] = lo[k].min(l[k]);
            hi[k] = hi[k].max(l[k]);
        }
    }
    [hi[0] - lo[0], hi[1] - lo[1]]
}

fn clean_extents(local: &[Point3]) -> [f64; 2] {
    let f = |k: usize| {
        let (lo, hi) = local.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[k]), b.max(p[k])));
        hi - lo
    };
    [f(0), f(1)]
}

/// 10 m/s along world y, heading along the motion.
pub fn straight_mover(t: f64) -> Pose {
    Pose::from_yaw(std::f64::consts::FRAC_PI_2, [12.0, -8.0 + 10.0 * t, 0.8])
}
pub const STRAIGHT_SPEED: f64 = 10.0;

/// 8 m/s on a circle of radius 20 m: yaw rate 0.4 rad/s.
pub fn turning_mover(t: f64) -> Pose {
    let a = TURNING_SPEED * t / 20.0;
    Pose::from_yaw(a + std::f64::consts::FRAC_PI_2, [20.0 * a.cos() - 10.0, 20.0 * a.sin(), 0.8])
}
pub const TURNING_SPEED: f64 = 8.0;

/// Tracked aggregation keeps the object as compact as one clean frame, while static
/// aggregation smears it along the motion by about the distance travelled.
pub fn check_deblur(object_pose: impl Fn(f64) -> Pose, speed: f64) -> Result<(), String> {
    let (frames, local) = scripted_frames(object_pose, 5);
    let tb = frames[4].boxes[0];
    let clean = clean_extents(&local);
    let single = extents(&frames[4].points, &tb);
    let tracked = aggregate_tracked(&frames, 4).map_err(|e| e.to_string())?;
    if tracked.len() != 5 * local.len() {
        return Err(format!("tracked aggregate has {} points, expected {}", tracked.len(), 5 * local.len()));
    }
    let agg = extents(&tracked.points, &tb);
    let bound = |k: usize| clean[k] + 2.0 * NOISE + 1e-9;
    for k in 0..2 {
        if single[k] > bound(k) || agg[k] > bound(k) {
            return Err(format!("axis {k}: single {} tracked {} vs clean {}", single[k], agg[k], clean[k]));
        }
    }
    let stat = aggregate_static(&frames, 4).map_err(|e| e.to_string())?;
    let smeared = extents(&stat.points, &tb);
    let span = speed * 4.0 * DT;
    if smeared[0] < clean[0] + 0.9 * span - 2.0 * NOISE {
        return Err(format!("static extent {} for span {span}", smeared[0]));
    }
    Ok(())
}

/// Worst absolute deviation of BEV and 3D IoU from Monte-Carlo estimates.
pub fn iou_monte_carlo_worst(pairs: usize) -> f64 {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for i in 0..pairs as u64 {
        let a = random_box(&mut r, 1.5);
        let b = random_box(&mut r, 1.5);
        let bev = monte_carlo_iou(&a, &b, false, 200_000, i);
        let vol = monte_carlo_iou(&a, &b, true, 200_000, i + 10_000);
        worst = worst.max((bev - bev_iou(&a, &b)).abs()).max((vol - iou_3d(&a, &b)).abs());
    }
    worst
}

/// Identical boxes give 1, disjoint ones 0, and IoU is symmetric.
pub fn iou_exact_cases() -> Result<(), String> {
    let mut r = rng(5);
    for _ in 0..100 {
        let a = random_box(&mut r, 10.0);
        if (bev_iou(&a, &a) - 1.0).abs() >= 1e-9 || (iou_3d(&a, &a) - 1.0).abs() >= 1e-9 {
            return Err(format!("self IoU of {a:?} is not 1"));
        }
        let mut far = a;
        far.center[0] += 20.0;
        if bev_iou(&a, &far) != 0.0 {
            return Err("laterally disjoint boxes overlap".into());
        }
        let mut above = a;
        above.center[2] += a.size[2] + 0.01;
        if iou_3d(&a, &above) != 0.0 {
            return Err("vertically disjoint boxes overlap".into());
        }
        let b = random_box(&mut r, 2.0);
        if (bev_iou(&a, &b) - bev_iou(&b, &a)).abs() >= 1e-9 {
            return Err("IoU is not symmetric".into());
        }
    }
    Ok(())
}

pub fn vbox(x: f64, y: f64) -> BoundingBox {
    BoundingBox::new([x, y, 0.8], [1.9, 4.5, 1.6], 0.0, 0, ObjectClass::Vehicle).unwrap()
}

/// Three ground truths, four detections: ranked TP, FP, TP, FP (the last a duplicate).
/// Precision after each: 1, 1/2, 2/3, 1/2; recall 1/3, 1/3, 2/3, 2/3.
/// Interpolated area: (1/3)·1 + (1/3)·(2/3) = 5/9.
pub fn three_gt_four_predictions() -> Result<(), String> {
    let gts = vec![
        GroundTruth { bbox: vbox(10.0, 0.0), num_points: 40 },
        GroundTruth { bbox: vbox(0.0, 12.0), num_points: 40 },
        GroundTruth { bbox: vbox(-15.0, 0.0), num_points: 40 },
    ];
    let detections = vec![
        Detection { bbox: vbox(10.0, 0.0), score: 0.9 },
        Detection { bbox: vbox(0.0, -20.0), score: 0.8 },
        Detection { bbox: vbox(0.0, 12.0), score: 0.7 },
        Detection { bbox: vbox(10.05, 0.0), score: 0.6 },
    ];
    let cfg = EvalConfig::for_class(ObjectClass::Vehicle);
    let r = average_precision(&[FrameResult { gts, detections }], &cfg);
    let expected = 1.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0);
    let got = [r.iou3d.overall, r.bev.overall, Some(ap_from_ranked(&[true, false, true, false], 3))];
    for g in got {
        match g {
            Some(v) if (v - expected).abs() < 1e-12 => {}
            other => return Err(format!("AP {other:?}, expected {expected}")),
        }
    }
    Ok(())
}

/// A ground truth with 5 points is not counted and its matching detection is dropped;
/// with 6 it is.
pub fn point_filter_drops_sparse_ground_truth() -> Result<(), String> {
    let cfg = EvalConfig::for_class(ObjectClass::Vehicle);
    let frame = |n: usize| FrameResult {
        gts: vec![GroundTruth { bbox: vbox(10.0, 0.0), num_points: n }],
        detections: vec![Detection { bbox: vbox(10.0, 0.0), score: 0.9 }],
    };
    let five = average_precision(&[frame(5)], &cfg);
    let six = average_precision(&[frame(6)], &cfg);
    if five.iou3d.overall.is_some() || five.iou3d.overall_predictions != 0 {
        return Err(format!("5-point GT still scored: {:?}", five.iou3d.overall));
    }
    if six.iou3d.overall != Some(1.0) {
        return Err(format!("6-point GT scored {:?}", six.iou3d.overall));
    }
    Ok(())
}
