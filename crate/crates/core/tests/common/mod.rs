//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use mf2sf::detector::{Detection, Detector, DetectorConfig, GridConfig};
use mf2sf::geometry::{BoundingBox, ObjectClass, Point3, Pose};
use mf2sf::tensor::{Graph, Var};
use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Worst relative error between analytic and central-difference gradients of a
/// scalar function of several tensors.
///
/// `build` records the function on a fresh graph from the given leaves. The error of
/// each input is `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
pub fn gradient_error<F>(inputs: &[(Vec<f64>, Vec<usize>)], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().zip(inputs).map(|(v, (_, s))| g.param(v.clone(), s.clone()).unwrap()).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(v, s)| g.param(v.clone(), s.clone()).unwrap()).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    let base: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, base[i].len());
        let mut num = 0.0;
        let mut den_a = 0.0;
        let mut den_n = 0.0;
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += h;
            let mut minus = base.clone();
            minus[i][j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            num += (analytic[j] - fd).powi(2);
            den_a += analytic[j].powi(2);
            den_n += fd.powi(2);
        }
        worst = worst.max(num.sqrt() / (den_a.sqrt() + den_n.sqrt()).max(1e-12));
    }
    worst
}

/// Weighted sum `Σ wᵢ xᵢ` with fixed pseudo-random weights, to turn any tensor into a
/// scalar with non-degenerate gradients.
pub fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = g.constant(uniform(&mut rng(seed), n, -1.0, 1.0), shape).unwrap();
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

/// Pose as a 4×4 homogeneous matrix built from its raw components.
pub fn homogeneous(p: &Pose) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = p.rotation[(r, c)];
        }
        m[(r, 3)] = p.translation[r];
    }
    m
}

pub fn apply_h(m: &Matrix4<f64>, p: &Point3) -> Point3 {
    let v = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [v[0], v[1], v[2]]
}

/// Containment by the four BEV edge half-planes plus the z interval.
pub fn halfplane_contains(b: &BoundingBox, p: &[f64; 3], check_z: bool) -> bool {
    let c = b.bev_corners();
    for i in 0..4 {
        let (a, e) = (c[i], c[(i + 1) % 4]);
        let cross = (e[0] - a[0]) * (p[1] - a[1]) - (e[1] - a[1]) * (p[0] - a[0]);
        if cross < 0.0 {
            return false;
        }
    }
    if check_z {
        let (z0, z1) = b.z_range();
        return p[2] >= z0 && p[2] <= z1;
    }
    true
}

/// Monte-Carlo IoU over the joint bounding region of two boxes.
pub fn monte_carlo_iou(a: &BoundingBox, b: &BoundingBox, three_d: bool, samples: usize, seed: u64) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for bx in [a, b] {
        for c in bx.bev_corners() {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let (z0, z1) = bx.z_range();
        lo[2] = lo[2].min(z0);
        hi[2] = hi[2].max(z1);
    }
    let mut r = rng(seed);
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let p = [r.random_range(lo[0]..hi[0]), r.random_range(lo[1]..hi[1]), r.random_range(lo[2]..hi[2])];
        let (ia, ib) = (halfplane_contains(a, &p, three_d), halfplane_contains(b, &p, three_d));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_box(r: &mut ChaCha8Rng, spread: f64) -> BoundingBox {
    BoundingBox::new(
        [r.random_range(-spread..spread), r.random_range(-spread..spread), r.random_range(-0.5..1.5)],
        [r.random_range(0.4..3.0), r.random_range(0.4..6.0), r.random_range(0.5..2.5)],
        r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        0,
        ObjectClass::Vehicle,
    )
    .unwrap()
}

/// Suppression by the definition: a box survives if no higher-ranked survivor
/// overlaps it above `iou`. Ranking is by score, then input order.
pub fn brute_force_nms(dets: &[Detection], iou: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut alive = vec![true; n];
    for (pos, &i) in rank.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        for &j in &rank[pos + 1..] {
            if mf2sf::eval::bev_iou(&dets[i].bbox, &dets[j].bbox) > iou {
                alive[j] = false;
            }
        }
    }
    rank.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
}

/// An 8×8-input detector small enough for exhaustive finite differences.
pub fn micro_config() -> DetectorConfig {
    DetectorConfig {
        grid: GridConfig { x_range: (-4.0, 4.0), y_range: (-4.0, 4.0), pixel_size: 1.0, ..GridConfig::default() },
        channels: 3,
        block_layers: [1, 1, 1],
        prior: 0.1,
    }
}

pub fn micro_detector(seed: u64) -> Detector<f64> {
    Detector::new(micro_config(), seed).unwrap()
}
pub mod suites;
