//! Randomized invariants of geometry, pillarization, decoding, NMS and AP.

mod common;

use common::{brute_force_nms, micro_config, micro_detector};
use mf2sf::detector::{assign_targets, decode_pixel, nms, pillarize, Detection, GridConfig};
use mf2sf::eval::{average_precision, bev_iou, iou_3d, EvalConfig, FrameResult, GroundTruth};
use mf2sf::geometry::{normalize_angle, BoundingBox, ObjectClass, Pose};
use proptest::prelude::*;

fn arb_box(spread: f64) -> impl Strategy<Value = BoundingBox> {
    (
        -spread..spread,
        -spread..spread,
        -0.5f64..1.5,
        0.3f64..3.0,
        0.3f64..6.0,
        0.4f64..2.5,
        -std::f64::consts::PI..std::f64::consts::PI,
    )
        .prop_map(|(x, y, z, w, l, h, yaw)| BoundingBox::new([x, y, z], [w, l, h], yaw, 0, ObjectClass::Vehicle).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_symmetric_bounded(a in arb_box(3.0), b in arb_box(3.0)) {
        let (ab, ba) = (bev_iou(&a, &b), bev_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((0.0..=1.0).contains(&iou_3d(&a, &b)));
        prop_assert!((iou_3d(&a, &b) - iou_3d(&b, &a)).abs() < 1e-9);
    }

    #[test]
    fn iou_translation_invariant(a in arb_box(3.0), b in arb_box(3.0), dx in -100.0f64..100.0, dy in -100.0f64..100.0, dz in -5.0f64..5.0) {
        let shift = |bx: &BoundingBox| BoundingBox { center: [bx.center[0] + dx, bx.center[1] + dy, bx.center[2] + dz], ..*bx };
        prop_assert!((bev_iou(&a, &b) - bev_iou(&shift(&a), &shift(&b))).abs() < 1e-7);
        prop_assert!((iou_3d(&a, &b) - iou_3d(&shift(&a), &shift(&b))).abs() < 1e-7);
    }

    #[test]
    fn pose_round_trip(yaw in -3.0f64..3.0, x in -50.0f64..50.0, y in -50.0f64..50.0, px in -80.0f64..80.0, py in -80.0f64..80.0, pz in -3.0f64..3.0) {
        let p = Pose::from_yaw(yaw, [x, y, 1.0]);
        let q = p.inverse().transform_point(&p.transform_point(&[px, py, pz]));
        prop_assert!((q[0] - px).abs() < 1e-9 && (q[1] - py).abs() < 1e-9 && (q[2] - pz).abs() < 1e-9);
    }

    #[test]
    fn pillar_indices_match_floor_division(pts in proptest::collection::vec((-35.0f64..35.0, -35.0f64..35.0, -2.0f64..5.0), 0..300), seed in 0u64..1000) {
        let g = GridConfig::default();
        let points: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
        let t = pillarize(&points, &[], 0, &g, seed);
        let mut expected_cells = std::collections::BTreeSet::new();
        for p in &points {
            if p[0] >= -30.72 && p[0] < 30.72 && p[1] >= -30.72 && p[1] < 30.72 && p[2] >= -1.0 && p[2] <= 4.0 {
                expected_cells.insert(((p[1] + 30.72) / 0.96).floor() as usize * 64 + ((p[0] + 30.72) / 0.96).floor() as usize);
            }
        }
        let got: Vec<usize> = t.cells.iter().map(|&(r, c)| r * 64 + c).collect();
        prop_assert_eq!(got, expected_cells.into_iter().collect::<Vec<_>>());
        for k in 0..t.num_pillars() {
            let (r, c) = t.cells[k];
            for j in 0..t.counts[k] {
                let row = t.point(k, j);
                prop_assert_eq!(((row[1] + 30.72) / 0.96).floor() as usize, r);
                prop_assert_eq!(((row[0] + 30.72) / 0.96).floor() as usize, c);
            }
        }
    }

    #[test]
    fn decode_inverts_encode(b in arb_box(25.0)) {
        let g = GridConfig::default();
        let t = assign_targets(&[b], &g);
        let plane = t.height * t.width;
        prop_assert!(t.num_positives() >= 1);
        for idx in (0..plane).filter(|&i| t.owner[i].is_some()) {
            let loc = std::array::from_fn(|ch| t.regression[ch * plane + idx]);
            let d = decode_pixel(&loc, &g, idx / t.width, idx % t.width, ObjectClass::Vehicle).unwrap();
            for k in 0..3 {
                prop_assert!((d.center[k] - b.center[k]).abs() < 1e-5);
                prop_assert!((d.size[k] - b.size[k]).abs() < 1e-5);
            }
            prop_assert!(normalize_angle(d.heading - b.heading).abs() < 1e-5);
        }
    }

    #[test]
    fn nms_matches_brute_force(boxes in proptest::collection::vec((arb_box(6.0), 0.0f64..1.0), 0..40), iou in 0.1f64..0.9) {
        let dets: Vec<Detection> = boxes.into_iter().map(|(bbox, score)| Detection { bbox, score }).collect();
        prop_assert_eq!(nms(dets.clone(), iou), brute_force_nms(&dets, iou));
    }

    #[test]
    fn removing_a_false_positive_never_lowers_ap(
        gts in proptest::collection::vec((-25.0f64..25.0, -25.0f64..25.0), 1..6),
        jitter in proptest::collection::vec((-0.6f64..0.6, 0.0f64..1.0), 1..6),
        fps in proptest::collection::vec((-25.0f64..25.0, -25.0f64..25.0, 0.0f64..1.0), 1..5),
    ) {
        let vb = |x: f64, y: f64| BoundingBox::new([x, y, 0.8], [1.9, 4.5, 1.6], 0.0, 0, ObjectClass::Vehicle).unwrap();
        let gt: Vec<GroundTruth> = gts.iter().map(|&(x, y)| GroundTruth { bbox: vb(x, y), num_points: 20 }).collect();
        let mut dets: Vec<Detection> = gts.iter().zip(&jitter).map(|(&(x, y), &(j, s))| Detection { bbox: vb(x + j, y), score: s }).collect();
        let n_true = dets.len();
        dets.extend(fps.iter().map(|&(x, y, s)| Detection { bbox: vb(x, y), score: s }));
        let cfg = EvalConfig::for_class(ObjectClass::Vehicle);
        let full = average_precision(&[FrameResult { gts: gt.clone(), detections: dets.clone() }], &cfg);
        for k in n_true..dets.len() {
            let touches_gt = gt.iter().any(|g| bev_iou(&g.bbox, &dets[k].bbox) > 0.0);
            if touches_gt {
                continue;
            }
            let mut fewer = dets.clone();
            fewer.remove(k);
            let r = average_precision(&[FrameResult { gts: gt.clone(), detections: fewer }], &cfg);
            prop_assert!(r.bev.overall.unwrap() + 1e-12 >= full.bev.overall.unwrap());
            prop_assert!(r.iou3d.overall.unwrap() + 1e-12 >= full.iou3d.overall.unwrap());
        }
    }

    #[test]
    fn forward_invariant_to_point_order(perm_seed in 0u64..10_000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cfg = micro_config();
        let det = micro_detector(2);
        let pts: Vec<[f64; 3]> = (0..60).map(|i| [-3.9 + 0.13 * i as f64, 1.0 - 0.03 * i as f64, 0.02 * i as f64]).collect();
        let feats: Vec<f64> = (0..60).map(|i| (i % 7) as f64 / 7.0).collect();
        let a = det.predict(&[&pillarize(&pts, &feats, 1, &cfg.grid, 0)]).unwrap();
        let mut order: Vec<usize> = (0..60).collect();
        let mut pr = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
        order.shuffle(&mut pr);
        let p2: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();
        let f2: Vec<f64> = order.iter().map(|&i| feats[i]).collect();
        let b = det.predict(&[&pillarize(&p2, &f2, 1, &cfg.grid, 0)]).unwrap();
        for (x, y) in a[0].phi.iter().zip(&b[0].phi) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_padding_leaves_pillar_max_unchanged() {
    let mut cfg = micro_config();
    let det = micro_detector(4);
    let pts: Vec<[f64; 3]> = (0..30).map(|i| [0.2 + 0.02 * i as f64, 0.3, 0.05 * i as f64]).collect();
    let a = det.predict(&[&pillarize(&pts, &[], 0, &cfg.grid, 0)]).unwrap();
    cfg.grid.max_points_per_pillar *= 2;
    let b = det.predict(&[&pillarize(&pts, &[], 0, &cfg.grid, 0)]).unwrap();
    assert_eq!(a, b);
}
