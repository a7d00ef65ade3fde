//! Central finite differences against the analytic gradients of every op, each loss,
//! and the whole detector objective.

mod common;

use common::suites::{self, GradCase, COMPOSED_TOL, OP_TOL};
use common::{rng, uniform};
use mf2sf::tensor::Graph;

fn check_all(cases: Vec<GradCase>) {
    let (_, failures) = suites::worst_case(&cases, OP_TOL);
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn elementwise_ops() {
    check_all(suites::elementwise_cases());
}

#[test]
fn reductions_and_layout() {
    check_all(suites::layout_cases());
}

#[test]
fn spatial_ops() {
    check_all(suites::spatial_cases());
}

#[test]
fn loss_gradients() {
    check_all(suites::loss_cases());
}

#[test]
fn scatter_backward_gathers_per_pillar_gradients() {
    let cells = [(0, 1, 2), (1, 0, 0), (0, 3, 3)];
    let mut g = Graph::<f64>::new();
    let x = g.param(uniform(&mut rng(1), 6, -1.0, 1.0), vec![3, 2]).unwrap();
    let grid = g.scatter_to_grid(x, &cells, [2, 4, 4]).unwrap();
    let w = uniform(&mut rng(2), 2 * 2 * 16, -1.0, 1.0);
    let wc = g.constant(w.clone(), vec![2, 2, 4, 4]).unwrap();
    let m = g.mul(grid, wc).unwrap();
    let s = g.sum(m);
    let gx = g.backward(s).unwrap().get(x).unwrap().to_vec();
    for (k, &(b, y, xx)) in cells.iter().enumerate() {
        for c in 0..2 {
            assert_eq!(gx[k * 2 + c], w[((b * 2 + c) * 4 + y) * 4 + xx]);
        }
    }
}

#[test]
fn composed_detector_objective() {
    let e = suites::composed_objective_error();
    assert!(e < COMPOSED_TOL, "composed objective: relative error {e:e}");
}
