mod common;

use std::time::Instant;

use aatracker::tensor::{gradient_check, Graph, Var};
use aatracker::Tensor;
use common::{gradient_suite, project, random, COORDS, STEP, TOL};

#[test]
fn every_op_matches_central_differences() {
    let start = Instant::now();
    let suite = gradient_suite();
    let failed: Vec<_> = suite.iter().filter(|c| !c.passed()).collect();
    for c in &suite {
        eprintln!("{:24} max rel {:.2e} over {} coords", c.name, c.max_rel_error, c.coords);
    }
    assert!(failed.is_empty(), "failing ops: {failed:?}");
    assert!(suite.len() >= 30);
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn broken_rule_is_caught() {
    // the second use of the input goes through a detached copy, so the
    // recorded gradient is half the true one
    let x = random(&[150], 0.5, 1.5, 9);
    let r = gradient_check(
        |g: &mut Graph, v: Var| {
            let cut = g.constant(g.value(v).clone())?;
            let m = g.mul(v, cut)?;
            project(g, m, 3)
        },
        &x,
        STEP,
        TOL,
        COORDS,
        0,
    )
    .unwrap();
    assert!(!r.passed());
    assert!(r.max_rel_error > 0.4);
}

#[test]
fn linear_graph_is_exact() {
    let x = Tensor::from_fn(&[200], |i| (i as f64).cos());
    let r = gradient_check(|g: &mut Graph, v: Var| project(g, v, 1), &x, STEP, TOL, COORDS, 0).unwrap();
    assert_eq!(r.coords_checked, COORDS);
    assert!(r.max_rel_error < 1e-8);
}
