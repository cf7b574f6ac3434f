mod common;

use common::{cost_gradient_case, primitive_case, CASES, TOL};
use rcnas::tensor::Primitive;

#[test]
fn every_primitive_matches_central_differences() {
    let mut bad = Vec::new();
    for p in Primitive::ALL {
        for seed in 0..CASES {
            let err = primitive_case(p, seed).unwrap();
            if err > TOL {
                bad.push(format!("{} seed {seed}: {err:.3e}", p.name()));
            }
        }
    }
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn expected_cost_gradient_matches_central_differences() {
    for seed in 0..CASES {
        let err = cost_gradient_case(seed).unwrap();
        assert!(err <= TOL, "seed {seed}: {err:.3e}");
    }
}
