mod common;

use rgib_core::diff::{finite_difference_check, Matrix, Tape};

#[test]
fn every_gradient_matches_central_differences() {
    for seed in 0..12 {
        for (name, r) in common::gradient_instance(seed).unwrap() {
            assert!(r.passed, "seed {seed} {name}: rel {:.3e}", r.max_rel_error);
            assert!(r.coords_checked > 0);
        }
    }
}

#[test]
fn fd_check_catches_a_wrong_gradient() {
    let x = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
    let wrong = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let r = rgib_core::diff::compare_gradient(
        |m| Ok(m.as_slice().iter().map(|v| v.exp()).sum()),
        &x,
        &wrong,
        1e-5,
        1e-4,
        None,
    )
    .unwrap();
    assert!(!r.passed);

    let ok = finite_difference_check(
        |t: &mut Tape, v| {
            let e = t.exp(v);
            Ok(t.sum(e))
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(ok.passed, "{ok:?}");
}
