//! Bound calculators against `fixtures/bounds.json`, generated at 50 digits
//! by `fixtures/gen_bounds.py`.

mod common;

use palora::slt::{epsilon_l, rho, width_bound};

#[test]
fn calculators_match_high_precision_fixtures() {
    let (r, e, w, mismatches, total) = common::fixture_errors();
    assert_eq!(total, 300);
    assert!(r <= 1e-10, "rho {r:e}");
    assert!(e <= 1e-10, "epsilon_l {e:e}");
    assert!(w <= 1e-10, "width bound {w:e}");
    assert_eq!(mismatches, 0);
}

#[test]
fn closed_form_cases() {
    let e = std::f64::consts::E;
    let r = rho(1.0, 1.0, 1.0 - 1.0 / e, 0.0, 1.0 / e, 0.5).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    let e1 = epsilon_l(0.5, 1.0, 2, 0.0, &[]).unwrap();
    assert!((e1 - 0.2).abs() < 1e-15);
    assert_eq!(width_bound(7, 1.0 - 1.0 / e, 1.0 / e, 0.5, 1.0, 1.0).unwrap(), 7);
}
