//! Mann-Whitney results frozen from a reference statistics package.

use hfl::stats::mann_whitney;

fn check(x: &[f64], y: &[f64], u: f64, p: f64, exact: bool) {
    let r = mann_whitney(x, y).unwrap();
    assert_eq!(r.u1, u);
    assert_eq!(r.exact, exact);
    assert!((r.p - p).abs() < 1e-9, "p {} vs {p}", r.p);
    let s = mann_whitney(y, x).unwrap();
    assert_eq!(s.u2, u);
    assert!((s.p - p).abs() < 1e-12);
}

#[test]
fn exact_small_samples() {
    check(&[1., 2., 3., 4., 5.], &[6., 7., 8., 9., 10.], 0.0, 0.007936507936507936, true);
    check(&[1.5, 2.5, 7.1, 3.3], &[4.4, 5.2, 6.0, 8.8, 9.1, 0.3], 7.0, 0.35238095238095235, true);
}

#[test]
fn tied_samples_use_corrected_normal() {
    check(&[2., 3., 3., 2., 4.], &[9., 24., 6., 18., 13.], 0.0, 0.011667312343319386, false);
    check(&[3., 3., 3., 4., 3.], &[4., 6., 19., 4., 17.], 1.0, 0.01630633545749023, false);
}

#[test]
fn large_samples_use_normal() {
    let x: Vec<f64> = (1..=23).map(f64::from).collect();
    let mut y = vec![5., 9., 14., 22.];
    y.extend((30..=46).map(f64::from));
    check(&x, &y, 44.0, 3.664712711815077e-06, false);
}
