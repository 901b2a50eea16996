use nrmatch_core::geometry::{
    acr, apply_h, dlt_homography, estimate_homography, evaluate_pair, fix_scale, identity3, ncm, rmse, success, Mat3,
    FAILED_RMSE, NCM_TOL_PX,
};
use nrmatch_core::CoreError;
use nrmatch_tensor::Rng;

fn random_h(rng: &mut Rng) -> Mat3 {
    let mut h: Mat3 = [
        rng.uniform(0.9, 1.1),
        rng.uniform(-0.2, 0.2),
        rng.uniform(-10.0, 10.0),
        rng.uniform(-0.2, 0.2),
        rng.uniform(0.9, 1.1),
        rng.uniform(-10.0, 10.0),
        rng.uniform(-5e-4, 5e-4),
        rng.uniform(-5e-4, 5e-4),
        1.0,
    ];
    fix_scale(&mut h);
    h
}

fn exact_points(rng: &mut Rng, h: &Mat3, n: usize) -> Vec<[f64; 4]> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.uniform(0.0, 128.0), rng.uniform(0.0, 128.0));
            let (u, v) = apply_h(h, x, y).unwrap();
            [x, y, u, v]
        })
        .collect()
}

fn max_diff(a: &Mat3, b: &Mat3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn identity_correspondences_give_identity() {
    let pts = exact_points(&mut Rng::new(1), &identity3(), 20);
    assert!(max_diff(&estimate_homography(&pts).unwrap(), &identity3()) < 1e-10);
}

#[test]
fn recovers_random_homographies() {
    let mut rng = Rng::new(2);
    for _ in 0..20 {
        let h = random_h(&mut rng);
        let pts = exact_points(&mut rng, &h, 20);
        assert!(max_diff(&estimate_homography(&pts).unwrap(), &h) < 1e-6);
    }
}

#[test]
fn single_precision_estimate_is_close() {
    let h = random_h(&mut Rng::new(3));
    let pts: Vec<[f32; 4]> = exact_points(&mut Rng::new(3), &h, 30).iter().map(|p| p.map(|v| v as f32)).collect();
    let est = estimate_homography(&pts).unwrap();
    for (a, b) in est.iter().zip(&h) {
        assert!((*a as f64 - b).abs() < 1e-2 * b.abs().max(1e-2), "{a} vs {b}");
    }
}

#[test]
fn collinear_points_are_degenerate() {
    let line: Vec<[f64; 4]> = (0..4).map(|i| [i as f64, 2.0 * i as f64, i as f64 + 1.0, 2.0 * i as f64]).collect();
    assert!(matches!(estimate_homography(&line), Err(CoreError::Degenerate(_))));
    let src: Vec<(f64, f64)> = line.iter().map(|p| (p[0], p[1])).collect();
    let dst: Vec<(f64, f64)> = line.iter().map(|p| (p[2], p[3])).collect();
    assert!(matches!(dlt_homography(&src, &dst), Err(CoreError::Degenerate(_))));
    assert!(matches!(estimate_homography(&line[..3]), Err(CoreError::Degenerate(_))));
}

#[test]
fn projective_rescaling_conjugates_the_estimate() {
    let mut rng = Rng::new(4);
    for s in [0.25, 3.0, 40.0] {
        let h = random_h(&mut rng);
        let pts = exact_points(&mut rng, &h, 25);
        let scaled: Vec<[f64; 4]> = pts.iter().map(|p| p.map(|v| v * s)).collect();
        let hs = estimate_homography(&scaled).unwrap();
        // S⁻¹ H_s S should be the original map.
        let mut back: Mat3 = [
            hs[0], hs[1], hs[2] / s,
            hs[3], hs[4], hs[5] / s,
            hs[6] * s, hs[7] * s, hs[8],
        ];
        fix_scale(&mut back);
        let est = estimate_homography(&pts).unwrap();
        assert!(max_diff(&back, &est) < 1e-8, "scale {s}");
    }
}

#[test]
fn correct_match_rule_is_strict_per_axis() {
    let id = identity3();
    assert_eq!(ncm(&[[10.0, 10.0, 12.9, 12.9]], &id, NCM_TOL_PX), 1);
    assert_eq!(ncm(&[[10.0, 10.0, 13.1, 10.0]], &id, NCM_TOL_PX), 0);
    assert_eq!(ncm(&[[10.0, 10.0, 10.0, 13.0]], &id, NCM_TOL_PX), 0);
    assert_eq!(ncm::<f64>(&[], &id, NCM_TOL_PX), 0);
}

#[test]
fn ncm_shrinks_with_tolerance() {
    let mut rng = Rng::new(5);
    let h = random_h(&mut rng);
    let pts: Vec<[f64; 4]> =
        exact_points(&mut rng, &h, 200).iter().map(|p| [p[0], p[1], p[2] + rng.normal() * 3.0, p[3] + rng.normal() * 3.0]).collect();
    let mut prev = usize::MAX;
    for k in (0..=40).rev() {
        let c = ncm(&pts, &h, k as f64 * 0.25);
        assert!(c <= prev);
        prev = c;
    }
}

#[test]
fn success_is_strictly_more_than_ten() {
    assert!(success(11));
    assert!(!success(10));
    assert!(!success(0));
    for n in 0..10_000 {
        assert_eq!(success(n), n > 10);
    }
}

#[test]
fn rmse_examples() {
    let id = identity3();
    let exact = exact_points(&mut Rng::new(6), &id, 10);
    assert_eq!(rmse(&exact, &id), 0.0);
    let two = [[0.0, 0.0, -1.0, 0.0], [5.0, 5.0, 5.0, 4.0]];
    assert!((rmse(&two, &id) - 1.0).abs() < 1e-15);
}

#[test]
fn rmse_ignores_order() {
    let mut rng = Rng::new(7);
    let h = random_h(&mut rng);
    let mut pts: Vec<[f64; 4]> =
        exact_points(&mut rng, &h, 50).iter().map(|p| [p[0], p[1], p[2] + rng.normal(), p[3] + rng.normal()]).collect();
    let a = rmse(&pts, &h);
    rng.shuffle(&mut pts);
    assert!((rmse(&pts, &h) - a).abs() < 1e-12);
}

#[test]
fn acr_examples() {
    let r = acr(434.0, 993.0).unwrap();
    assert_eq!((r * 1000.0).round() / 1000.0, 0.437);
    assert!((r - 434.0 / 993.0).abs() < 1e-15);
    assert_eq!(acr(57.0, 57.0), Some(1.0));
    assert_eq!(acr(0.0, 12.0), Some(0.0));
    assert_eq!(acr(3.0, 0.0), None);
}

#[test]
fn failed_pairs_report_the_fallback_error() {
    let mut rng = Rng::new(8);
    let h = random_h(&mut rng);
    let good = exact_points(&mut rng, &h, 30);
    let r = evaluate_pair(&good, &h, 0.5);
    assert!(r.success && r.ncm == 30 && r.rmse < 1e-6 && !r.borderline);
    for n in [0, 5, 10] {
        let r = evaluate_pair(&good[..n], &h, 0.1);
        assert!(!r.success);
        assert_eq!(r.rmse, FAILED_RMSE);
        assert_eq!(r.borderline, n == 10);
    }
    let r = evaluate_pair(&good[..11], &h, 0.1);
    assert!(r.success && r.rmse < 1e-6);
}
