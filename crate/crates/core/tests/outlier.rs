mod common;

use nrmatch_core::geometry::{apply_h, random_scene, Mat3};
use nrmatch_core::outlier::{
    consensus_baseline, context_norm, weighted_eight_point, weighted_residual, weighted_trace, CorrespondenceBatch,
    Intrinsics,
};
use nrmatch_core::{CoreError, InlierWeights, OutlierNet, PixelMatchSet};
use nrmatch_tensor::{Rng, Tensor};

fn sign_free_distance(a: &Mat3, b: &Mat3) -> f64 {
    let plus = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let minus = a.iter().zip(b).map(|(x, y)| (x + y).powi(2)).sum::<f64>().sqrt();
    plus.min(minus)
}

fn epipolar(e: &Mat3, p: &[f64; 4]) -> f64 {
    let (x, xp) = ([p[0], p[1], 1.0], [p[2], p[3], 1.0]);
    (0..3).map(|i| xp[i] * (0..3).map(|j| e[3 * i + j] * x[j]).sum::<f64>()).sum()
}

fn random_batch(rng: &mut Rng, n: usize) -> CorrespondenceBatch {
    let pts: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.uniform(-1.0, 1.0))).collect();
    CorrespondenceBatch::new(&pts).unwrap()
}

#[test]
fn context_norm_of_identical_rows_is_zero() {
    let x = Tensor::from_rows(&vec![vec![0.3, -2.0, 7.0]; 5]).unwrap();
    assert!(context_norm(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn context_norm_two_values() {
    let y = context_norm(&Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap()).unwrap();
    // Mean 1, population std 1, so ±1/(1 + 1e-3).
    let want = 1.0 / 1.001;
    assert!((y.data()[0] + want).abs() < 1e-12 && (y.data()[1] - want).abs() < 1e-12);
    assert!((y.data()[0] + 1.0).abs() < 1e-2);
}

#[test]
fn context_norm_needs_two_rows() {
    let err = context_norm(&Tensor::zeros(&[1, 3])).unwrap_err();
    assert!(matches!(err, CoreError::Contract(_)));
}

#[test]
fn context_norm_commutes_with_permutation() {
    let mut rng = Rng::new(1);
    let x = common::random_tensor(&[12, 5], &mut rng, 3.0);
    let mut perm: Vec<usize> = (0..12).collect();
    rng.shuffle(&mut perm);
    let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let (y, py) = (context_norm(&x).unwrap(), context_norm(&px).unwrap());
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(py.row(k), y.row(i));
    }
}

#[test]
fn weights_from_logits() {
    let w = InlierWeights::from_logits(vec![0.0, 10.0, -3.0, 0.5]);
    assert_eq!(w.w[0], 0.0);
    assert_eq!(w.w[1], 10f64.tanh());
    assert!(w.w[1] > 0.99999999 && w.w[1] < 1.0);
    assert_eq!(w.w[2], 0.0);
    assert_eq!(w.mask(), vec![false, true, false, false]);
}

#[test]
fn classifier_is_permutation_equivariant_bitwise() {
    let net = OutlierNet::init(2).unwrap();
    let mut rng = Rng::new(2);
    for _ in 0..100 {
        let n = 8 + rng.below(40);
        let batch = random_batch(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted: Vec<[f64; 4]> = perm.iter().map(|&i| batch.point(i)).collect();
        let w = net.classify(&batch).unwrap();
        let pw = net.classify(&CorrespondenceBatch::new(&permuted).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pw.y[k].to_bits(), w.y[i].to_bits());
            assert_eq!(pw.w[k].to_bits(), w.w[i].to_bits());
        }
        // tanh rounds to exactly 1.0 in f64 beyond y ≈ 19.06.
        for (&y, &v) in w.y.iter().zip(&w.w) {
            assert!((0.0..=1.0).contains(&v));
            assert!(y > 19.0 || v < 1.0);
        }
    }
}

#[test]
fn classifier_rejects_missing_weights() {
    let mut net = OutlierNet::init(3).unwrap();
    let partial = net.params.subset("outlier.block");
    assert!(matches!(net.load(&partial), Err(CoreError::Load(_))));
    let full = OutlierNet::init(4).unwrap().params;
    net.load(&full).unwrap();
    assert_eq!(net.params.get("outlier.head.w").unwrap(), full.get("outlier.head.w").unwrap());
}

#[test]
fn half_extent_intrinsics_map_corners_to_unit_square() {
    let k = Intrinsics::half_extent(128, 96);
    let b = CorrespondenceBatch::from_pixels(&[[0.0, 48.0, 128.0, 0.0]], &k, &k).unwrap();
    assert_eq!(b.point(0), [-1.0, 0.0, 1.0, -0.75]);
}

#[test]
fn eight_point_recovers_synthetic_poses() {
    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let scene = random_scene(&mut rng, 20, false);
        let batch = CorrespondenceBatch::new(&scene.points).unwrap();
        let est = weighted_eight_point(&batch, &[1.0; 20]).unwrap().e;
        let norm = est.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(sign_free_distance(&est, &scene.e) < 1e-6);
        assert!(scene.points.iter().all(|p| epipolar(&est, p).abs() < 1e-8));
    }
}

#[test]
fn zero_weighted_outliers_are_inert() {
    let mut rng = Rng::new(6);
    for _ in 0..20 {
        let scene = random_scene(&mut rng, 20, false);
        let clean = weighted_eight_point(&CorrespondenceBatch::new(&scene.points).unwrap(), &[1.0; 20]).unwrap().e;
        let mut pts = scene.points.clone();
        let mut w = vec![1.0; 20];
        for _ in 0..20 {
            pts.push(std::array::from_fn(|_| rng.uniform(-1.0, 1.0)));
            w.push(0.0);
        }
        let mixed = weighted_eight_point(&CorrespondenceBatch::new(&pts).unwrap(), &w).unwrap().e;
        assert!(sign_free_distance(&clean, &mixed) < 1e-10);
    }
}

#[test]
fn too_few_weighted_rows_is_degenerate() {
    let scene = random_scene(&mut Rng::new(7), 20, false);
    let seven = CorrespondenceBatch::new(&scene.points[..7]).unwrap();
    assert!(matches!(weighted_eight_point(&seven, &[1.0; 7]), Err(CoreError::Degenerate(_))));
    let all = CorrespondenceBatch::new(&scene.points).unwrap();
    assert!(matches!(weighted_eight_point(&all, &[0.0; 20]), Err(CoreError::Degenerate(_))));
    let mut w = vec![0.0; 20];
    w[..7].fill(1.0);
    assert!(matches!(weighted_eight_point(&all, &w), Err(CoreError::Degenerate(_))));
}

#[test]
fn positive_weight_scaling_leaves_estimate_unchanged() {
    let mut rng = Rng::new(8);
    for _ in 0..20 {
        let scene = random_scene(&mut rng, 30, false);
        let batch = CorrespondenceBatch::new(&scene.points).unwrap();
        // Noisy inputs so the smallest eigenvalue is well separated from zero.
        let noisy: Vec<[f64; 4]> =
            scene.points.iter().map(|p| std::array::from_fn(|i| p[i] + rng.uniform(-1e-2, 1e-2))).collect();
        for b in [&batch, &CorrespondenceBatch::new(&noisy).unwrap()] {
            let w: Vec<f64> = (0..30).map(|_| rng.uniform(0.1, 1.0)).collect();
            let scaled: Vec<f64> = w.iter().map(|v| v * 37.5).collect();
            let e1 = weighted_eight_point(b, &w).unwrap().e;
            let e2 = weighted_eight_point(b, &scaled).unwrap().e;
            assert!(common::max_abs_diff(&e1, &e2) < 1e-12);
        }
    }
}

#[test]
fn exact_data_has_vanishing_smallest_eigenvalue() {
    let mut rng = Rng::new(9);
    for _ in 0..50 {
        let scene = random_scene(&mut rng, 20, false);
        let batch = CorrespondenceBatch::new(&scene.points).unwrap();
        let w = vec![1.0; 20];
        let e = weighted_eight_point(&batch, &w).unwrap().e;
        // Rayleigh quotient at the unit eigenvector equals the smallest eigenvalue.
        assert!(weighted_residual(&batch, &w, &e) < 1e-16 * weighted_trace(&batch, &w));
    }
}

fn homography_matches(rng: &mut Rng, n: usize) -> (Mat3, Vec<[f64; 4]>) {
    let h = [1.02, 0.05, 4.0, -0.03, 0.98, -3.0, 1e-4, -2e-4, 1.0];
    let pts = (0..n)
        .map(|_| {
            let (x, y) = (rng.uniform(0.0, 128.0), rng.uniform(0.0, 128.0));
            let (u, v) = apply_h(&h, x, y).unwrap();
            [x, y, u, v]
        })
        .collect();
    (h, pts)
}

#[test]
fn consensus_keeps_all_clean_matches() {
    let mut rng = Rng::new(10);
    let (_, pts) = homography_matches(&mut rng, 50);
    let (mask, _) = consensus_baseline(&PixelMatchSet::from_points(&pts), 1000, 3.0, &mut rng).unwrap();
    assert!(mask.iter().all(|&m| m));
}

#[test]
fn consensus_separates_contaminated_matches() {
    let mut rng = Rng::new(11);
    let (_, mut pts) = homography_matches(&mut rng, 50);
    for _ in 0..50 {
        pts.push(std::array::from_fn(|_| rng.uniform(0.0, 128.0)));
    }
    let (mask, _) = consensus_baseline(&PixelMatchSet::from_points(&pts), 1000, 3.0, &mut Rng::new(12)).unwrap();
    let true_in = mask[..50].iter().filter(|&&m| m).count();
    let false_in = mask[50..].iter().filter(|&&m| m).count();
    assert!(true_in >= 49, "{true_in} true inliers");
    assert!(false_in <= 2, "{false_in} false inliers");
}

#[test]
fn consensus_needs_four_matches() {
    let (_, pts) = homography_matches(&mut Rng::new(13), 3);
    let err = consensus_baseline(&PixelMatchSet::from_points(&pts), 100, 3.0, &mut Rng::new(13)).unwrap_err();
    assert!(matches!(err, CoreError::Degenerate(_)));
}
