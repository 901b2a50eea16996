use nrmatch_bench::synth::*;
use nrmatch_core::geometry::{apply_h, identity3};
use nrmatch_tensor::Rng;

#[test]
fn zero_magnitude_is_identity() {
    let p = generate_pair(4, 64, 0.0).unwrap();
    let id = identity3::<f64>();
    assert!(p.h.iter().zip(&id).all(|(a, b)| (a - b).abs() < 1e-15));
    for i in 0..p.a.data.len() {
        if p.valid[i] {
            assert!((p.a.data[i] - p.b.data[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_same_pair() {
    assert_eq!(generate_pair(9, 64, 1.0).unwrap(), generate_pair(9, 64, 1.0).unwrap());
    assert_ne!(generate_pair(9, 64, 1.0).unwrap().h, generate_pair(10, 64, 1.0).unwrap().h);
}

#[test]
fn correspondences_reproject_exactly() {
    for seed in 0..5 {
        let p = generate_pair(seed, 128, 1.0).unwrap();
        let c = p.correspondences(8);
        assert!(c.len() > 100);
        for q in c {
            let (u, v) = apply_h(&p.h, q[0], q[1]).unwrap();
            assert!((u - q[2]).abs() < 1e-9 && (v - q[3]).abs() < 1e-9);
        }
    }
}

#[test]
fn warped_pixels_sample_the_source() {
    let p = generate_pair(2, 64, 1.0).unwrap();
    let hinv = nrmatch_tensor::linalg::inverse3(&p.h).unwrap();
    for y in (0..64).step_by(5) {
        for x in (0..64).step_by(5) {
            let i = y * 64 + x;
            let (sx, sy) = apply_h(&hinv, x as f64, y as f64).unwrap();
            match p.a.sample(sx, sy) {
                Some(v) => assert!(p.valid[i] && (v - p.b.data[i]).abs() < 1e-12),
                None => assert!(!p.valid[i]),
            }
        }
    }
}

#[test]
fn homography_stays_within_bounds() {
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let h = random_homography(&mut rng, 128, 1.0);
        // The centre moves by at most the translation bound plus perspective slack.
        let (u, v) = apply_h(&h, 63.5, 63.5).unwrap();
        assert!((u - 63.5).abs() < 16.0 && (v - 63.5).abs() < 16.0, "{u} {v}");
    }
}

#[test]
fn texture_is_in_range_and_not_flat() {
    let t = texture(64, 64, 1);
    let (lo, hi) = t.data.iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    assert!((lo - 0.05).abs() < 1e-12 && (hi - 0.95).abs() < 1e-12);
}

#[test]
fn size_must_be_a_multiple_of_eight() {
    assert!(generate_pair(1, 60, 1.0).is_err());
}
