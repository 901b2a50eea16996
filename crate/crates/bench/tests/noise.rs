use nrmatch_bench::noise::*;
use nrmatch_bench::synth::texture;
use nrmatch_core::Image;

fn sample_variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

#[test]
fn unit_power_at_zero_db_gives_unit_variance() {
    let img = Image::filled(8, 8, 1.0);
    assert_eq!(image_power(&img), 1.0);
    assert_eq!(gaussian_variance(&img, 0.0), 1.0);
}

#[test]
fn variance_follows_the_twenty_log_rule() {
    let img = Image::filled(4, 4, 0.5);
    // E(I) = 0.25 and 20 dB divides by ten.
    assert!((gaussian_variance(&img, 20.0) - 0.025).abs() < 1e-15);
    assert!((gaussian_variance(&img, -20.0) - 2.5).abs() < 1e-15);
}

#[test]
fn infinite_snr_is_identity() {
    let img = texture(32, 32, 3);
    assert_eq!(add_gaussian_noise(&img, f64::INFINITY, 1), img);
}

#[test]
fn gaussian_field_variance_within_five_percent() {
    let img = texture(128, 128, 4);
    for snr in [5.0, 0.0, -5.0] {
        let s2 = gaussian_variance(&img, snr);
        let v = sample_variance(&gaussian_field(128 * 128, s2, 11));
        assert!((v / s2 - 1.0).abs() < 0.05, "snr {snr}: {v} vs {s2}");
    }
}

#[test]
fn lower_snr_means_more_noise() {
    let img = texture(64, 64, 5);
    let dist = |snr: f64| {
        let n = add_gaussian_noise(&img, snr, 2);
        n.data.iter().zip(&img.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    assert!(dist(5.0) < dist(0.0) && dist(0.0) < dist(-5.0));
}

#[test]
fn zero_variance_stripe_is_identity() {
    let img = texture(32, 32, 3);
    assert_eq!(add_stripe_noise(&img, 0.0, 1), img);
}

#[test]
fn constant_image_gets_column_constant_stripes() {
    let img = Image::filled(48, 16, 0.5);
    let out = add_stripe_noise(&img, 0.12, 9);
    let n = stripe_multipliers(48, 0.12, 9);
    let a = (3.0f64 * 0.12).sqrt();
    for x in 0..48 {
        assert!(n[x].abs() <= a);
        for y in 0..16 {
            assert!((out.at(x, y) - 0.5 * (1.0 + n[x])).abs() < 1e-15);
        }
    }
}

#[test]
fn stripe_multiplier_variance_within_ten_percent() {
    for (seed, var) in [(1, 0.05), (2, 0.10), (3, 0.15)] {
        let v = sample_variance(&stripe_multipliers(512, var, seed));
        assert!((v / var - 1.0).abs() < 0.1, "{var}: {v}");
    }
}

#[test]
fn outputs_stay_in_unit_range_and_input_is_untouched() {
    let img = texture(64, 64, 8);
    let copy = img.clone();
    for snr in [5.0, 2.0, 0.0, -2.0, -5.0] {
        assert!(add_gaussian_noise(&img, snr, 1).data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    for var in [0.05, 0.08, 0.10, 0.12, 0.15] {
        assert!(add_stripe_noise(&img, var, 1).data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(img, copy);
}

#[test]
fn noise_is_seed_deterministic() {
    let img = texture(32, 32, 1);
    let spec = NoiseSpec { kind: NoiseKind::Gaussian, level: 0.0, seed: 5 };
    assert_eq!(spec.apply(&img), spec.apply(&img));
    assert_ne!(spec.apply(&img), NoiseSpec { seed: 6, ..spec }.apply(&img));
}

#[test]
fn kind_names_round_trip() {
    for k in [NoiseKind::Gaussian, NoiseKind::Stripe] {
        assert_eq!(k.to_string().parse::<NoiseKind>().unwrap(), k);
    }
    assert!("salt".parse::<NoiseKind>().is_err());
}
