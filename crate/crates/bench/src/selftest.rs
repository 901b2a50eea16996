//! Named invariant checks run by `nrmatch selftest`. Every check is seeded,
//! so the printed report is identical between runs.

use nrmatch_core::geometry::{apply_h, estimate_homography, ncm, random_scene, rmse, transfer_error, Mat3};
use nrmatch_core::matcher::{dual_softmax, heatmap_moments};
use nrmatch_core::outlier::{weighted_eight_point, weighted_residual, weighted_trace, CorrespondenceBatch};
use nrmatch_core::OutlierNet;
use nrmatch_tensor::linalg::inverse3;
use nrmatch_tensor::{Rng, Tensor};

use crate::noise::{add_gaussian_noise, add_stripe_noise, gaussian_field, gaussian_variance, stripe_multipliers};
use crate::synth::{generate_pair, texture};
use crate::{pgm, Result};

const SEED: u64 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("noise.range_and_reference", noise_range),
    ("noise.gaussian_variance", gaussian_stats),
    ("noise.stripe_column_constant", stripe_columns),
    ("noise.stripe_variance", stripe_stats),
    ("pgm.round_trip", pgm_round_trip),
    ("synth.identity_warp", identity_warp),
    ("synth.reprojection", synth_reprojection),
    ("matcher.dual_softmax_bounds", dual_softmax_bounds),
    ("matcher.heatmap_centre", heatmap_centre),
    ("outlier.permutation_equivariance", permutation_equivariance),
    ("outlier.weight_range", weight_range),
    ("geometry.eight_point_scale", eight_point_scale),
    ("geometry.epipolar_consistency", epipolar_consistency),
    ("metrics.ncm_monotone", ncm_monotone),
    ("metrics.rmse_order", rmse_order),
    ("metrics.homography_scale", homography_scale),
];

/// Runs every check; errors count as failures.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

pub fn report(results: &[CheckResult]) -> String {
    let mut s: String = results.iter().map(|r| format!("{r}\n")).collect();
    let failed = results.iter().filter(|r| !r.passed).count();
    s.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    s
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn noise_range() -> Result<(bool, String)> {
    let img = texture(64, 64, SEED);
    let before = img.clone();
    let g = add_gaussian_noise(&img, -5.0, SEED);
    let s = add_stripe_noise(&img, 0.15, SEED);
    let in_range = g.data.iter().chain(&s.data).all(|v| (0.0..=1.0).contains(v));
    Ok((in_range && img == before, format!("in range {in_range}, reference untouched {}", img == before)))
}

fn gaussian_stats() -> Result<(bool, String)> {
    let img = texture(128, 128, SEED);
    let s2 = gaussian_variance(&img, 2.0);
    let v = variance(&gaussian_field(128 * 128, s2, SEED));
    let rel = (v / s2 - 1.0).abs();
    Ok((rel < 0.05, format!("relative variance error {rel:.4}")))
}

fn stripe_columns() -> Result<(bool, String)> {
    let img = texture(64, 64, SEED);
    let out = add_stripe_noise(&img, 0.12, SEED);
    // J/I must be one value per column wherever the output is not clamped.
    let mut spread: f64 = 0.0;
    for x in 0..64 {
        let ratios: Vec<f64> = (0..64)
            .filter(|&y| img.at(x, y) > 0.0 && out.at(x, y) < 1.0)
            .map(|y| out.at(x, y) / img.at(x, y))
            .collect();
        let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| (l.min(r), h.max(r)));
        if !ratios.is_empty() {
            spread = spread.max(hi - lo);
        }
    }
    Ok((spread < 1e-12, format!("largest within-column ratio spread {spread:.1e}")))
}

fn stripe_stats() -> Result<(bool, String)> {
    let v = variance(&stripe_multipliers(512, 0.1, SEED));
    let rel = (v / 0.1 - 1.0).abs();
    Ok((rel < 0.1, format!("relative variance error {rel:.4}")))
}

fn pgm_round_trip() -> Result<(bool, String)> {
    let img = texture(40, 24, SEED);
    let q = pgm::decode(&pgm::encode(&img))?;
    let again = pgm::decode(&pgm::encode(&q))?;
    Ok((again == q, format!("{}×{} re-encodes identically", q.width, q.height)))
}

fn identity_warp() -> Result<(bool, String)> {
    let p = generate_pair(SEED, 64, 0.0)?;
    let same = p.a.data.iter().zip(&p.b.data).zip(&p.valid).all(|((a, b), v)| !v || (a - b).abs() < 1e-12);
    Ok((same, format!("images agree on {} valid pixels", p.valid.iter().filter(|v| **v).count())))
}

fn synth_reprojection() -> Result<(bool, String)> {
    let p = generate_pair(SEED, 64, 1.0)?;
    let worst = p
        .correspondences(4)
        .iter()
        .filter_map(|c| apply_h(&p.h, c[0], c[1]).map(|(u, v)| (u - c[2]).abs().max((v - c[3]).abs())))
        .fold(0.0, f64::max);
    Ok((worst < 1e-9, format!("max reprojection {worst:e}")))
}

fn dual_softmax_bounds() -> Result<(bool, String)> {
    let mut rng = Rng::named(SEED, "selftest.dual");
    let s = Tensor::new(&[6, 9], (0..54).map(|_| 5.0 * rng.normal()).collect())?;
    let p = dual_softmax(&s)?;
    let ok = p.data().iter().all(|&v| (0.0..=1.0).contains(&v));
    let row_max = (0..6).map(|i| p.row(i).iter().sum::<f64>()).fold(0.0, f64::max);
    Ok((ok && row_max <= 1.0 + 1e-12, format!("largest row sum {row_max:.6}")))
}

fn heatmap_centre() -> Result<(bool, String)> {
    let mut z = vec![0.0; 25];
    z[12] = 1.0;
    let (e, var) = heatmap_moments(&z, 5);
    let (eu, varu) = heatmap_moments(&[1.0 / 25.0; 25], 5);
    let ok = e == [0.0, 0.0] && var.abs() < 1e-15 && eu[0].abs() < 1e-15 && eu[1].abs() < 1e-15 && varu > 0.0;
    Ok((ok, format!("one-hot centre ({}, {}), uniform variance {varu:.6}", e[0], e[1])))
}

fn random_points(rng: &mut Rng, n: usize) -> Vec<[f64; 4]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.uniform(-1.0, 1.0))).collect()
}

fn permutation_equivariance() -> Result<(bool, String)> {
    let net = OutlierNet::init(SEED)?;
    let mut rng = Rng::named(SEED, "selftest.perm");
    for _ in 0..10 {
        let pts = random_points(&mut rng, 32);
        let mut order: Vec<usize> = (0..32).collect();
        rng.shuffle(&mut order);
        let shuffled: Vec<[f64; 4]> = order.iter().map(|&i| pts[i]).collect();
        let y = net.classify(&CorrespondenceBatch::new(&pts)?)?.y;
        let ys = net.classify(&CorrespondenceBatch::new(&shuffled)?)?.y;
        if order.iter().enumerate().any(|(k, &i)| ys[k].to_bits() != y[i].to_bits()) {
            return Ok((false, "permuted logits differ".into()));
        }
    }
    Ok((true, "10 batches permute bitwise".into()))
}

fn weight_range() -> Result<(bool, String)> {
    let net = OutlierNet::init(SEED)?;
    let mut rng = Rng::named(SEED, "selftest.range");
    let w = net.classify(&CorrespondenceBatch::new(&random_points(&mut rng, 64))?)?.w;
    let ok = w.iter().all(|&v| (0.0..1.0).contains(&v));
    Ok((ok, format!("weights within [{:.4}, {:.4}]", w.iter().copied().fold(1.0, f64::min), w.iter().copied().fold(0.0, f64::max))))
}

fn eight_point_scale() -> Result<(bool, String)> {
    let mut rng = Rng::named(SEED, "selftest.scale");
    let scene = random_scene(&mut rng, 20, false);
    let batch = CorrespondenceBatch::new(&scene.points)?;
    let w: Vec<f64> = (0..20).map(|_| rng.uniform(0.1, 1.0)).collect();
    let e1 = weighted_eight_point(&batch, &w)?.e;
    let e2 = weighted_eight_point(&batch, &w.iter().map(|v| v * 37.5).collect::<Vec<_>>())?.e;
    let d = e1.iter().zip(&e2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((d < 1e-12, format!("max entry change {d:e}")))
}

fn epipolar_consistency() -> Result<(bool, String)> {
    let mut rng = Rng::named(SEED, "selftest.epipolar");
    let scene = random_scene(&mut rng, 20, false);
    let batch = CorrespondenceBatch::new(&scene.points)?;
    let w = vec![1.0; 20];
    let e = weighted_eight_point(&batch, &w)?.e;
    let ratio = weighted_residual(&batch, &w, &e) / weighted_trace(&batch, &w);
    Ok((ratio < 1e-16, format!("smallest eigenvalue / trace {ratio:e}")))
}

fn ncm_monotone() -> Result<(bool, String)> {
    let p = generate_pair(SEED, 64, 1.0)?;
    let mut rng = Rng::named(SEED, "selftest.ncm");
    let pts: Vec<[f64; 4]> =
        p.correspondences(4).iter().map(|c| [c[0], c[1], c[2] + rng.uniform(-5.0, 5.0), c[3] + rng.uniform(-5.0, 5.0)]).collect();
    let counts: Vec<usize> = [6.0, 4.0, 3.0, 2.0, 1.0, 0.5].iter().map(|&t| ncm(&pts, &p.h, t)).collect();
    Ok((counts.windows(2).all(|w| w[1] <= w[0]), format!("counts {counts:?}")))
}

fn rmse_order() -> Result<(bool, String)> {
    let p = generate_pair(SEED, 64, 1.0)?;
    let mut rng = Rng::named(SEED, "selftest.rmse");
    let mut pts: Vec<[f64; 4]> =
        p.correspondences(8).iter().map(|c| [c[0], c[1], c[2] + rng.uniform(-1.0, 1.0), c[3]]).collect();
    let a = rmse(&pts, &p.h);
    pts.reverse();
    let b = rmse(&pts, &p.h);
    Ok(((a - b).abs() < 1e-12, format!("rmse {a:.6}")))
}

fn homography_scale() -> Result<(bool, String)> {
    let p = generate_pair(SEED, 64, 1.0)?;
    let pts = p.correspondences(8);
    let s = 3.0;
    let scaled: Vec<[f64; 4]> = pts.iter().map(|c| c.map(|v| v * s)).collect();
    let h1 = estimate_homography(&pts)?;
    let h2 = estimate_homography(&scaled)?;
    // Conjugate back: H1 ≈ S⁻¹ H2 S with S = diag(s, s, 1).
    let sm: Mat3 = [s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0];
    let si = inverse3(&sm).expect("invertible");
    let back = nrmatch_tensor::linalg::mul3(&si, &nrmatch_tensor::linalg::mul3(&h2, &sm));
    let hinv = inverse3(&h1).expect("invertible");
    let worst = pts.iter().map(|c| transfer_error(&back, &hinv, (c[0], c[1]), (c[2], c[3]))).fold(0.0, f64::max);
    let direct = pts
        .iter()
        .filter_map(|c| Some((apply_h(&h1, c[0], c[1])?, apply_h(&back, c[0], c[1])?)))
        .map(|((a, b), (c, d))| (a - c).abs().max((b - d).abs()))
        .fold(0.0, f64::max);
    Ok((direct < 1e-8, format!("mapping difference {direct:e}, transfer residual {worst:.2e}")))
}
