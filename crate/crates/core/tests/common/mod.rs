#![allow(dead_code)]

use nrmatch_core::Image;
use nrmatch_tensor::{Rng, Tensor};

/// Smooth random texture: a sum of randomly oriented sinusoids plus a few
/// soft blobs, rescaled to [0, 1].
pub fn texture(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    let waves: Vec<[f64; 4]> = (0..12)
        .map(|_| {
            let ang = rng.uniform(0.0, std::f64::consts::PI);
            let freq = rng.uniform(0.05, 0.6);
            [freq * ang.cos(), freq * ang.sin(), rng.uniform(0.0, 6.3), rng.uniform(0.2, 1.0)]
        })
        .collect();
    let blobs: Vec<[f64; 4]> = (0..20)
        .map(|_| [rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64), rng.uniform(2.0, 8.0), rng.uniform(-2.0, 2.0)])
        .collect();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let mut v: f64 = waves.iter().map(|k| k[3] * (k[0] * xf + k[1] * yf + k[2]).sin()).sum();
            for b in &blobs {
                let d2 = (xf - b[0]).powi(2) + (yf - b[1]).powi(2);
                v += b[3] * (-d2 / (2.0 * b[2] * b[2])).exp();
            }
            data.push(v);
        }
    }
    let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    Image::new(w, h, data.iter().map(|v| (v - lo) / (hi - lo)).collect()).unwrap()
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-scale, scale)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
