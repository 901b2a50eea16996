//! Additive Gaussian and multiplicative column-stripe noise.

use std::fmt;
use std::str::FromStr;

use nrmatch_core::Image;
use nrmatch_tensor::Rng;

use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Gaussian,
    Stripe,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Stripe => "stripe",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "stripe" => Ok(Self::Stripe),
            _ => Err(BenchError::Config(format!("unknown noise kind {s:?}"))),
        }
    }
}

/// Gaussian levels are SNR in dB, stripe levels the multiplier variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn apply(&self, image: &Image) -> Image {
        match self.kind {
            NoiseKind::Gaussian => add_gaussian_noise(image, self.level, self.seed),
            NoiseKind::Stripe => add_stripe_noise(image, self.level, self.seed),
        }
    }
}

/// Mean squared intensity.
pub fn image_power(image: &Image) -> f64 {
    image.data.iter().map(|v| v * v).sum::<f64>() / image.data.len() as f64
}

/// Noise variance for a target SNR: `σ² = E(I) / 10^(snr/20)`.
pub fn gaussian_variance(image: &Image, snr_db: f64) -> f64 {
    image_power(image) / 10f64.powf(snr_db / 20.0)
}

/// Zero-mean Gaussian samples of variance `sigma2`, one per pixel.
pub fn gaussian_field(len: usize, sigma2: f64, seed: u64) -> Vec<f64> {
    let mut rng = Rng::named(seed, "noise.gaussian");
    let s = sigma2.sqrt();
    (0..len).map(|_| s * rng.normal()).collect()
}

/// `clamp(I + n)` with `n ~ N(0, σ²)` at the requested SNR. An infinite
/// SNR returns the input unchanged.
pub fn add_gaussian_noise(image: &Image, snr_db: f64, seed: u64) -> Image {
    if snr_db == f64::INFINITY {
        return image.clone();
    }
    let field = gaussian_field(image.data.len(), gaussian_variance(image, snr_db), seed);
    let data = image.data.iter().zip(&field).map(|(v, n)| (v + n).clamp(0.0, 1.0)).collect();
    Image { data, ..image.clone() }
}

/// One zero-mean uniform multiplier per column with the given variance
/// (half-width `√(3σ²)`).
pub fn stripe_multipliers(width: usize, variance: f64, seed: u64) -> Vec<f64> {
    let mut rng = Rng::named(seed, "noise.stripe");
    let a = (3.0 * variance).sqrt();
    (0..width).map(|_| rng.uniform(-a, a)).collect()
}

/// `clamp(I + n ⊙ I)` with vertical stripes. A zero variance returns the
/// input unchanged.
pub fn add_stripe_noise(image: &Image, variance: f64, seed: u64) -> Image {
    if variance <= 0.0 {
        return image.clone();
    }
    let n = stripe_multipliers(image.width, variance, seed);
    let data = image.data.iter().enumerate().map(|(i, v)| (v + n[i % image.width] * v).clamp(0.0, 1.0)).collect();
    Image { data, ..image.clone() }
}
