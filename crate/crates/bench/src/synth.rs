//! Procedural textures and homography-related image pairs.

use nrmatch_core::geometry::{apply_h, fix_scale, Mat3};
use nrmatch_core::Image;
use nrmatch_tensor::linalg::{det3, inverse3, mul3};
use nrmatch_tensor::Rng;

use crate::error::{BenchError, Result};

/// Query/reference pair with `x_B = h · x_A` in pixel coordinates (pixel
/// centres at integers).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub a: Image,
    pub b: Image,
    pub h: Mat3,
    /// Pixels of `b` whose preimage lies inside `a`.
    pub valid: Vec<bool>,
}

impl SyntheticPair {
    /// Ground-truth correspondences on a regular lattice of `a` that land
    /// inside `b`.
    pub fn correspondences(&self, step: usize) -> Vec<[f64; 4]> {
        let mut out = Vec::new();
        for y in (0..self.a.height).step_by(step) {
            for x in (0..self.a.width).step_by(step) {
                if let Some((u, v)) = apply_h(&self.h, x as f64, y as f64) {
                    if u >= 0.0 && v >= 0.0 && u <= (self.b.width - 1) as f64 && v <= (self.b.height - 1) as f64 {
                        out.push([x as f64, y as f64, u, v]);
                    }
                }
            }
        }
        out
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(w: usize, h: usize, cell: usize, rng: &mut Rng) -> Vec<f64> {
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (gy, fy) = (y / cell, smoothstep((y % cell) as f64 / cell as f64));
        for x in 0..w {
            let (gx, fx) = (x / cell, smoothstep((x % cell) as f64 / cell as f64));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
            let bot = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Multi-octave value noise with step edges and Gaussian blobs, rescaled
/// to `[0.05, 0.95]`.
pub fn texture(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = Rng::named(seed, "synth.texture");
    let mut data = vec![0.0; w * h];
    for (cell, amp) in [(32, 1.0), (16, 0.6), (8, 0.4), (4, 0.25)] {
        for (d, n) in data.iter_mut().zip(value_noise(w, h, cell, &mut rng)) {
            *d += amp * n;
        }
    }
    for _ in 0..4 {
        let (px, py) = (rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64));
        let ang = rng.uniform(0.0, std::f64::consts::TAU);
        let (nx, ny, step) = (ang.cos(), ang.sin(), rng.uniform(-0.8, 0.8));
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - px) * nx + (y as f64 - py) * ny > 0.0 {
                    data[y * w + x] += step;
                }
            }
        }
    }
    for _ in 0..12 {
        let (bx, by) = (rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64));
        let (r, amp) = (rng.uniform(2.0, 8.0), rng.uniform(-1.0, 1.0));
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                data[y * w + x] += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }
    let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    Image { width: w, height: h, data: data.iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect() }
}

fn translation(tx: f64, ty: f64) -> Mat3 {
    [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0]
}

/// Rotation up to 15°, scale in `[0.9, 1.1]`, translation up to 10% of the
/// size and mild perspective, all scaled by `magnitude` and centred on the
/// image. Zero magnitude gives the identity.
pub fn random_homography(rng: &mut Rng, size: usize, magnitude: f64) -> Mat3 {
    let s = size as f64;
    let ang = rng.uniform(-15.0, 15.0).to_radians() * magnitude;
    let scale = 1.0 + rng.uniform(-0.1, 0.1) * magnitude;
    let (tx, ty) = (rng.uniform(-0.1, 0.1) * s * magnitude, rng.uniform(-0.1, 0.1) * s * magnitude);
    let (p1, p2) = (rng.uniform(-0.1, 0.1) / s * magnitude, rng.uniform(-0.1, 0.1) / s * magnitude);
    let (c, sn) = (ang.cos() * scale, ang.sin() * scale);
    let centre = (s - 1.0) / 2.0;
    let a = [c, -sn, 0.0, sn, c, 0.0, 0.0, 0.0, 1.0];
    let p = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, p1, p2, 1.0];
    let mut h = mul3(&mul3(&mul3(&translation(centre + tx, centre + ty), &a), &p), &translation(-centre, -centre));
    fix_scale(&mut h);
    h
}

fn well_conditioned(h: &Mat3, size: usize) -> bool {
    let s = (size - 1) as f64;
    det3(h).abs() > 1e-6
        && [(0.0, 0.0), (s, 0.0), (0.0, s), (s, s)].iter().all(|&(x, y)| h[6] * x + h[7] * y + h[8] > 0.2)
}

/// Warps `a` by `h` into a `w×h` raster with bilinear sampling; pixels with
/// no preimage are zero and marked invalid.
pub fn warp(a: &Image, h: &Mat3, width: usize, height: usize) -> Result<(Image, Vec<bool>)> {
    let hinv = inverse3(h).ok_or_else(|| BenchError::Config("singular warp".into()))?;
    let mut data = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = apply_h(&hinv, x as f64, y as f64).and_then(|(sx, sy)| a.sample(sx, sy));
            data.push(v.unwrap_or(0.0));
            valid.push(v.is_some());
        }
    }
    Ok((Image::new(width, height, data)?, valid))
}

/// Deterministic pair for `seed`; badly conditioned warps are redrawn from
/// a derived stream.
pub fn generate_pair(seed: u64, size: usize, magnitude: f64) -> Result<SyntheticPair> {
    if size == 0 || size % 8 != 0 {
        return Err(BenchError::Config(format!("pair size {size} must be a positive multiple of 8")));
    }
    let a = texture(size, size, seed);
    let mut rng = Rng::named(seed, "synth.warp");
    let mut h = random_homography(&mut rng, size, magnitude);
    let mut attempt = 0;
    while !well_conditioned(&h, size) {
        attempt += 1;
        let mut retry = rng.derive(&format!("retry{attempt}"));
        h = random_homography(&mut retry, size, magnitude);
    }
    let (b, valid) = warp(&a, &h, size, size)?;
    Ok(SyntheticPair { a, b, h, valid })
}
