//! Homographies, two-view helpers and the evaluation metrics.
//!
//! The planar routines are generic over [`Real`]; 3×3 matrices are
//! row-major `[T; 9]`.

use nrmatch_tensor::linalg::{det3, inverse3, mul3, mul3v};
use nrmatch_tensor::{self_adjoint_eigen, Real, Rng, Tensor};

use crate::error::{CoreError, Result};

pub type Mat3<T = f64> = [T; 9];

/// Per-axis tolerance of a correct match, in pixels.
pub const NCM_TOL_PX: f64 = 3.0;
/// RMSE assigned to unsuccessful pairs.
pub const FAILED_RMSE: f64 = 20.0;
pub const CONSENSUS_ITERS: usize = 2000;
pub const CONSENSUS_SEED: u64 = 0x5EED_1234;

pub fn identity3<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [o, z, z, z, o, z, z, z, o]
}

/// Maps `(x, y)` through `h`; `None` at the line at infinity.
pub fn apply_h<T: Real>(h: &Mat3<T>, x: T, y: T) -> Option<(T, T)> {
    let p = mul3v(h, &[x, y, T::one()]);
    if p[2].abs() <= T::epsilon() * (p[0].abs() + p[1].abs() + T::one()) {
        return None;
    }
    Some((p[0] / p[2], p[1] / p[2]))
}

/// `T(x_A) - x_B` for a projective map `T`.
pub fn reprojection_error<T: Real>(h: &Mat3<T>, a: (T, T), b: (T, T)) -> Option<[T; 2]> {
    apply_h(h, a.0, a.1).map(|(x, y)| [x - b.0, y - b.1])
}

/// Scales so `h[8] == 1` when it is not (near) zero.
pub fn fix_scale<T: Real>(h: &mut Mat3<T>) {
    let s = h[8];
    let norm = h.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if s.abs() > T::lit(1e-12) * norm {
        h.iter_mut().for_each(|v| *v /= s);
    }
}

fn hartley<T: Real>(pts: &[(T, T)]) -> (Mat3<T>, Vec<(T, T)>) {
    let n = T::from_usize(pts.len()).unwrap();
    let (mut cx, mut cy) = (T::zero(), T::zero());
    for &(x, y) in pts {
        cx += x;
        cy += y;
    }
    cx /= n;
    cy /= n;
    let mean_d = pts.iter().map(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()).sum::<T>() / n;
    let s = if mean_d > T::zero() { T::lit(std::f64::consts::SQRT_2) / mean_d } else { T::one() };
    let t = [s, T::zero(), -s * cx, T::zero(), s, -s * cy, T::zero(), T::zero(), T::one()];
    (t, pts.iter().map(|&(x, y)| (s * (x - cx), s * (y - cy))).collect())
}

fn collinear<T: Real>(a: (T, T), b: (T, T), c: (T, T), scale: T) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    cross.abs() <= T::lit(1e-9) * scale * scale
}

/// Hartley-normalized direct linear transform from `src` to `dst`
/// (least squares when more than four points).
pub fn dlt_homography<T: Real>(src: &[(T, T)], dst: &[(T, T)]) -> Result<Mat3<T>> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(CoreError::Degenerate(format!("homography needs >= 4 point pairs, got {n}")));
    }
    let (ts, s) = hartley(src);
    let (td, d) = hartley(dst);
    let mut ata = vec![T::zero(); 81];
    for (&(x, y), &(u, v)) in s.iter().zip(&d) {
        let (o, z) = (T::one(), T::zero());
        let r1 = [-x, -y, -o, z, z, z, u * x, u * y, u];
        let r2 = [z, z, z, -x, -y, -o, v * x, v * y, v];
        for r in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[i * 9 + j] += r[i] * r[j];
                }
            }
        }
    }
    let e = self_adjoint_eigen(&Tensor::new(&[9, 9], ata)?)?;
    let top = e.values[8].abs().max(T::min_positive_value());
    if e.values[1].abs() <= T::lit(1e-10) * top {
        return Err(CoreError::Degenerate("point configuration does not determine a homography".into()));
    }
    let hv = e.vector(0);
    let hn: Mat3<T> = std::array::from_fn(|i| hv[i]);
    let tdi = inverse3(&td).ok_or_else(|| CoreError::Degenerate("singular normalization".into()))?;
    let mut h = mul3(&mul3(&tdi, &hn), &ts);
    if det3(&h).abs() <= T::min_positive_value() {
        return Err(CoreError::Degenerate("singular homography".into()));
    }
    fix_scale(&mut h);
    Ok(h)
}

/// `max(‖H a − b‖, ‖H⁻¹ b − a‖)`, or infinity when either side maps to
/// infinity.
pub fn transfer_error<T: Real>(h: &Mat3<T>, hinv: &Mat3<T>, a: (T, T), b: (T, T)) -> T {
    match (apply_h(h, a.0, a.1), apply_h(hinv, b.0, b.1)) {
        (Some(f), Some(r)) => {
            let df = ((f.0 - b.0).powi(2) + (f.1 - b.1).powi(2)).sqrt();
            let dr = ((r.0 - a.0).powi(2) + (r.1 - a.1).powi(2)).sqrt();
            df.max(dr)
        }
        _ => T::infinity(),
    }
}

fn inlier_mask<T: Real>(h: &Mat3<T>, pts: &[[T; 4]], tol: T) -> Option<Vec<bool>> {
    let hinv = inverse3(h)?;
    Some(pts.iter().map(|p| transfer_error(h, &hinv, (p[0], p[1]), (p[2], p[3])) < tol).collect())
}

/// Seeded sample consensus over 4-point homographies with a least-squares
/// refit on the best inlier set. Returns the inlier mask and the model.
pub fn ransac_homography<T: Real>(pts: &[[T; 4]], iterations: usize, tol: T, rng: &mut Rng) -> Result<(Vec<bool>, Mat3<T>)> {
    let n = pts.len();
    if n < 4 {
        return Err(CoreError::Degenerate(format!("consensus needs >= 4 matches, got {n}")));
    }
    let extent = pts.iter().fold(T::one(), |m, p| m.max(p[0].abs()).max(p[1].abs()).max(p[2].abs()).max(p[3].abs()));
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..iterations {
        let idx = rng.sample_distinct(n, 4);
        let sa: Vec<(T, T)> = idx.iter().map(|&i| (pts[i][0], pts[i][1])).collect();
        let sb: Vec<(T, T)> = idx.iter().map(|&i| (pts[i][2], pts[i][3])).collect();
        let degenerate = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
            .iter()
            .any(|&(i, j, k)| collinear(sa[i], sa[j], sa[k], extent) || collinear(sb[i], sb[j], sb[k], extent));
        if degenerate {
            continue;
        }
        let Ok(h) = dlt_homography(&sa, &sb) else { continue };
        let Some(mask) = inlier_mask(&h, pts, tol) else { continue };
        let count = mask.iter().filter(|&&m| m).count();
        if best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (_, mask) = best.ok_or_else(|| CoreError::Degenerate("no non-degenerate minimal sample".into()))?;
    let (sa, sb): (Vec<_>, Vec<_>) =
        pts.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| ((p[0], p[1]), (p[2], p[3]))).unzip();
    let h = dlt_homography(&sa, &sb)?;
    let refit = inlier_mask(&h, pts, tol).ok_or_else(|| CoreError::Degenerate("singular refit".into()))?;
    Ok((refit, h))
}

/// Robust homography with the evaluation settings (3 px, 2000 iterations,
/// fixed seed).
pub fn estimate_homography<T: Real>(pts: &[[T; 4]]) -> Result<Mat3<T>> {
    let mut rng = Rng::named(CONSENSUS_SEED, "estimate_homography");
    ransac_homography(pts, CONSENSUS_ITERS, T::lit(NCM_TOL_PX), &mut rng).map(|(_, h)| h)
}

/// Whether `|Δu| < tol` and `|Δv| < tol` under the true map.
pub fn is_correct<T: Real>(p: &[T; 4], truth: &Mat3<T>, tol: T) -> bool {
    reprojection_error(truth, (p[0], p[1]), (p[2], p[3])).is_some_and(|e| e[0].abs() < tol && e[1].abs() < tol)
}

/// Number of correct matches.
pub fn ncm<T: Real>(pts: &[[T; 4]], truth: &Mat3<T>, tol: T) -> usize {
    pts.iter().filter(|p| is_correct(p, truth, tol)).count()
}

/// A pair is matched successfully when strictly more than ten matches are correct.
pub fn success(ncm: usize) -> bool {
    ncm > 10
}

/// `sqrt(Σ ‖H x_A − x_B‖² / N)`; zero for an empty set.
pub fn rmse<T: Real>(pts: &[[T; 4]], h: &Mat3<T>) -> T {
    if pts.is_empty() {
        return T::zero();
    }
    let s: T = pts
        .iter()
        .map(|p| reprojection_error(h, (p[0], p[1]), (p[2], p[3])).map_or(T::infinity(), |e| e[0] * e[0] + e[1] * e[1]))
        .sum();
    (s / T::from_usize(pts.len()).unwrap()).sqrt()
}

/// Noisy-to-clean correct-match ratio; absent when the clean run has none.
pub fn acr(ncm_noise: f64, ncm_clean: f64) -> Option<f64> {
    (ncm_clean > 0.0).then(|| ncm_noise / ncm_clean)
}

/// Per-pair evaluation outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub ncm: usize,
    pub success: bool,
    pub rmse: f64,
    pub runtime: f64,
    /// Set when exactly ten matches are correct, the case where the two
    /// success definitions disagree.
    pub borderline: bool,
}

/// NCM against `truth`, then RMSE of the correct matches under a homography
/// estimated from them.
pub fn evaluate_pair(pts: &[[f64; 4]], truth: &Mat3, runtime: f64) -> EvalReport {
    let correct: Vec<[f64; 4]> = pts.iter().copied().filter(|p| is_correct(p, truth, NCM_TOL_PX)).collect();
    let n = correct.len();
    let mut ok = success(n);
    let mut err = FAILED_RMSE;
    if ok {
        match estimate_homography(&correct) {
            Ok(h) => err = rmse(&correct, &h),
            Err(_) => ok = false,
        }
    }
    EvalReport { ncm: n, success: ok, rmse: err, runtime, borderline: n == 10 }
}

/// `[t]ₓ R`.
pub fn essential_from_pose(r: &Mat3, t: &[f64; 3]) -> Mat3 {
    let tx = [0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0];
    mul3(&tx, r)
}

/// Rotation about a random unit axis by an angle uniform in `[0, max_angle]`.
pub fn random_rotation(rng: &mut Rng, max_angle: f64) -> Mat3 {
    let axis = random_unit(rng);
    let ang = rng.uniform(0.0, max_angle);
    rodrigues(&axis, ang)
}

pub fn random_unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

pub fn rodrigues(axis: &[f64; 3], ang: f64) -> Mat3 {
    let (s, c) = ang.sin_cos();
    let [x, y, z] = *axis;
    let k = 1.0 - c;
    [
        c + x * x * k,
        x * y * k - z * s,
        x * z * k + y * s,
        y * x * k + z * s,
        c + y * y * k,
        y * z * k - x * s,
        z * x * k - y * s,
        z * y * k + x * s,
        c + z * z * k,
    ]
}

/// Unit-Frobenius copy.
pub fn normalized(m: &Mat3) -> Mat3 {
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    m.map(|v| v / n)
}

/// Calibrated two-view configuration with exact correspondences in
/// normalized image coordinates.
#[derive(Clone, Debug)]
pub struct TwoViewScene {
    pub r: Mat3,
    pub t: [f64; 3],
    /// Unit-Frobenius `[t]ₓ R`.
    pub e: Mat3,
    pub points: Vec<[f64; 4]>,
}

/// Random relative pose (rotation up to ~17°, unit baseline) and `n`
/// visible points, either in general position or on a random plane.
pub fn random_scene(rng: &mut Rng, n: usize, planar: bool) -> TwoViewScene {
    let r = random_rotation(rng, 0.3);
    let t = random_unit(rng);
    let t = [t[0] * 0.5, t[1] * 0.5, t[2] * 0.5];
    // Plane n·X = d through the depth range, tilted at most ~40°.
    let normal = {
        let v = [rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), 1.0];
        let l = (v[0] * v[0] + v[1] * v[1] + 1.0).sqrt();
        [v[0] / l, v[1] / l, v[2] / l]
    };
    let dist = rng.uniform(3.0, 5.0) * normal[2];
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let (x, y) = (rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9));
        let z = if planar {
            let den = normal[0] * x + normal[1] * y + normal[2];
            if den <= 0.1 {
                continue;
            }
            dist / den
        } else {
            rng.uniform(2.0, 8.0)
        };
        if !(1.0..=12.0).contains(&z) {
            continue;
        }
        let p = [x * z, y * z, z];
        let q = mul3v(&r, &p);
        let q = [q[0] + t[0], q[1] + t[1], q[2] + t[2]];
        if q[2] < 0.5 {
            continue;
        }
        let (u2, v2) = (q[0] / q[2], q[1] / q[2]);
        if u2.abs() > 1.0 || v2.abs() > 1.0 {
            continue;
        }
        points.push([x, y, u2, v2]);
    }
    TwoViewScene { e: normalized(&essential_from_pose(&r, &t)), r, t, points }
}
