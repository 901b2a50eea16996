//! Learned inlier classification, weighted 8-point essential matrix and a
//! sample-consensus baseline.

use nrmatch_tensor::{Axis, Binder, Graph, ParamStore, Rng, Standardize, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::geometry::{ransac_homography, Mat3};
use crate::matcher::PixelMatchSet;

pub const WIDTH: usize = 128;
pub const BLOCKS: usize = 12;
/// Inference-time weight threshold for a hard inlier decision.
pub const INLIER_THRESHOLD: f64 = 0.5;

const HEAD_INIT_SCALE: f64 = 0.1;

const CONTEXT_NORM: Standardize<f64> =
    Standardize { axis: Axis::Cols, eps: 1e-3, eps_inside_sqrt: false, ordered: true };

/// Camera intrinsics `(fx, fy, cx, cy)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Principal point at the image centre, focal length half the larger extent.
    pub fn half_extent(width: usize, height: usize) -> Self {
        let f = width.max(height) as f64 / 2.0;
        Self { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }
}

/// Normalized correspondences `[uA, vA, uB, vB]`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceBatch {
    pub coords: Tensor,
}

impl CorrespondenceBatch {
    pub fn new(points: &[[f64; 4]]) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::Contract("empty correspondence batch".into()));
        }
        Ok(Self { coords: Tensor::new(&[points.len(), 4], points.concat())? })
    }

    /// Pixel matches mapped through the inverse intrinsics of each view.
    pub fn from_pixels(points: &[[f64; 4]], ka: &Intrinsics, kb: &Intrinsics) -> Result<Self> {
        let norm: Vec<[f64; 4]> = points
            .iter()
            .map(|p| [(p[0] - ka.cx) / ka.fx, (p[1] - ka.cy) / ka.fy, (p[2] - kb.cx) / kb.fx, (p[3] - kb.cy) / kb.fy])
            .collect();
        Self::new(&norm)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 4] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2], r[3]]
    }

    /// Epipolar constraint rows `z` with `zᵀ vec(E) = p'ᵀ E p`, `N×9`.
    pub fn constraint_rows(&self) -> Tensor {
        let mut d = Vec::with_capacity(self.len() * 9);
        for i in 0..self.len() {
            d.extend(constraint_row(&self.point(i)));
        }
        Tensor::new(&[self.len(), 9], d).expect("non-empty")
    }
}

pub fn constraint_row(p: &[f64; 4]) -> [f64; 9] {
    let [u, v, up, vp] = *p;
    [up * u, up * v, up, vp * u, vp * v, vp, u, v, 1.0]
}

/// Per-channel standardization over the correspondence axis with
/// `(x - mean) / (std + 1e-3)`.
pub fn context_norm(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.rows() < 2 {
        return Err(CoreError::Contract(format!("context normalization needs >= 2 rows, got {:?}", features.shape())));
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let y = g.standardize(x, CONTEXT_NORM)?;
    Ok(g.value(y).clone())
}

/// Logits `y` and weights `w = tanh(relu(y))`.
#[derive(Clone, Debug, PartialEq)]
pub struct InlierWeights {
    pub w: Vec<f64>,
    pub y: Vec<f64>,
}

impl InlierWeights {
    pub fn from_logits(y: Vec<f64>) -> Self {
        Self { w: y.iter().map(|&v| v.max(0.0).tanh()).collect(), y }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.w.iter().map(|&w| w >= INLIER_THRESHOLD).collect()
    }
}

/// Permutation-equivariant residual classifier.
#[derive(Clone, Debug)]
pub struct OutlierNet {
    pub params: ParamStore,
}

impl OutlierNet {
    pub fn init(seed: u64) -> Result<Self> {
        let mut rng = Rng::named(seed, "outlier.init");
        let mut p = ParamStore::new();
        p.xavier("outlier.lift.w", &[4, WIDTH], 4, WIDTH, &mut rng)?;
        p.zeros("outlier.lift.b", &[WIDTH])?;
        for k in 0..BLOCKS {
            for s in ["a", "b"] {
                p.xavier(&format!("outlier.block{k}.{s}.w"), &[WIDTH, WIDTH], WIDTH, WIDTH, &mut rng)?;
                p.zeros(&format!("outlier.block{k}.{s}.b"), &[WIDTH])?;
            }
        }
        p.xavier("outlier.head.w", &[WIDTH, 1], WIDTH, 1, &mut rng)?;
        // The residual trunk grows to O(BLOCKS) per channel; a plain Xavier
        // head would start with logits near 20, deep in tanh saturation.
        for v in p.get_mut("outlier.head.w")?.data_mut() {
            *v *= HEAD_INIT_SCALE;
        }
        p.zeros("outlier.head.b", &[1])?;
        Ok(Self { params: p })
    }

    pub fn load(&mut self, weights: &ParamStore) -> Result<()> {
        if let Some(n) = self.params.names().find(|n| !weights.contains(n)) {
            return Err(CoreError::Load(format!("outlier weights lack {n}")));
        }
        self.params.load_matching(weights)?;
        Ok(())
    }

    /// Records the network on an `N×4` input; returns `(logits, weights)`,
    /// both `N×1`.
    pub fn graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<(Var, Var)> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != 4 {
            return Err(CoreError::Dimension(format!("classifier input must be N×4, got {:?}", g.shape(x))));
        }
        if g.shape(x)[0] < 2 {
            return Err(CoreError::Contract("classifier needs >= 2 correspondences".into()));
        }
        let lin = |g: &mut Graph, b: &mut Binder, x: Var, name: &str| -> Result<Var> {
            let w = b.var(g, &format!("{name}.w"))?;
            let bias = b.var(g, &format!("{name}.b"))?;
            let y = g.matmul(x, w)?;
            Ok(g.add(y, bias)?)
        };
        let mut h = lin(g, b, x, "outlier.lift")?;
        for k in 0..BLOCKS {
            let mut t = h;
            for s in ["a", "b"] {
                t = lin(g, b, t, &format!("outlier.block{k}.{s}"))?;
                t = g.standardize(t, CONTEXT_NORM)?;
                t = g.relu(t);
            }
            h = g.add(h, t)?;
        }
        let y = lin(g, b, h, "outlier.head")?;
        let w = g.relu(y);
        let w = g.tanh(w);
        Ok((y, w))
    }

    pub fn classify(&self, batch: &CorrespondenceBatch) -> Result<InlierWeights> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let x = g.constant(batch.coords.clone());
        let (y, _) = self.graph(&mut g, &mut b, x)?;
        Ok(InlierWeights::from_logits(g.value(y).data().to_vec()))
    }
}

/// Unit-Frobenius, sign-fixed essential matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialMatrix {
    pub e: Mat3,
}

/// Records `X = Σ w_i z_i z_iᵀ` and its smallest eigenvector (`[9]`).
/// `z` is the `N×9` constraint matrix, `w` an `N×1` weight column.
pub fn eight_point_graph(g: &mut Graph, z: Var, w: Var) -> Result<Var> {
    let zw = g.mul(z, w)?;
    let x = g.matmul_t(zw, z, true, false)?;
    Ok(g.smallest_eigvec(x)?)
}

fn check_weights(n: usize, w: &[f64]) -> Result<()> {
    if w.len() != n {
        return Err(CoreError::Dimension(format!("{} weights for {} correspondences", w.len(), n)));
    }
    let live = w.iter().filter(|&&v| v > 0.0).count();
    if live < 8 {
        return Err(CoreError::Degenerate(format!("{live} positively weighted correspondences, need 8")));
    }
    Ok(())
}

pub fn weighted_eight_point(batch: &CorrespondenceBatch, w: &[f64]) -> Result<EssentialMatrix> {
    check_weights(batch.len(), w)?;
    let mut g = Graph::new();
    let z = g.constant(batch.constraint_rows());
    let wv = g.constant(Tensor::new(&[w.len(), 1], w.to_vec())?);
    let e = eight_point_graph(&mut g, z, wv)?;
    let d = g.value(e).data();
    Ok(EssentialMatrix { e: std::array::from_fn(|i| d[i]) })
}

/// Weighted algebraic residual `Σ w_i (z_i · e)²`, the Rayleigh quotient of
/// `X` at `e`.
pub fn weighted_residual(batch: &CorrespondenceBatch, w: &[f64], e: &Mat3) -> f64 {
    (0..batch.len())
        .map(|i| {
            let z = constraint_row(&batch.point(i));
            let r: f64 = z.iter().zip(e).map(|(a, b)| a * b).sum();
            w[i] * r * r
        })
        .sum()
}

/// Trace of `X = Σ w_i z_i z_iᵀ`.
pub fn weighted_trace(batch: &CorrespondenceBatch, w: &[f64]) -> f64 {
    (0..batch.len()).map(|i| w[i] * constraint_row(&batch.point(i)).iter().map(|v| v * v).sum::<f64>()).sum()
}

/// Sample-consensus homography filter over pixel matches.
pub fn consensus_baseline(matches: &PixelMatchSet, iterations: usize, inlier_tol_px: f64, rng: &mut Rng) -> Result<(Vec<bool>, Mat3)> {
    ransac_homography(&matches.points(), iterations, inlier_tol_px, rng)
}
