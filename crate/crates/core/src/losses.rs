//! Training objectives. Each loss has a graph builder used for training
//! and a plain evaluator built on it.

use nrmatch_tensor::{Axis, Graph, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::geometry::Mat3;
use crate::matcher::heatmap_moments;
use crate::outlier::CorrespondenceBatch;

pub const PROB_CLAMP: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const EPIPOLAR_FLOOR: f64 = 1e-12;
pub const ALPHA: f64 = 0.5;
pub const BETA: f64 = 0.1;

fn bce_graph(g: &mut Graph, p: Var, target: &Tensor) -> Result<Var> {
    if g.value(p).len() != target.len() {
        return Err(CoreError::Dimension(format!("predictions {:?} vs targets {:?}", g.shape(p), target.shape())));
    }
    let p = g.reshape(p, target.shape())?;
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let t = g.constant(target.clone());
    let one_minus_t = g.constant(target.map(|v| 1.0 - v));
    let lp = g.ln(p);
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let lq = g.ln(q);
    let a = g.mul(lp, t)?;
    let b = g.mul(lq, one_minus_t)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.neg(m))
}

/// Mean cross-entropy over every grid pair of the confidence matrix.
pub fn coarse_loss_graph(g: &mut Graph, p: Var, p_gt: &Tensor) -> Result<Var> {
    if g.shape(p) != p_gt.shape() {
        return Err(CoreError::Dimension(format!("confidences {:?} vs truth {:?}", g.shape(p), p_gt.shape())));
    }
    bce_graph(g, p, p_gt)
}

pub fn coarse_loss(p: &Tensor, p_gt: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(p.clone());
    let l = coarse_loss_graph(&mut g, v, p_gt)?;
    Ok(g.value(l).data()[0])
}

/// Mean binary cross-entropy of inlier weights against 0/1 labels.
pub fn classification_loss_graph(g: &mut Graph, w: Var, labels: &[f64]) -> Result<Var> {
    let t = Tensor::new(&[labels.len(), 1], labels.to_vec())?;
    bce_graph(g, w, &t)
}

pub fn classification_loss(w: &[f64], labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new(&[w.len(), 1], w.to_vec())?);
    let l = classification_loss_graph(&mut g, v, labels)?;
    Ok(g.value(l).data()[0])
}

/// Scalar loss plus a flag for degenerate inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub warning: bool,
}

/// Mean of `‖E − ξ̂‖₂ / max(σ², 1e-6)` over matches. `expectation` is `n×2`,
/// `variance` `n×1`, `targets` `n×2` in grid units.
pub fn fine_loss_graph(g: &mut Graph, expectation: Var, variance: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(expectation) != targets.shape() {
        return Err(CoreError::Dimension(format!("expectations {:?} vs targets {:?}", g.shape(expectation), targets.shape())));
    }
    let t = g.constant(targets.clone());
    let d = g.sub(expectation, t)?;
    let d2 = g.square(d);
    let d2 = g.sum_cols(d2);
    let dist = g.sqrt(d2);
    let var = g.clamp_min(variance, VARIANCE_FLOOR);
    let r = g.div(dist, var)?;
    Ok(g.mean(r))
}

/// Plain evaluation over row-major `n×n` heatmaps; an empty list yields 0
/// with the warning set.
pub fn fine_loss(heatmaps: &[Vec<f64>], targets: &[[f64; 2]], n: usize) -> Result<LossValue> {
    if heatmaps.len() != targets.len() {
        return Err(CoreError::Dimension(format!("{} heatmaps for {} targets", heatmaps.len(), targets.len())));
    }
    if heatmaps.is_empty() {
        return Ok(LossValue { value: 0.0, warning: true });
    }
    let mut total = 0.0;
    for (z, t) in heatmaps.iter().zip(targets) {
        if z.len() != n * n {
            return Err(CoreError::Dimension(format!("heatmap of {} cells, expected {}", z.len(), n * n)));
        }
        let (e, var) = heatmap_moments(z, n);
        total += ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)).sqrt() / var.max(VARIANCE_FLOOR);
    }
    Ok(LossValue { value: total / heatmaps.len() as f64, warning: false })
}

/// Records the softmax of `n×w²` logits into heatmaps with their moments.
pub fn heatmap_graph(g: &mut Graph, logits: Var, n: usize) -> Result<(Var, Var)> {
    let z = g.softmax(logits, Axis::Rows);
    let grid = crate::matcher::grid_matrix(n);
    let sq: Vec<f64> = (0..n * n).map(|i| grid.at2(i, 0).powi(2) + grid.at2(i, 1).powi(2)).collect();
    let gv = g.constant(grid);
    let sqv = g.constant(Tensor::new(&[n * n, 1], sq)?);
    let e = g.matmul(z, gv)?;
    let m2 = g.matmul(z, sqv)?;
    let e2 = g.square(e);
    let e2 = g.sum_cols(e2);
    let var = g.sub(m2, e2)?;
    Ok((e, var))
}

/// Sampson-style denominators
/// `(E p)₁² + (E p)₂² + (Eᵀp')₁² + (Eᵀp')₂²` under the true matrix.
pub fn epipolar_denominators(e_gt: &Mat3, batch: &CorrespondenceBatch) -> Vec<f64> {
    (0..batch.len())
        .map(|i| {
            let [u, v, up, vp] = batch.point(i);
            let ep = [e_gt[0] * u + e_gt[1] * v + e_gt[2], e_gt[3] * u + e_gt[4] * v + e_gt[5]];
            let etp = [e_gt[0] * up + e_gt[3] * vp + e_gt[6], e_gt[1] * up + e_gt[4] * vp + e_gt[7]];
            ep[0] * ep[0] + ep[1] * ep[1] + etp[0] * etp[0] + etp[1] * etp[1]
        })
        .collect()
}

/// Records the mean of `(p'ᵀ Ê p)² / denom_i` with `ê` a `[9]` variable.
/// Returns the loss and whether more than 10% of denominators hit the floor.
pub fn essential_loss_graph(g: &mut Graph, e_hat: Var, e_gt: &Mat3, batch: &CorrespondenceBatch) -> Result<(Var, bool)> {
    if g.value(e_hat).len() != 9 {
        return Err(CoreError::Dimension(format!("essential estimate has shape {:?}", g.shape(e_hat))));
    }
    let den = epipolar_denominators(e_gt, batch);
    let floored = den.iter().filter(|&&d| d < EPIPOLAR_FLOOR).count();
    let den: Vec<f64> = den.into_iter().map(|d| d.max(EPIPOLAR_FLOOR)).collect();
    let z = g.constant(batch.constraint_rows());
    let e = g.reshape(e_hat, &[9, 1])?;
    let r = g.matmul(z, e)?;
    let r2 = g.square(r);
    let dv = g.constant(Tensor::new(&[den.len(), 1], den)?);
    let q = g.div(r2, dv)?;
    Ok((g.mean(q), floored * 10 > batch.len()))
}

pub fn essential_loss(e_hat: &Mat3, e_gt: &Mat3, batch: &CorrespondenceBatch) -> Result<LossValue> {
    let mut g = Graph::new();
    let e = g.constant(Tensor::new(&[9], e_hat.to_vec())?);
    let (l, warning) = essential_loss_graph(&mut g, e, e_gt, batch)?;
    Ok(LossValue { value: g.value(l).data()[0], warning })
}

/// The four components of the full objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub coarse: f64,
    pub fine: f64,
    pub cls: f64,
    pub ess: f64,
}

/// `L_coarse + L_fine + α L_cls + β L_ess`.
pub fn total_loss(parts: &LossParts, alpha: f64, beta: f64) -> Result<f64> {
    let all = [parts.coarse, parts.fine, parts.cls, parts.ess];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Contract(format!("non-finite loss component in {parts:?}")));
    }
    Ok(parts.coarse + parts.fine + alpha * parts.cls + beta * parts.ess)
}
