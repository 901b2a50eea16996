//! Training loops for the outlier classifier and the desk-scale matcher.

use std::io::Write;

use nrmatch_core::geometry::{apply_h, random_scene, Mat3};
use nrmatch_core::losses::{classification_loss_graph, coarse_loss_graph, essential_loss_graph, fine_loss_graph};
use nrmatch_core::outlier::{eight_point_graph, CorrespondenceBatch};
use nrmatch_core::{Image, Matcher, MatcherConfig, OutlierNet};
use nrmatch_tensor::{Adam, Binder, Graph, ParamStore, Rng, Tensor};

use crate::config::{MatcherTrainConfig, OutlierTrainConfig};
use crate::error::{BenchError, Result};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::synth::generate_pair;

pub const LOG_HEADER: &str = "step,loss_total,loss_coarse,loss_fine,loss_cls,loss_ess";

/// One logged training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub cls: f64,
    pub ess: f64,
}

impl StepLog {
    pub fn csv(&self) -> String {
        format!("{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}", self.step, self.total, self.coarse, self.fine, self.cls, self.ess)
    }
}

/// Labelled correspondences drawn from one synthetic two-view scene.
#[derive(Clone, Debug)]
pub struct LabelledBatch {
    pub points: Vec<[f64; 4]>,
    pub labels: Vec<f64>,
    pub e: Mat3,
}

impl LabelledBatch {
    pub fn inliers(&self) -> Vec<[f64; 4]> {
        self.points.iter().zip(&self.labels).filter(|(_, &l)| l > 0.5).map(|(p, _)| *p).collect()
    }
}

/// `n` correspondences with an inlier share of `ratio`. Inliers carry
/// Gaussian jitter of half the bound, clipped at `jitter` (normalized units);
/// outliers are uniform in `[-1, 1]⁴`.
pub fn labelled_batch(rng: &mut Rng, n: usize, ratio: f64, jitter: f64, planar: bool) -> LabelledBatch {
    let n_in = ((n as f64 * ratio).round() as usize).min(n);
    let scene = random_scene(rng, n_in, planar);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for p in &scene.points {
        let q = std::array::from_fn(|k| p[k] + (0.5 * jitter * rng.normal()).clamp(-jitter, jitter));
        points.push(q);
        labels.push(1.0);
    }
    for _ in n_in..n {
        points.push(std::array::from_fn(|_| rng.uniform(-1.0, 1.0)));
        labels.push(0.0);
    }
    // Interleave so that truncated views of a batch keep both classes.
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    LabelledBatch {
        points: order.iter().map(|&i| points[i]).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
        e: scene.e,
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(BenchError::Diverged { step, detail: format!("{what} = {v}") })
    }
}

fn check_grads(step: usize, grads: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in grads {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(BenchError::Diverged { step, detail: format!("non-finite gradient for {name}") });
        }
    }
    Ok(())
}

/// Rescales all gradients together when their joint norm exceeds `max`.
pub fn clip_grad_norm(grads: &mut [(String, Tensor)], max: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let s = max / norm;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One optimisation step of the classifier on `batch`. The essential term
/// is recorded only when `use_ess` holds and at least eight weights are
/// positive, and is evaluated on the true inliers.
fn outlier_step(net: &OutlierNet, batch: &LabelledBatch, cfg: &OutlierTrainConfig, use_ess: bool) -> Result<(StepLog, Vec<(String, Tensor)>)> {
    let cb = CorrespondenceBatch::new(&batch.points)?;
    let mut g = Graph::new();
    let mut b = Binder::new(&net.params, true);
    let x = g.constant(cb.coords.clone());
    let (_, w) = net.graph(&mut g, &mut b, x)?;
    let cls = classification_loss_graph(&mut g, w, &batch.labels)?;
    let mut log = StepLog { cls: g.value(cls).data()[0], ..Default::default() };
    let mut total = g.scale(cls, cfg.alpha);
    let live = g.value(w).data().iter().filter(|&&v| v > 0.0).count();
    let inliers = batch.inliers();
    if use_ess && live >= 8 && !inliers.is_empty() {
        let z = g.constant(cb.constraint_rows());
        let e = eight_point_graph(&mut g, z, w)?;
        let (ess, _) = essential_loss_graph(&mut g, e, &batch.e, &CorrespondenceBatch::new(&inliers)?)?;
        log.ess = g.value(ess).data()[0];
        let term = g.scale(ess, cfg.beta);
        total = g.add(total, term)?;
    }
    log.total = g.value(total).data()[0];
    g.backward(total)?;
    Ok((log, b.grads(&g)))
}

/// Trains the classifier from scratch; every step is passed to `on_step`.
pub fn train_outlier(cfg: &OutlierTrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<OutlierNet> {
    if cfg.batch < 8 {
        return Err(BenchError::Config(format!("batch of {} correspondences is below 8", cfg.batch)));
    }
    let mut net = OutlierNet::init(cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = Rng::named(cfg.seed, "train.outlier.data");
    let warmup = (cfg.steps as f64 * cfg.ess_warmup) as usize;
    let jitter = cfg.jitter_px / cfg.focal;
    for step in 0..cfg.steps {
        let ratio = rng.uniform(cfg.min_inlier_ratio, cfg.max_inlier_ratio);
        let planar = rng.next_f64() < cfg.planar_share;
        let batch = labelled_batch(&mut rng, cfg.batch, ratio, jitter, planar);
        let (mut log, grads) = outlier_step(&net, &batch, cfg, step >= warmup)?;
        log.step = step;
        check_finite(step, "loss", log.total)?;
        check_grads(step, &grads)?;
        opt.step(&mut net.params, &grads)?;
        on_step(&log);
    }
    Ok(net)
}

/// Held-out classification accuracy over `batches` scenes of `n`
/// correspondences at an even inlier/outlier split.
pub fn outlier_accuracy(net: &OutlierNet, seed: u64, batches: usize, n: usize, jitter: f64) -> Result<f64> {
    let mut rng = Rng::named(seed, "heldout.outlier");
    let (mut right, mut total) = (0usize, 0usize);
    for _ in 0..batches {
        let batch = labelled_batch(&mut rng, n, 0.5, jitter, false);
        let mask = net.classify(&CorrespondenceBatch::new(&batch.points)?)?.mask();
        right += mask.iter().zip(&batch.labels).filter(|(&m, &l)| m == (l > 0.5)).count();
        total += n;
    }
    Ok(right as f64 / total as f64)
}

/// Coarse ground truth: cell `(i, j)` of A matches the B cell containing
/// the image of its centre, when that lies inside B.
pub fn coarse_ground_truth(h: &Mat3, grid_a: (usize, usize), grid_b: (usize, usize)) -> (Tensor, Vec<((usize, usize), (usize, usize))>) {
    let (na, nb) = (grid_a.0 * grid_a.1, grid_b.0 * grid_b.1);
    let mut p = Tensor::zeros(&[na, nb]);
    let mut pairs = Vec::new();
    for i in 0..grid_a.0 {
        for j in 0..grid_a.1 {
            let (x, y) = (8.0 * j as f64 + 4.0, 8.0 * i as f64 + 4.0);
            let Some((u, v)) = apply_h(h, x, y) else { continue };
            if u < 0.0 || v < 0.0 {
                continue;
            }
            let (bi, bj) = ((v / 8.0) as usize, (u / 8.0) as usize);
            if bi >= grid_b.0 || bj >= grid_b.1 {
                continue;
            }
            p.data_mut()[(i * grid_a.1 + j) * nb + bi * grid_b.1 + bj] = 1.0;
            pairs.push(((i, j), (bi, bj)));
        }
    }
    (p, pairs)
}

/// Sub-pixel target of a coarse pair in grid units: the offset of the true
/// image of A's centre from B's centre, divided by the window size.
pub fn fine_target(h: &Mat3, ca: (usize, usize), cb: (usize, usize), w_f: usize) -> Option<[f64; 2]> {
    let (x, y) = (8.0 * ca.1 as f64 + 4.0, 8.0 * ca.0 as f64 + 4.0);
    let (u, v) = apply_h(h, x, y)?;
    let t = [(u - (8.0 * cb.1 as f64 + 4.0)) / w_f as f64, (v - (8.0 * cb.0 as f64 + 4.0)) / w_f as f64];
    let bound = (w_f - 1) as f64 / w_f as f64;
    (t[0].abs() <= bound && t[1].abs() <= bound).then_some(t)
}

/// Random corruption of a training query image.
fn augment(a: &Image, rng: &mut Rng, prob: f64, seed: u64) -> Image {
    if rng.next_f64() >= prob {
        return a.clone();
    }
    let spec = if rng.next_f64() < 0.5 {
        NoiseSpec { kind: NoiseKind::Gaussian, level: rng.uniform(-5.0, 10.0), seed }
    } else {
        NoiseSpec { kind: NoiseKind::Stripe, level: rng.uniform(0.02, 0.15), seed }
    };
    spec.apply(a)
}

fn matcher_step(m: &Matcher, a: &Image, bimg: &Image, h: &Mat3, rng: &mut Rng, fine_pairs: usize) -> Result<(StepLog, Vec<(String, Tensor)>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params, true);
    let co = m.coarse_graph(&mut g, &mut b, a, bimg)?;
    let (p_gt, mut pairs) = coarse_ground_truth(h, co.grid_a, co.grid_b);
    let coarse = coarse_loss_graph(&mut g, co.conf, &p_gt)?;
    let mut log = StepLog { coarse: g.value(coarse).data()[0], ..Default::default() };
    let mut total = coarse;
    rng.shuffle(&mut pairs);
    let (chosen, targets): (Vec<_>, Vec<_>) =
        pairs.iter().filter_map(|&(ca, cb)| fine_target(h, ca, cb, m.cfg.w_f).map(|t| ((ca, cb), t))).take(fine_pairs).unzip();
    if let Some(fo) = m.fine_graph(&mut g, &mut b, co.fine_a, co.fine_b, &chosen)? {
        let t: Vec<f64> = fo.kept.iter().flat_map(|&k| targets[k]).collect();
        let t = Tensor::new(&[fo.kept.len(), 2], t)?;
        // The variance enters as a fixed per-match weight; left trainable it
        // would be pushed up by flattening the heatmaps.
        let var = g.constant(g.value(fo.variance).clone());
        let fine = fine_loss_graph(&mut g, fo.expectation, var, &t)?;
        log.fine = g.value(fine).data()[0];
        total = g.add(total, fine)?;
    }
    log.total = g.value(total).data()[0];
    g.backward(total)?;
    Ok((log, b.grads(&g)))
}

/// Trains the desk matcher on freshly generated synthetic pairs.
pub fn train_matcher(cfg: &MatcherTrainConfig, mcfg: MatcherConfig, mut on_step: impl FnMut(&StepLog)) -> Result<Matcher> {
    let mut m = Matcher::init(mcfg, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut rng = Rng::named(cfg.seed, "train.matcher");
    for step in 0..cfg.steps {
        let pair_seed = rng.next_u64();
        let pair = generate_pair(pair_seed, cfg.size, cfg.warp * rng.uniform(0.3, 1.0))?;
        let a = augment(&pair.a, &mut rng, cfg.noise_prob, pair_seed);
        let (mut log, mut grads) = matcher_step(&m, &a, &pair.b, &pair.h, &mut rng, cfg.fine_pairs)?;
        log.step = step;
        check_finite(step, "loss", log.total)?;
        check_grads(step, &grads)?;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut m.params, &grads)?;
        on_step(&log);
    }
    Ok(m)
}

/// Writes a loss log with the standard header.
pub fn write_log(path: impl AsRef<std::path::Path>, rows: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    Ok(())
}

/// Parameters of several models gathered into one store for a single file.
pub fn merged(stores: &[&ParamStore]) -> ParamStore {
    let mut out = ParamStore::new();
    for s in stores {
        out.merge(s);
    }
    out
}
