mod common;

use nrmatch_core::geometry::{apply_h, random_scene, reprojection_error, Mat3};
use nrmatch_core::losses::{
    classification_loss, classification_loss_graph, coarse_loss, coarse_loss_graph, essential_loss, essential_loss_graph,
    fine_loss, fine_loss_graph, heatmap_graph, total_loss, LossParts, ALPHA, BETA,
};
use nrmatch_core::matcher::heatmap_moments;
use nrmatch_core::outlier::{eight_point_graph, CorrespondenceBatch};
use nrmatch_core::CoreError;
use nrmatch_tensor::{grad_check, Rng, Tensor, TensorError};

const LN2: f64 = std::f64::consts::LN_2;
const TRIALS: usize = 50;

fn lift<T>(r: Result<T, CoreError>) -> Result<T, TensorError> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

fn labels(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.below(2) as f64).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn noisy_scene(rng: &mut Rng, n: usize, noise: f64) -> (Mat3, CorrespondenceBatch) {
    let scene = random_scene(rng, n, false);
    let pts: Vec<[f64; 4]> =
        scene.points.iter().map(|p| std::array::from_fn(|i| p[i] + rng.uniform(-noise, noise))).collect();
    (scene.e, CorrespondenceBatch::new(&pts).unwrap())
}

#[test]
fn coarse_loss_examples() {
    let half = Tensor::full(&[1, 1], 0.5);
    assert!((coarse_loss(&half, &Tensor::full(&[1, 1], 1.0)).unwrap() - LN2).abs() < 1e-12);
    let truth = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(coarse_loss(&truth, &truth).unwrap() <= 1e-5);
    let err = coarse_loss(&half, &Tensor::zeros(&[2, 1])).unwrap_err();
    assert!(matches!(err, CoreError::Dimension(_)));
}

#[test]
fn classification_loss_examples() {
    assert!((classification_loss(&[0.5], &[1.0]).unwrap() - LN2).abs() < 1e-12);
    assert!(classification_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap() <= 1e-5);
    let mut rng = Rng::new(1);
    let w: Vec<f64> = (0..40).map(|_| rng.uniform(0.01, 0.99)).collect();
    let l: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
    let hand: f64 = w.iter().zip(&l).map(|(w, l)| -(l * w.ln() + (1.0 - l) * (1.0 - w).ln())).sum::<f64>() / 40.0;
    assert!((classification_loss(&w, &l).unwrap() - hand).abs() < 1e-12);
}

#[test]
fn fine_loss_examples() {
    // Expectation on target.
    let mut rng = Rng::new(2);
    let heatmaps: Vec<Vec<f64>> =
        (0..4).map(|_| softmax(&(0..25).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<_>>())).collect();
    let targets: Vec<[f64; 2]> = heatmaps.iter().map(|z| heatmap_moments(z, 5).0).collect();
    assert!(fine_loss(&heatmaps, &targets, 5).unwrap().value.abs() < 1e-12);

    // One-hot heatmap: variance hits the floor.
    let mut z = vec![0.0; 25];
    z[12] = 1.0;
    let l = fine_loss(&[z], &[[0.1, 0.0]], 5).unwrap();
    assert!((l.value - 0.1 / 1e-6).abs() < 1e-6);
    assert!(!l.warning);

    let empty = fine_loss(&[], &[], 5).unwrap();
    assert_eq!(empty.value, 0.0);
    assert!(empty.warning);
}

#[test]
fn essential_loss_examples() {
    let scene = random_scene(&mut Rng::new(3), 30, false);
    let batch = CorrespondenceBatch::new(&scene.points).unwrap();
    let l = essential_loss(&scene.e, &scene.e, &batch).unwrap();
    assert!(l.value < 1e-12 && !l.warning);
    // A zero reference matrix floors every denominator.
    assert!(essential_loss(&scene.e, &[0.0; 9], &batch).unwrap().warning);
}

#[test]
fn essential_loss_is_quadratic_in_perturbation() {
    let mut rng = Rng::new(4);
    for _ in 0..10 {
        let scene = random_scene(&mut rng, 30, false);
        let batch = CorrespondenceBatch::new(&scene.points).unwrap();
        let dir: Mat3 = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
        let deltas = [1e-4, 1e-3, 1e-2];
        let logs: Vec<(f64, f64)> = deltas
            .iter()
            .map(|&d| {
                let e: Mat3 = std::array::from_fn(|i| scene.e[i] + d * dir[i]);
                (d.ln(), essential_loss(&e, &scene.e, &batch).unwrap().value.ln())
            })
            .collect();
        let mx = logs.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let my = logs.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let slope = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / logs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
    }
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(&LossParts::default(), ALPHA, BETA).unwrap(), 0.0);
    let ones = LossParts { coarse: 1.0, fine: 1.0, cls: 1.0, ess: 1.0 };
    assert!((total_loss(&ones, ALPHA, BETA).unwrap() - 2.6).abs() < 1e-12);
    let parts = LossParts { coarse: 0.3, fine: 1.7, cls: 0.9, ess: 2.5 };
    let base = total_loss(&parts, ALPHA, BETA).unwrap();
    let doubled = total_loss(&parts, ALPHA, 2.0 * BETA).unwrap();
    assert!((doubled - base - BETA * parts.ess).abs() < 1e-12);
    let bad = LossParts { fine: f64::NAN, ..parts };
    assert!(matches!(total_loss(&bad, ALPHA, BETA), Err(CoreError::Contract(_))));
}

#[test]
fn reprojection_error_examples() {
    let id: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(reprojection_error(&id, (4.0, 5.0), (4.0, 5.0)).unwrap(), [0.0, 0.0]);
    let shift: Mat3 = [1.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let (a, b) = ((10.0, 2.0), (11.5, 4.0));
    let xi = reprojection_error(&shift, a, b).unwrap();
    assert_eq!(xi, [3.0 - (b.0 - a.0), 0.0 - (b.1 - a.1)]);

    let mut rng = Rng::new(5);
    for _ in 0..100 {
        let h: Mat3 = std::array::from_fn(|i| {
            let base = if i % 4 == 0 { 1.0 } else { 0.0 };
            base + rng.uniform(-0.1, 0.1) * if i >= 6 { 0.01 } else { 1.0 }
        });
        let a = (rng.uniform(0.0, 128.0), rng.uniform(0.0, 128.0));
        let b = apply_h(&h, a.0, a.1).unwrap();
        let xi = reprojection_error(&h, a, b).unwrap();
        assert!(xi[0].hypot(xi[1]) < 1e-10);
    }
}

#[test]
fn losses_are_nonnegative() {
    let mut rng = Rng::new(6);
    for _ in 0..200 {
        let p = common::random_tensor(&[3, 5], &mut rng, 1.0).map(|v| v.abs());
        let t = Tensor::new(&[3, 5], labels(&mut rng, 15)).unwrap();
        assert!(coarse_loss(&p, &t).unwrap() >= 0.0);
        let w: Vec<f64> = (0..10).map(|_| rng.uniform(0.0, 1.0)).collect();
        assert!(classification_loss(&w, &labels(&mut rng, 10)).unwrap() >= 0.0);
        let (e_gt, batch) = noisy_scene(&mut rng, 12, 0.02);
        let e: Mat3 = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
        assert!(essential_loss(&e, &e_gt, &batch).unwrap().value >= 0.0);
    }
}

#[test]
fn fine_loss_falls_along_the_path_to_target() {
    let mut rng = Rng::new(7);
    for _ in 0..50 {
        let start = [rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)];
        let target = [rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)];
        let var = Tensor::full(&[1, 1], rng.uniform(0.05, 1.0));
        let targets = Tensor::new(&[1, 2], target.to_vec()).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let e = Tensor::new(&[1, 2], (0..2).map(|i| start[i] + t * (target[i] - start[i])).collect()).unwrap();
            let mut g = nrmatch_tensor::Graph::new();
            let (ev, vv) = (g.constant(e), g.constant(var.clone()));
            let l = fine_loss_graph(&mut g, ev, vv, &targets).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < prev || (v == 0.0 && prev == 0.0));
            prev = v;
        }
        assert!(prev.abs() < 1e-12);
    }
}

#[test]
fn dropping_out_of_window_targets_does_not_raise_fine_loss() {
    let mut rng = Rng::new(8);
    for _ in 0..200 {
        let n_in = 1 + rng.below(10);
        let n_out = 1 + rng.below(4);
        let mut heatmaps = Vec::new();
        let mut targets = Vec::new();
        for k in 0..n_in + n_out {
            heatmaps.push(softmax(&(0..25).map(|_| rng.uniform(-3.0, 3.0)).collect::<Vec<_>>()));
            targets.push(if k < n_in {
                [rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)]
            } else {
                // Several cells beyond the patch edge.
                let s = if rng.below(2) == 0 { 1.0 } else { -1.0 };
                [s * rng.uniform(4.0, 8.0), rng.uniform(-0.8, 0.8)]
            });
        }
        let full = fine_loss(&heatmaps, &targets, 5).unwrap().value;
        let kept = fine_loss(&heatmaps[..n_in], &targets[..n_in], 5).unwrap().value;
        assert!(kept <= full);
    }
}

#[test]
fn coarse_loss_gradients() {
    let mut rng = Rng::new(10);
    for _ in 0..TRIALS {
        let p = Tensor::new(&[4, 4], (0..16).map(|_| rng.uniform(0.05, 0.95)).collect()).unwrap();
        let truth = Tensor::new(&[4, 4], labels(&mut rng, 16)).unwrap();
        let r = grad_check(|g, v| lift(coarse_loss_graph(g, v[0], &truth)), &[p], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }
}

#[test]
fn fine_loss_gradients() {
    let mut rng = Rng::new(11);
    for _ in 0..TRIALS {
        let m = 1 + rng.below(4);
        let logits = common::random_tensor(&[m, 25], &mut rng, 2.0);
        let targets = common::random_tensor(&[m, 2], &mut rng, 0.8);
        let f = |g: &mut nrmatch_tensor::Graph, v: &[nrmatch_tensor::Var]| {
            let (e, var) = lift(heatmap_graph(g, v[0], 5))?;
            lift(fine_loss_graph(g, e, var, &targets))
        };
        let r = grad_check(f, &[logits], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }
}

#[test]
fn classification_loss_gradients() {
    let mut rng = Rng::new(12);
    for _ in 0..TRIALS {
        let n = 4 + rng.below(8);
        let l = labels(&mut rng, n);
        let w = Tensor::new(&[n, 1], (0..n).map(|_| rng.uniform(0.05, 0.95)).collect()).unwrap();
        let r = grad_check(|g, v| lift(classification_loss_graph(g, v[0], &l)), &[w], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
        // Through the weight map tanh(relu(y)), away from the kink and clamp.
        let y = Tensor::new(&[n, 1], (0..n).map(|_| rng.uniform(0.1, 2.5)).collect()).unwrap();
        let f = |g: &mut nrmatch_tensor::Graph, v: &[nrmatch_tensor::Var]| {
            let w = g.relu(v[0]);
            let w = g.tanh(w);
            lift(classification_loss_graph(g, w, &l))
        };
        let r = grad_check(f, &[y], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }
}

#[test]
fn essential_loss_gradients() {
    let mut rng = Rng::new(13);
    for _ in 0..TRIALS {
        let (e_gt, batch) = noisy_scene(&mut rng, 16, 0.02);
        let e = Tensor::new(&[9], (0..9).map(|i| e_gt[i] + rng.uniform(-0.2, 0.2)).collect()).unwrap();
        let r = grad_check(|g, v| Ok(lift(essential_loss_graph(g, v[0], &e_gt, &batch))?.0), &[e], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }
}

#[test]
fn essential_loss_gradients_through_weighted_eight_point() {
    let mut rng = Rng::new(14);
    for _ in 0..10 {
        let (e_gt, batch) = noisy_scene(&mut rng, 16, 0.2);
        let w = Tensor::new(&[16, 1], (0..16).map(|_| rng.uniform(0.2, 1.0)).collect()).unwrap();
        let z = batch.constraint_rows();
        let f = |g: &mut nrmatch_tensor::Graph, v: &[nrmatch_tensor::Var]| {
            let zv = g.constant(z.clone());
            let e = lift(eight_point_graph(g, zv, v[0]))?;
            Ok(lift(essential_loss_graph(g, e, &e_gt, &batch))?.0)
        };
        let r = grad_check(f, &[w], 1e-6, 1e-8).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }
}
