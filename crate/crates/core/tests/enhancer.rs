mod common;

use std::f64::consts::FRAC_PI_2;

use nrmatch_core::enhancer::{
    declare_feformer, encoding_field, feformer, feformer_graph, linear_attention, npe, positional_encoding, Groups,
    PositionalEncodingSpec,
};
use nrmatch_core::matcher::score_matrix;
use nrmatch_core::CoreError;
use nrmatch_tensor::{Binder, Graph, ParamStore, Rng, Tensor};

fn elu1(x: f64) -> f64 {
    if x > 0.0 { x + 1.0 } else { x.exp() }
}

/// Quadratic-cost reference: explicit kernel matrix, row-normalized.
fn quadratic_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let (n, m, d) = (q.rows(), k.rows(), v.cols());
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let weights: Vec<f64> = (0..m)
            .map(|j| (0..q.cols()).map(|c| elu1(q.at2(i, c)) * elu1(k.at2(j, c))).sum())
            .collect();
        let total: f64 = weights.iter().sum();
        for c in 0..d {
            let s: f64 = (0..m).map(|j| weights[j] * v.at2(j, c)).sum();
            out.set2(i, c, s / total);
        }
    }
    out
}

fn stack(c: usize, layers: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    declare_feformer(&mut store, "feformer.coarse", c, layers, &mut Rng::new(seed)).unwrap();
    store
}

#[test]
fn encoding_at_origin_alternates_zero_one() {
    for d in [4, 8, 64] {
        let pe = positional_encoding(0.0, 0.0, d);
        assert_eq!(pe.len(), d);
        for (i, v) in pe.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }
}

#[test]
fn encoding_width_four_is_plain_trig() {
    let pe = positional_encoding(FRAC_PI_2, 0.0, 4);
    let expected = [1.0, FRAC_PI_2.cos(), 0.0, 1.0];
    assert!(common::max_abs_diff(&pe, &expected) < 1e-15);
}

#[test]
fn encoding_is_bounded() {
    let mut rng = Rng::new(1);
    for _ in 0..200 {
        let (x, y) = (rng.uniform(-1e4, 1e4), rng.uniform(-1e4, 1e4));
        assert!(positional_encoding(x, y, 32).iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn npe_without_rescaling_is_plain_addition() {
    let mut rng = Rng::new(2);
    let f = common::random_tensor(&[4, 6, 8], &mut rng, 1.0);
    let spec = PositionalEncodingSpec { d: 8, train_w: 320, train_h: 240, test_w: 320, test_h: 240 };
    let out = npe(&f, &spec).unwrap();
    let field = encoding_field(4, 6, 8, 1.0, 1.0);
    for i in 0..f.len() {
        assert_eq!(out.data()[i], f.data()[i] + field.data()[i]);
    }
}

#[test]
fn npe_rescales_test_coordinates() {
    let spec = PositionalEncodingSpec { d: 16, train_w: 512, train_h: 512, test_w: 1024, test_h: 1024 };
    assert_eq!(spec.mu(), 0.5);
    let out = npe(&Tensor::zeros(&[3, 4, 16]), &spec).unwrap();
    // Test-time (x=2, y=0) must carry the training-time code of (1, 0).
    let at = &out.data()[2 * 16..3 * 16];
    assert!(common::max_abs_diff(at, &positional_encoding(1.0, 0.0, 16)) < 1e-15);
}

#[test]
fn npe_of_zero_map_is_the_field() {
    let spec = PositionalEncodingSpec { d: 8, train_w: 128, train_h: 96, test_w: 256, test_h: 128 };
    let out = npe(&Tensor::zeros(&[5, 5, 8]), &spec).unwrap();
    assert_eq!(out, encoding_field(5, 5, 8, 0.5, 0.75));
}

#[test]
fn npe_rejects_width_mismatch() {
    let err = npe(&Tensor::zeros(&[2, 2, 8]), &PositionalEncodingSpec::plain(12)).unwrap_err();
    assert!(matches!(err, CoreError::Dimension(_)));
}

#[test]
fn single_key_returns_its_value() {
    let mut rng = Rng::new(3);
    let q = common::random_tensor(&[7, 4], &mut rng, 2.0);
    let k = common::random_tensor(&[1, 4], &mut rng, 2.0);
    let v = common::random_tensor(&[1, 4], &mut rng, 2.0);
    let out = linear_attention(&q, &k, &v).unwrap();
    for i in 0..7 {
        assert!(common::max_abs_diff(out.row(i), v.row(0)) < 1e-12);
    }
}

#[test]
fn identical_keys_average_values() {
    let mut rng = Rng::new(4);
    let q = common::random_tensor(&[5, 4], &mut rng, 1.0);
    let key = common::random_tensor(&[1, 4], &mut rng, 1.0);
    let k = Tensor::from_rows(&vec![key.row(0).to_vec(); 6]).unwrap();
    let v = common::random_tensor(&[6, 4], &mut rng, 1.0);
    let mean: Vec<f64> = (0..4).map(|c| (0..6).map(|j| v.at2(j, c)).sum::<f64>() / 6.0).collect();
    let out = linear_attention(&q, &k, &v).unwrap();
    for i in 0..5 {
        assert!(common::max_abs_diff(out.row(i), &mean) < 1e-12);
    }
}

#[test]
fn linear_grouping_matches_quadratic_oracle() {
    let mut rng = Rng::new(5);
    let q = common::random_tensor(&[6, 4], &mut rng, 1.5);
    let k = common::random_tensor(&[5, 4], &mut rng, 1.5);
    let v = common::random_tensor(&[5, 4], &mut rng, 1.5);
    let out = linear_attention(&q, &k, &v).unwrap();
    assert!(out.max_abs_diff(&quadratic_attention(&q, &k, &v)) < 1e-10);
}

#[test]
fn empty_key_set_is_rejected() {
    // Zero-row tensors cannot be built, and a key group with no rows is a
    // contract error.
    assert!(Tensor::<f64>::new(&[0, 4], vec![]).is_err());
    let mut g: Graph = Graph::new();
    let q = g.constant(Tensor::full(&[2, 4], 1.0));
    let kv = g.constant(Tensor::full(&[3, 4], 1.0));
    let err = g.kernel_attention(q, kv, kv, 1, &[(2, 3), (0, 0)]).unwrap_err();
    assert!(matches!(err, nrmatch_tensor::TensorError::Contract(_)));
}

#[test]
fn outputs_stay_in_value_bounding_box() {
    let mut rng = Rng::new(6);
    for _ in 0..50 {
        let q = common::random_tensor(&[8, 6], &mut rng, 3.0);
        let k = common::random_tensor(&[9, 6], &mut rng, 3.0);
        let v = common::random_tensor(&[9, 6], &mut rng, 3.0);
        let out = linear_attention(&q, &k, &v).unwrap();
        for c in 0..6 {
            let lo = (0..9).map(|j| v.at2(j, c)).fold(f64::MAX, f64::min);
            let hi = (0..9).map(|j| v.at2(j, c)).fold(f64::MIN, f64::max);
            for i in 0..8 {
                assert!(out.at2(i, c) >= lo - 1e-12 && out.at2(i, c) <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn zero_layers_is_a_parameter_error() {
    let err = declare_feformer(&mut ParamStore::new(), "x", 8, 0, &mut Rng::new(7)).unwrap_err();
    assert!(matches!(err, CoreError::Parameter(_)));
    let store = stack(8, 1, 7);
    let mut g: Graph = Graph::new();
    let mut b = Binder::new(&store, false);
    let (a, c) = (g.constant(Tensor::zeros(&[3, 8])), g.constant(Tensor::zeros(&[3, 8])));
    let err = feformer_graph(&mut g, &mut b, "feformer.coarse", a, c, 0, 2, &Groups::single(3), &Groups::single(3));
    assert!(matches!(err, Err(CoreError::Parameter(_))));
}

#[test]
fn stack_preserves_shapes() {
    let store = stack(16, 2, 8);
    let mut rng = Rng::new(8);
    let fa = common::random_tensor(&[64, 16], &mut rng, 1.0);
    let fb = common::random_tensor(&[49, 16], &mut rng, 1.0);
    let (oa, ob) = feformer(&fa, &fb, &store, "feformer.coarse", 2, 4).unwrap();
    assert_eq!(oa.shape(), &[64, 16]);
    assert_eq!(ob.shape(), &[49, 16]);
}

#[test]
fn swapping_inputs_swaps_outputs() {
    let store = stack(16, 2, 9);
    let mut rng = Rng::new(9);
    let fa = common::random_tensor(&[20, 16], &mut rng, 1.0);
    let fb = common::random_tensor(&[12, 16], &mut rng, 1.0);
    let (oa, ob) = feformer(&fa, &fb, &store, "feformer.coarse", 2, 4).unwrap();
    let (sb, sa) = feformer(&fb, &fa, &store, "feformer.coarse", 2, 4).unwrap();
    assert!(oa.max_abs_diff(&sa) < 1e-12);
    assert!(ob.max_abs_diff(&sb) < 1e-12);
}

#[test]
fn large_inputs_stay_finite() {
    let store = stack(16, 4, 10);
    let mut rng = Rng::new(10);
    for _ in 0..5 {
        let fa = common::random_tensor(&[30, 16], &mut rng, 1e3);
        let fb = common::random_tensor(&[25, 16], &mut rng, 1e3);
        let (oa, ob) = feformer(&fa, &fb, &store, "feformer.coarse", 4, 8).unwrap();
        assert!(oa.all_finite() && ob.all_finite());
    }
}

#[test]
fn self_similarity_scores_are_symmetric() {
    let store = stack(32, 4, 11);
    let fa = common::random_tensor(&[40, 32], &mut Rng::new(11), 1.0);
    let (oa, ob) = feformer(&fa, &fa, &store, "feformer.coarse", 4, 8).unwrap();
    let s = score_matrix(&oa, &ob, 0.1).unwrap();
    assert!(s.max_abs_diff(&s.transpose()) < 1e-9);
}
