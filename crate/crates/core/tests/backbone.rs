mod common;

use nrmatch_core::backbone::{declare_backbone, declare_fpm, extract_features, fpm, FPM_KERNELS};
use nrmatch_core::{CoreError, Image, MatcherConfig};
use nrmatch_tensor::{ParamStore, Rng, Tensor};

fn backbone_store(cfg: &MatcherConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    declare_backbone(&mut store, cfg, &mut Rng::new(seed)).unwrap();
    store
}

fn assert_channel_constant(t: &Tensor) {
    let c = *t.shape().last().unwrap();
    for (i, v) in t.data().iter().enumerate() {
        let first = t.data()[i % c];
        assert!((v - first).abs() < 1e-9, "channel {} varies: {v} vs {first}", i % c);
    }
}

#[test]
fn desk_profile_shapes() {
    let cfg = MatcherConfig::desk();
    let f = extract_features(&common::texture(128, 128, 1), &backbone_store(&cfg, 1), &cfg).unwrap();
    assert_eq!(f.coarse.shape(), &[16, 16, 64]);
    assert_eq!(f.fine.shape(), &[64, 64, 32]);
}

#[test]
fn paper_profile_shapes() {
    let cfg = MatcherConfig::paper();
    let f = extract_features(&common::texture(512, 512, 2), &backbone_store(&cfg, 2), &cfg).unwrap();
    assert_eq!(f.coarse.shape(), &[64, 64, 256]);
    assert_eq!(f.fine.shape(), &[256, 256, 128]);
}

#[test]
fn rectangular_inputs_keep_aspect() {
    let cfg = MatcherConfig::desk();
    let f = extract_features(&common::texture(96, 64, 3), &backbone_store(&cfg, 3), &cfg).unwrap();
    assert_eq!(f.coarse.shape(), &[8, 12, 64]);
    assert_eq!(f.fine.shape(), &[32, 48, 32]);
}

#[test]
fn extents_must_be_multiples_of_eight() {
    let cfg = MatcherConfig::desk();
    let store = backbone_store(&cfg, 4);
    for (w, h) in [(100, 128), (128, 60), (4, 4)] {
        let err = extract_features(&Image::filled(w, h, 0.5), &store, &cfg).unwrap_err();
        assert!(matches!(err, CoreError::Dimension(_)), "{w}×{h}: {err}");
    }
}

#[test]
fn zero_image_gives_channel_constant_maps() {
    let cfg = MatcherConfig::desk();
    let f = extract_features(&Image::filled(64, 64, 0.0), &backbone_store(&cfg, 5), &cfg).unwrap();
    assert_channel_constant(&f.coarse);
    assert_channel_constant(&f.fine);
}

#[test]
fn extraction_is_bitwise_deterministic() {
    let cfg = MatcherConfig::desk();
    let store = backbone_store(&cfg, 6);
    let img = common::texture(64, 64, 6);
    let a = extract_features(&img, &store, &cfg).unwrap();
    let b = extract_features(&img, &store, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eight_pixel_shift_moves_coarse_map_one_cell() {
    // A textured patch on a zero background, kept far enough from the
    // border that padding never reaches its receptive field.
    let cfg = MatcherConfig::desk();
    let store = backbone_store(&cfg, 7);
    let tex = common::texture(32, 32, 7);
    let (size, origin, shift) = (192, 80, 8);
    let place = |dx: usize, dy: usize| {
        let mut img = Image::filled(size, size, 0.0);
        for y in 0..32 {
            for x in 0..32 {
                img.data[(origin + dy + y) * size + origin + dx + x] = tex.at(x, y);
            }
        }
        img
    };
    let a = extract_features(&place(0, 0), &store, &cfg).unwrap().coarse;
    let b = extract_features(&place(shift, shift), &store, &cfg).unwrap().coarse;
    let (g, c) = (size / 8, cfg.coarse_dim);
    let mut worst: f64 = 0.0;
    for i in 5..g - 6 {
        for j in 5..g - 6 {
            for k in 0..c {
                let va = a.data()[(i * g + j) * c + k];
                let vb = b.data()[((i + 1) * g + j + 1) * c + k];
                worst = worst.max((va - vb).abs());
            }
        }
    }
    assert!(worst < 1e-9, "shifted coarse maps differ by {worst}");
}

#[test]
fn fpm_preserves_shape_for_all_widths() {
    let mut rng = Rng::new(8);
    for c in [4, 8, 64, 256] {
        let mut store = ParamStore::new();
        declare_fpm(&mut store, c, &mut rng).unwrap();
        for k in FPM_KERNELS {
            assert_eq!(store.get(&format!("backbone.fpm.pw{k}.w")).unwrap().shape(), &[1, 1, c, c / 4]);
        }
        let x = common::random_tensor(&[5, 7, c], &mut rng, 1.0);
        assert_eq!(fpm(&x, &store).unwrap().shape(), &[5, 7, c]);
    }
}

#[test]
fn fpm_width_must_divide_by_four() {
    let mut store = ParamStore::new();
    let err = declare_fpm(&mut store, 6, &mut Rng::new(9)).unwrap_err();
    assert!(matches!(err, CoreError::Parameter(_)));
}

#[test]
fn fpm_with_delta_kernels_shuffles_channels() {
    // Branch b copies input channel PERM[b].
    const PERM: [usize; 4] = [2, 0, 3, 1];
    let mut store = ParamStore::new();
    declare_fpm(&mut store, 4, &mut Rng::new(10)).unwrap();
    for (branch, k) in FPM_KERNELS.into_iter().enumerate() {
        let mut dw = Tensor::zeros(&[k, k, 4]);
        for ch in 0..4 {
            dw.data_mut()[((k / 2) * k + k / 2) * 4 + ch] = 1.0;
        }
        store.set(&format!("backbone.fpm.dw{k}.w"), dw);
        let mut pw = Tensor::zeros(&[1, 1, 4, 1]);
        pw.data_mut()[PERM[branch]] = 1.0;
        store.set(&format!("backbone.fpm.pw{k}.w"), pw);
    }
    let x = common::random_tensor(&[6, 5, 4], &mut Rng::new(11), 1.0);
    let y = fpm(&x, &store).unwrap();
    for px in 0..30 {
        for b in 0..4 {
            assert_eq!(y.data()[px * 4 + b], x.data()[px * 4 + PERM[b]]);
        }
    }
}
