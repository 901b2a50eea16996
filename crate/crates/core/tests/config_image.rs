use nrmatch_core::geometry::random_scene;
use nrmatch_core::{CoreError, Image, Matcher, MatcherConfig, Profile};
use nrmatch_tensor::{ParamStore, Rng};

#[test]
fn profiles_parse_and_validate() {
    assert_eq!("desk".parse::<Profile>().unwrap(), Profile::Desk);
    assert_eq!("paper".parse::<Profile>().unwrap(), Profile::Paper);
    assert!("huge".parse::<Profile>().is_err());
    let paper = MatcherConfig::for_profile(Profile::Paper);
    assert_eq!((paper.coarse_dim, paper.fine_dim, paper.l1, paper.l2), (256, 128, 4, 2));
    paper.validate().unwrap();
    MatcherConfig::desk().validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        MatcherConfig { coarse_dim: 30, ..MatcherConfig::desk() },
        MatcherConfig { heads: 5, ..MatcherConfig::desk() },
        MatcherConfig { l1: 0, ..MatcherConfig::desk() },
        MatcherConfig { w_f: 4, ..MatcherConfig::desk() },
        MatcherConfig { tau_c: 1.5, ..MatcherConfig::desk() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(CoreError::Parameter(_))), "{cfg:?}");
        assert!(Matcher::init(cfg, 0).is_err());
    }
}

#[test]
fn matcher_weights_must_be_complete() {
    let mut m = Matcher::init(MatcherConfig::desk(), 1).unwrap();
    assert!(matches!(m.load(&ParamStore::new()), Err(CoreError::Load(_))));
    let other = Matcher::init(MatcherConfig::desk(), 2).unwrap();
    assert_eq!(m.load(&other.params).unwrap(), other.params.len());
    assert_eq!(m.params, other.params);
}

#[test]
fn image_construction_and_sampling() {
    assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    assert!(Image::new(0, 2, vec![]).is_err());
    let img = Image::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(img.sample(0.5, 0.5), Some(1.5));
    assert_eq!(img.sample(1.0, 0.0), Some(1.0));
    assert_eq!(img.sample(1.0, 1.0), Some(3.0));
    assert_eq!(img.sample(-0.1, 0.0), None);
    assert_eq!(img.sample(0.0, 1.01), None);
    assert_eq!(img.to_tensor().shape(), &[2, 2, 1]);
}

#[test]
fn synthetic_scenes_are_consistent() {
    let mut rng = Rng::new(3);
    for planar in [false, true] {
        let s = random_scene(&mut rng, 50, planar);
        assert_eq!(s.points.len(), 50);
        let norm = s.e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        for p in &s.points {
            assert!(p.iter().all(|v| v.abs() <= 1.0));
            let (x, xp) = ([p[0], p[1], 1.0], [p[2], p[3], 1.0]);
            let r: f64 = (0..3).map(|i| xp[i] * (0..3).map(|j| s.e[3 * i + j] * x[j]).sum::<f64>()).sum();
            assert!(r.abs() < 1e-12);
        }
    }
}
