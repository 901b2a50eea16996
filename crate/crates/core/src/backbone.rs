//! Three-level convolutional pyramid and the multiscale preprocessing module.
//!
//! Layout (C = coarse width, F = fine width):
//!
//! ```text
//! image ─ conv3 C/4 ─ conv3 C/4 ─ conv3/2 C/2 (l2, H/2) ─ conv3/2 C (l3a, H/4) ─ conv3/2 C ─ conv3 C ─ conv3 C → coarse (H/8)
//!                                       │                        │
//!                                  1×1 → F            1×1 → F, upsample ×2
//!                                       └──────── + ─────────────┘ ─ conv3 F → fine (H/2)
//! ```
//!
//! Internal convolutions are followed by instance normalization and ReLU;
//! the two output convolutions are linear with a bias.

use nrmatch_tensor::{Axis, Binder, Graph, ParamStore, Rng, Standardize, Tensor, Var};

use crate::config::MatcherConfig;
use crate::error::{CoreError, Result};
use crate::image::Image;

pub const FPM_KERNELS: [usize; 4] = [1, 3, 5, 7];

const INSTANCE_NORM: Standardize<f64> =
    Standardize { axis: Axis::Cols, eps: 1e-5, eps_inside_sqrt: true, ordered: false };

/// Coarse (`H/8×W/8×C`) and fine (`H/2×W/2×F`) maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    pub coarse: Tensor,
    pub fine: Tensor,
}

struct ConvSpec {
    name: &'static str,
    k: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    /// Instance norm + ReLU after the conv; otherwise a bias and no activation.
    normed: bool,
}

fn plan(cfg: &MatcherConfig) -> Vec<ConvSpec> {
    let (c, f) = (cfg.coarse_dim, cfg.fine_dim);
    let s = |name, k, cin, cout, stride, normed| ConvSpec { name, k, cin, cout, stride, normed };
    vec![
        s("l1a", 3, 1, c / 4, 1, true),
        s("l1b", 3, c / 4, c / 4, 1, true),
        s("l2", 3, c / 4, c / 2, 2, true),
        s("l3a", 3, c / 2, c, 2, true),
        s("l3b", 3, c, c, 2, true),
        s("c1", 3, c, c, 1, true),
        s("c2", 3, c, c, 1, false),
        s("proj2", 1, c / 2, f, 1, false),
        s("proj3", 1, c, f, 1, false),
        s("fine", 3, f, f, 1, false),
    ]
}

fn wname(layer: &str) -> String {
    format!("backbone.{layer}.w")
}
fn bname(layer: &str) -> String {
    format!("backbone.{layer}.b")
}

/// Declares every backbone tensor in a fixed order.
pub fn declare_backbone(store: &mut ParamStore, cfg: &MatcherConfig, rng: &mut Rng) -> Result<()> {
    for p in plan(cfg) {
        let kk = p.k * p.k;
        store.xavier(&wname(p.name), &[p.k, p.k, p.cin, p.cout], kk * p.cin, kk * p.cout, rng)?;
        if !p.normed {
            store.zeros(&bname(p.name), &[p.cout])?;
        }
    }
    Ok(())
}

/// Declares the four depthwise-separable branches for width `c`.
pub fn declare_fpm(store: &mut ParamStore, c: usize, rng: &mut Rng) -> Result<()> {
    if c % 4 != 0 {
        return Err(CoreError::Parameter(format!("preprocessing width {c} is not divisible by 4")));
    }
    for k in FPM_KERNELS {
        store.xavier(&format!("backbone.fpm.dw{k}.w"), &[k, k, c], k * k, k * k, rng)?;
        store.xavier(&format!("backbone.fpm.pw{k}.w"), &[1, 1, c, c / 4], c, c / 4, rng)?;
        store.zeros(&format!("backbone.fpm.pw{k}.b"), &[c / 4])?;
    }
    Ok(())
}

fn conv_layer(g: &mut Graph, b: &mut Binder, x: Var, p: &ConvSpec) -> Result<Var> {
    let w = b.var(g, &wname(p.name))?;
    let y = g.conv2d(x, w, p.stride)?;
    if p.normed {
        let y = g.standardize(y, INSTANCE_NORM)?;
        Ok(g.relu(y))
    } else {
        let bias = b.var(g, &bname(p.name))?;
        Ok(g.add(y, bias)?)
    }
}

/// Records the backbone on `g`; `img` is `H×W×1`. Returns (coarse, fine).
pub fn backbone_graph(g: &mut Graph, b: &mut Binder, img: Var, cfg: &MatcherConfig) -> Result<(Var, Var)> {
    let shape = g.shape(img).to_vec();
    if shape.len() != 3 || shape[2] != 1 || shape[0] % 8 != 0 || shape[1] % 8 != 0 {
        return Err(CoreError::Dimension(format!("backbone needs H×W×1 with H, W multiples of 8, got {shape:?}")));
    }
    let p = plan(cfg);
    let l1 = conv_layer(g, b, img, &p[0])?;
    let l1 = conv_layer(g, b, l1, &p[1])?;
    let l2 = conv_layer(g, b, l1, &p[2])?;
    let l3a = conv_layer(g, b, l2, &p[3])?;
    let l3 = conv_layer(g, b, l3a, &p[4])?;
    let c = conv_layer(g, b, l3, &p[5])?;
    let coarse = conv_layer(g, b, c, &p[6])?;
    let side = conv_layer(g, b, l2, &p[7])?;
    let deep = conv_layer(g, b, l3a, &p[8])?;
    let up = g.upsample2x(deep)?;
    let fused = g.add(up, side)?;
    let fine = conv_layer(g, b, fused, &p[9])?;
    Ok((coarse, fine))
}

/// Records the preprocessing module on an `h×w×C` map.
pub fn fpm_graph(g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
    let c = *g.shape(x).last().unwrap();
    if c % 4 != 0 {
        return Err(CoreError::Parameter(format!("preprocessing width {c} is not divisible by 4")));
    }
    let mut branches = Vec::with_capacity(4);
    for k in FPM_KERNELS {
        let dw = b.var(g, &format!("backbone.fpm.dw{k}.w"))?;
        let pw = b.var(g, &format!("backbone.fpm.pw{k}.w"))?;
        let pb = b.var(g, &format!("backbone.fpm.pw{k}.b"))?;
        let y = g.depthwise_conv2d(x, dw)?;
        let y = g.conv2d(y, pw, 1)?;
        branches.push(g.add(y, pb)?);
    }
    Ok(g.concat_cols(&branches)?)
}

/// Inference-only feature extraction.
pub fn extract_features(image: &Image, store: &ParamStore, cfg: &MatcherConfig) -> Result<PyramidFeatures> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let x = g.constant(image.to_tensor());
    let (c, f) = backbone_graph(&mut g, &mut b, x, cfg)?;
    Ok(PyramidFeatures { coarse: g.value(c).clone(), fine: g.value(f).clone() })
}

/// Inference-only preprocessing module.
pub fn fpm(coarse: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let x = g.constant(coarse.clone());
    let y = fpm_graph(&mut g, &mut b, x)?;
    Ok(g.value(y).clone())
}
