//! Positional encoding and the alternating linear-attention stack.

use nrmatch_tensor::{Axis, Binder, Graph, ParamStore, Rng, Standardize, Tensor, Var};

use crate::error::{CoreError, Result};

const LAYER_NORM: Standardize<f64> =
    Standardize { axis: Axis::Rows, eps: 1e-5, eps_inside_sqrt: true, ordered: false };

/// Encoding width plus the training and testing pixel extents that set the
/// coordinate rescaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalEncodingSpec {
    pub d: usize,
    pub train_w: usize,
    pub train_h: usize,
    pub test_w: usize,
    pub test_h: usize,
}

impl PositionalEncodingSpec {
    /// Spec with identical training and testing extents (no rescaling).
    pub fn plain(d: usize) -> Self {
        Self { d, train_w: 1, train_h: 1, test_w: 1, test_h: 1 }
    }

    pub fn mu(&self) -> f64 {
        self.train_w as f64 / self.test_w as f64
    }

    pub fn nu(&self) -> f64 {
        self.train_h as f64 / self.test_h as f64
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(CoreError::Parameter(format!("encoding width {} must be a positive multiple of 4", self.d)));
        }
        if [self.train_w, self.train_h, self.test_w, self.test_h].contains(&0) {
            return Err(CoreError::Parameter("encoding extents must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal code of a position: entries `4k..4k+3` are
/// `sin(ω_k x), cos(ω_k x), sin(ω_k y), cos(ω_k y)` with `ω_k = 10000^(-2k/d)`.
pub fn positional_encoding(x: f64, y: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for k in 0..d / 4 {
        let omega = 1.0 / 10000f64.powf(2.0 * k as f64 / d as f64);
        out.extend([(omega * x).sin(), (omega * x).cos(), (omega * y).sin(), (omega * y).cos()]);
    }
    out
}

/// Encoding field for an `h×w` map, shape `h×w×d`, evaluated at
/// `(column · μ, row · ν)`.
pub fn encoding_field(h: usize, w: usize, d: usize, mu: f64, nu: f64) -> Tensor {
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            data.extend(positional_encoding(c as f64 * mu, r as f64 * nu, d));
        }
    }
    Tensor::new(&[h, w, d], data).expect("positive extents")
}

/// Adds the rescaled encoding to an `h×w×C` map.
pub fn npe(features: &Tensor, spec: &PositionalEncodingSpec) -> Result<Tensor> {
    spec.validate()?;
    let s = features.shape();
    if s.len() != 3 || s[2] != spec.d {
        return Err(CoreError::Dimension(format!("features {:?} do not carry {} channels", s, spec.d)));
    }
    let pe = encoding_field(s[0], s[1], spec.d, spec.mu(), spec.nu());
    let data = features.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::new(s, data)?)
}

/// Single-head kernel attention with `φ(x) = elu(x) + 1`:
/// `φ(Q)(φ(K)ᵀV)` normalized per row by `φ(Q)(φ(K)ᵀ1)`.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (n, m) = (q.rows(), k.rows());
    let (pq, pk) = (g.elu1(qv), g.elu1(kv));
    let out = g.kernel_attention(pq, pk, vv, 1, &[(n, m)])?;
    Ok(g.value(out).clone())
}

/// Initial value of every layer-norm gain in the stack.
pub const LN_GAIN_INIT: f64 = 0.1;

const SUBLAYER_TENSORS: [&str; 12] =
    ["wq", "wk", "wv", "wo", "ln1.g", "ln1.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b", "ln2.g", "ln2.b"];

/// Declares an `layers`-deep stack of width `c` under `prefix`
/// (for example `feformer.coarse`).
pub fn declare_feformer(store: &mut ParamStore, prefix: &str, c: usize, layers: usize, rng: &mut Rng) -> Result<()> {
    if layers == 0 {
        return Err(CoreError::Parameter("attention stack needs at least one layer".into()));
    }
    for l in 0..layers {
        for kind in ["self", "cross"] {
            for t in SUBLAYER_TENSORS {
                let name = format!("{prefix}.layer{l}.{kind}.{t}");
                match t {
                    "wq" | "wk" | "wv" | "wo" => store.xavier(&name, &[c, c], c, c, rng)?,
                    "ff1.w" => store.xavier(&name, &[c, 2 * c], c, 2 * c, rng)?,
                    "ff2.w" => store.xavier(&name, &[2 * c, c], 2 * c, c, rng)?,
                    "ff1.b" => store.zeros(&name, &[2 * c])?,
                    // Small gains keep the residual path dominant at init, so
                    // random stacks do not wash out backbone features.
                    "ln1.g" | "ln2.g" => store.insert(&name, Tensor::full(&[c], LN_GAIN_INIT))?,
                    _ => store.zeros(&name, &[c])?,
                }
            }
        }
    }
    Ok(())
}

/// Row counts of the token groups that may attend to each other. Two-image
/// coarse attention uses one group per side; fine attention uses one group
/// per patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Groups(pub Vec<usize>);

impl Groups {
    pub fn single(n: usize) -> Self {
        Self(vec![n])
    }
    pub fn uniform(count: usize, size: usize) -> Self {
        Self(vec![size; count])
    }
}

struct Sublayer<'p> {
    prefix: &'p str,
    heads: usize,
}

impl Sublayer<'_> {
    fn v(&self, g: &mut Graph, b: &mut Binder, t: &str) -> Result<Var> {
        Ok(b.var(g, &format!("{}.{t}", self.prefix))?)
    }

    fn layer_norm(&self, g: &mut Graph, b: &mut Binder, x: Var, which: &str) -> Result<Var> {
        let gain = self.v(g, b, &format!("{which}.g"))?;
        let bias = self.v(g, b, &format!("{which}.b"))?;
        let y = g.standardize(x, LAYER_NORM)?;
        let y = g.mul(y, gain)?;
        Ok(g.add(y, bias)?)
    }

    /// `x + LN(attn(x, src)·Wo)`, then `+ LN(FFN(·))`.
    fn apply(&self, g: &mut Graph, b: &mut Binder, x: Var, src: Var, qg: &Groups, kg: &Groups) -> Result<Var> {
        let (wq, wk, wv, wo) = (self.v(g, b, "wq")?, self.v(g, b, "wk")?, self.v(g, b, "wv")?, self.v(g, b, "wo")?);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(src, wk)?;
        let v = g.matmul(src, wv)?;
        let (q, k) = (g.elu1(q), g.elu1(k));
        let groups: Vec<(usize, usize)> = qg.0.iter().copied().zip(kg.0.iter().copied()).collect();
        if groups.len() != qg.0.len() || groups.len() != kg.0.len() {
            return Err(CoreError::Dimension("query and key group counts differ".into()));
        }
        let msg = g.kernel_attention(q, k, v, self.heads, &groups)?;
        let msg = g.matmul(msg, wo)?;
        let msg = self.layer_norm(g, b, msg, "ln1")?;
        let x1 = g.add(x, msg)?;
        let (w1, b1, w2, b2) = (self.v(g, b, "ff1.w")?, self.v(g, b, "ff1.b")?, self.v(g, b, "ff2.w")?, self.v(g, b, "ff2.b")?);
        let h = g.matmul(x1, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        let h = self.layer_norm(g, b, h, "ln2")?;
        Ok(g.add(x1, h)?)
    }
}

/// Records `layers` rounds of self- then cross-attention on `fa` (`N×C`)
/// and `fb` (`N'×C`). Both cross updates read the post-self features, so
/// swapping the inputs swaps the outputs.
#[allow(clippy::too_many_arguments)]
pub fn feformer_graph(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    fa: Var,
    fb: Var,
    layers: usize,
    heads: usize,
    ga: &Groups,
    gb: &Groups,
) -> Result<(Var, Var)> {
    if layers == 0 {
        return Err(CoreError::Parameter("attention stack needs at least one layer".into()));
    }
    let (mut a, mut bb) = (fa, fb);
    for l in 0..layers {
        let sp = format!("{prefix}.layer{l}.self");
        let cp = format!("{prefix}.layer{l}.cross");
        let s = Sublayer { prefix: &sp, heads };
        let c = Sublayer { prefix: &cp, heads };
        let a1 = s.apply(g, b, a, a, ga, ga)?;
        let b1 = s.apply(g, b, bb, bb, gb, gb)?;
        a = c.apply(g, b, a1, b1, ga, gb)?;
        bb = c.apply(g, b, b1, a1, gb, ga)?;
    }
    Ok((a, bb))
}

/// Inference-only stack over two token sets with one group each.
pub fn feformer(fa: &Tensor, fb: &Tensor, store: &ParamStore, prefix: &str, layers: usize, heads: usize) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let mut b = Binder::new(store, false);
    let (av, bv) = (g.constant(fa.clone()), g.constant(fb.clone()));
    let (ga, gb) = (Groups::single(fa.rows()), Groups::single(fb.rows()));
    let (a, bb) = feformer_graph(&mut g, &mut b, prefix, av, bv, layers, heads, &ga, &gb)?;
    Ok((g.value(a).clone(), g.value(bb).clone()))
}
