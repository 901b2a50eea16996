//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep in index order is
//! a valid topological traversal for [`Graph::backward`].

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, AttnLayout, ConvGeom};
use crate::linalg::{fix_sign, self_adjoint_eigen};
use crate::real::{ordered_sum, Real};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<T> {
    Neg,
    Relu,
    /// `elu(x) + 1`, the positive feature map of kernel attention.
    Elu1,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
    Scale(T),
    AddScalar(T),
    Clamp(T, T),
    ClampMin(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is broadcast over a `rows × cols`
/// view of the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// `b` has `cols` entries, reused for every row.
    Row,
    /// `b` has `rows` entries, reused along each row.
    Col,
}

/// Softmax direction on a `rows × cols` view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

/// Per-group standardization `(x - mean) / s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardize<T> {
    /// `Axis::Cols`: every column is normalized over the rows (instance and
    /// context normalization). `Axis::Rows`: every row over its columns
    /// (layer normalization).
    pub axis: Axis,
    pub eps: T,
    /// `s = sqrt(var + eps)` when true, `s = sqrt(var) + eps` otherwise.
    pub eps_inside_sqrt: bool,
    /// Reduce with [`ordered_sum`] so the result is bitwise invariant under
    /// permutations along the reduced axis.
    pub ordered: bool,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Unary(Var, Unary<T>),
    Binary(Var, Var, Binary, Bcast),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Softmax(Var, Axis),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Depthwise { x: Var, w: Var, k: usize },
    Upsample2x(Var),
    Standardize { x: Var, spec: Standardize<T>, s: Vec<T>, sigma: Vec<T> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout },
    SmallestEigvec { x: Var, values: Vec<T>, vectors: Tensor<T> },
    L2NormalizeRows { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation tape for one forward (and optional backward) pass.
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_of(a: &[usize], b: &[usize]) -> Result<Bcast> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let cols = *a.last().unwrap();
    let rows = na / cols;
    if a == b {
        Ok(Bcast::Same)
    } else if nb == 1 {
        Ok(Bcast::Scalar)
    } else if nb == cols && *b.last().unwrap() == cols {
        Ok(Bcast::Row)
    } else if nb == rows && *b.last().unwrap() == 1 {
        Ok(Bcast::Col)
    } else {
        Err(dim_err!("cannot broadcast {:?} onto {:?}", b, a))
    }
}

#[inline]
fn bidx(bc: Bcast, i: usize, cols: usize) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf; gradients are collected for it by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("gradient shape"))
    }

    // ---- elementwise -------------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Var {
        let xv = self.value(x);
        let out = xv.map(|a| match kind {
            Unary::Neg => -a,
            Unary::Relu => a.max(T::zero()),
            Unary::Elu1 => {
                if a > T::zero() {
                    a + T::one()
                } else {
                    a.exp()
                }
            }
            Unary::Tanh => a.tanh(),
            Unary::Sigmoid => T::one() / (T::one() + (-a).exp()),
            Unary::Exp => a.exp(),
            Unary::Ln => a.ln(),
            Unary::Sqrt => a.sqrt(),
            Unary::Square => a * a,
            Unary::Scale(c) => a * c,
            Unary::AddScalar(c) => a + c,
            Unary::Clamp(lo, hi) => a.max(lo).min(hi),
            Unary::ClampMin(lo) => a.max(lo),
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::Unary(x, kind), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    /// `elu(x) + 1`, strictly positive.
    pub fn elu1(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu1)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }
    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Unary::Scale(c))
    }
    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Unary::AddScalar(c))
    }
    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }
    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        self.unary(x, Unary::ClampMin(lo))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let bc = bcast_of(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bidx(bc, i, cols)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Binary(a, b, kind, bc), ng))
    }

    /// `a + b`, with `b` equal-shaped, scalar, row-broadcast (`[cols]`) or
    /// column-broadcast (`[rows, 1]`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    // ---- linear algebra ----------------------------------------------------

    fn mat_dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err!("expected a matrix, got shape {:?}", s)),
        }
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat_dims(a)?;
        let (br, bc) = self.mat_dims(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err!(
                "matmul inner extents differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        // SAFETY: extents verified above; strides encode the transposes.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                av.as_ptr(),
                if ta { 1 } else { ac as isize },
                if ta { ac as isize } else { 1 },
                bv.as_ptr(),
                if tb { 1 } else { bc as isize },
                if tb { bc as isize } else { 1 },
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            )
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.mat_dims(x)?;
        let out = self.value(x).transpose();
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sums over rows of the `rows × cols` view, giving shape `[cols]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); c];
        for row in xv.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[c], out).unwrap(), Op::SumRows(x), ng)
    }

    /// Sums along the last axis, giving shape `[rows, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out: Vec<T> = xv.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let r = out.len();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[r, 1], out).unwrap(), Op::SumCols(x), ng)
    }

    /// Max-subtracted softmax on the `rows × cols` view.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        let (outer, inner, so, si) = match axis {
            Axis::Rows => (r, c, c, 1),
            Axis::Cols => (c, r, 1, c),
        };
        for o in 0..outer {
            let at = |i: usize| o * so + i * si;
            let m = (0..inner).fold(T::neg_infinity(), |m, i| m.max(d[at(i)]));
            let mut z = T::zero();
            for i in 0..inner {
                let e = (d[at(i)] - m).exp();
                out[at(i)] = e;
                z += e;
            }
            for i in 0..inner {
                out[at(i)] /= z;
            }
        }
        let out = Tensor::new(xv.shape(), out).unwrap();
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x, axis), ng)
    }

    // ---- structural --------------------------------------------------------

    /// Concatenates along the last axis; all inputs share the leading extents.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err!("concat leading extents differ: {:?} vs {:?}", s, lead));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(xs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(dim_err!("slice {}..{} of {} columns", start, start + len, c));
        }
        let out: Vec<T> = xv.data().chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceCols { x, start }, ng))
    }

    /// Rows of the `rows × cols` view selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(dim_err!("gather of zero rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(dim_err!("row {} out of {}", bad, r));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[idx.len(), c], out)?, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    // ---- convolution -------------------------------------------------------

    /// Cross-correlation of an `H×W×Cin` map with a `kh×kw×Cin×Cout` kernel,
    /// zero "same" padding (odd kernels) and the given stride.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride < 1 {
            return Err(TensorError::Parameter("stride must be >= 1".into()));
        }
        let (h, wd, cin) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(dim_err!("conv2d input must be H×W×C, got {:?}", s)),
        };
        let (kh, kw, kc, cout) = match self.shape(w) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(dim_err!("conv2d kernel must be kh×kw×Cin×Cout, got {:?}", s)),
        };
        if kc != cin {
            return Err(dim_err!("kernel expects {} input channels, map has {}", kc, cin));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Parameter(format!("same padding needs odd kernel, got {kh}×{kw}")));
        }
        let geom = ConvGeom { h, w: wd, cin, kh, kw, cout, stride };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let t = Tensor::new(&[geom.out_h(), geom.out_w(), cout], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, ng))
    }

    /// Stride-1 "same" depthwise convolution with a `k×k×C` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (h, wd, c) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(dim_err!("depthwise input must be H×W×C, got {:?}", s)),
        };
        let k = match self.shape(w) {
            [a, b, cc] if a == b && *cc == c => *a,
            s => return Err(dim_err!("depthwise kernel must be k×k×{}, got {:?}", c, s)),
        };
        if k % 2 == 0 {
            return Err(TensorError::Parameter(format!("same padding needs odd kernel, got {k}")));
        }
        let out = kernels::depthwise_forward(h, wd, c, k, self.value(x).data(), self.value(w).data());
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::new(&[h, wd, c], out)?, Op::Depthwise { x, w, k }, ng))
    }

    /// Bilinear 2× upsampling of an `H×W×C` map (half-pixel centers).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => return Err(dim_err!("upsample input must be H×W×C, got {:?}", s)),
        };
        let out = kernels::upsample2x_forward(h, w, c, self.value(x).data());
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[2 * h, 2 * w, c], out)?, Op::Upsample2x(x), ng))
    }

    // ---- fused normalizations and attention --------------------------------

    pub fn standardize(&mut self, x: Var, spec: Standardize<T>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let (groups, len, stride_g, stride_i) = match spec.axis {
            Axis::Cols => (c, r, 1, c),
            Axis::Rows => (r, c, c, 1),
        };
        if len < 2 && spec.ordered {
            return Err(TensorError::Contract(format!("normalization needs >= 2 entries, got {len}")));
        }
        let d = xv.data();
        let nf = T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); d.len()];
        let mut s_all = Vec::with_capacity(groups);
        let mut sig_all = Vec::with_capacity(groups);
        let mut scratch = vec![T::zero(); len];
        for g in 0..groups {
            let at = |i: usize| g * stride_g + i * stride_i;
            for i in 0..len {
                scratch[i] = d[at(i)];
            }
            let mean = if spec.ordered {
                ordered_sum(&mut scratch) / nf
            } else {
                scratch.iter().copied().sum::<T>() / nf
            };
            for i in 0..len {
                let dv = d[at(i)] - mean;
                scratch[i] = dv * dv;
            }
            let var = if spec.ordered {
                ordered_sum(&mut scratch) / nf
            } else {
                scratch.iter().copied().sum::<T>() / nf
            };
            let sigma = var.sqrt();
            let s = if spec.eps_inside_sqrt { (var + spec.eps).sqrt() } else { sigma + spec.eps };
            for i in 0..len {
                out[at(i)] = (d[at(i)] - mean) / s;
            }
            s_all.push(s);
            sig_all.push(sigma);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Standardize { x, spec, s: s_all, sigma: sig_all }, ng))
    }

    /// Grouped multi-head kernel attention over non-negative feature maps.
    ///
    /// `q` is `N×d`, `k`/`v` are `M×d`. `groups` pairs query-row counts with
    /// key/value-row counts; group `g` of the queries attends only to group
    /// `g` of the keys. Each output row is
    /// `q_i (Σ_j k_jᵀ v_j) / (q_i · Σ_j k_j)` per head.
    pub fn kernel_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = self.mat_dims(q)?;
        let (m, dk) = self.mat_dims(k)?;
        let (mv, dv) = self.mat_dims(v)?;
        if d != dk || d != dv || m != mv {
            return Err(dim_err!("attention shapes q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Parameter(format!("{heads} heads do not divide width {d}")));
        }
        let mut layout = AttnLayout { d, heads, groups: Vec::with_capacity(groups.len()) };
        let (mut q0, mut k0) = (0, 0);
        for &(nq, nk) in groups {
            if nk == 0 {
                return Err(TensorError::Contract("attention group with no keys".into()));
            }
            layout.groups.push((q0, q0 + nq, k0, k0 + nk));
            q0 += nq;
            k0 += nk;
        }
        if q0 != n || k0 != m {
            return Err(dim_err!("groups cover {}/{} rows of {}/{}", q0, k0, n, m));
        }
        let out = kernels::attention_forward(&layout, self.value(q).data(), self.value(k).data(), self.value(v).data());
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(Tensor::new(&[n, d], out)?, Op::Attention { q, k, v, layout }, ng))
    }

    /// Unit eigenvector of the smallest eigenvalue of a symmetric matrix,
    /// sign-fixed so its first clearly nonzero entry is positive.
    pub fn smallest_eigvec(&mut self, x: Var) -> Result<Var> {
        let e = self_adjoint_eigen(self.value(x))?;
        let mut v0 = e.vector(0);
        let before = v0.clone();
        fix_sign(&mut v0);
        let mut vectors = e.vectors;
        if before != v0 {
            let n = v0.len();
            for r in 0..n {
                vectors.data_mut()[r * n] = v0[r];
            }
        }
        let n = v0.len();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[n], v0)?, Op::SmallestEigvec { x, values: e.values, vectors }, ng))
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|a| *a /= n);
            }
            norms.push(n);
        }
        let t = Tensor::new(xv.shape(), out).unwrap();
        let ng = self.ng(&[x]);
        self.push(t, Op::L2NormalizeRows { x, norms }, ng)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; afterwards [`Graph::grad`] returns
    /// d loss / d v for every node that depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let slot = |grads: &mut [Option<Vec<T>>], v: Var| -> *mut Vec<T> {
            let len = self.nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len]) as *mut Vec<T>
        };
        macro_rules! acc {
            ($v:expr) => {
                // SAFETY: each slot is a distinct Vec inside `grads`; the
                // pointer is used before any other slot is created.
                unsafe { &mut *slot(grads, $v) }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                if !needs(x) {
                    return;
                }
                let xv = self.nodes[x.0].value.data();
                let dx = acc!(*x);
                for j in 0..g.len() {
                    let (a, y) = (xv[j], out[j]);
                    let d = match *kind {
                        Unary::Neg => -T::one(),
                        Unary::Relu => {
                            if a > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Elu1 => {
                            if a > T::zero() {
                                T::one()
                            } else {
                                y
                            }
                        }
                        Unary::Tanh => T::one() - y * y,
                        Unary::Sigmoid => y * (T::one() - y),
                        Unary::Exp => y,
                        Unary::Ln => T::one() / a,
                        Unary::Sqrt => {
                            if y > T::zero() {
                                T::lit(0.5) / y
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Square => T::lit(2.0) * a,
                        Unary::Scale(c) => c,
                        Unary::AddScalar(_) => T::one(),
                        Unary::Clamp(lo, hi) => {
                            if a >= lo && a <= hi {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::ClampMin(lo) => {
                            if a >= lo {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    dx[j] += g[j] * d;
                }
            }
            Op::Binary(a, b, kind, bc) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let cols = self.nodes[a.0].value.cols();
                if needs(a) {
                    let da = acc!(*a);
                    for j in 0..g.len() {
                        let y = bv[bidx(*bc, j, cols)];
                        da[j] += match kind {
                            Binary::Add | Binary::Sub => g[j],
                            Binary::Mul => g[j] * y,
                            Binary::Div => g[j] / y,
                        };
                    }
                }
                if needs(b) {
                    let db = acc!(*b);
                    for j in 0..g.len() {
                        let k = bidx(*bc, j, cols);
                        let (x, y) = (av[j], bv[k]);
                        db[k] += match kind {
                            Binary::Add => g[j],
                            Binary::Sub => -g[j],
                            Binary::Mul => g[j] * x,
                            Binary::Div => -g[j] * x / (y * y),
                        };
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let (br, bcn) = (self.nodes[b.0].value.shape()[0], self.nodes[b.0].value.shape()[1]);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bcn };
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                // C = op(A) op(B); dop(A) = G op(B)ᵀ, dop(B) = op(A)ᵀ G.
                if needs(a) {
                    let da = acc!(*a);
                    match (ta, tb) {
                        (false, false) => gemm_nt(m, n, k, g, bv, da, true),
                        (false, true) => gemm_nn(m, n, k, g, bv, da, true),
                        // A stored k×m: dA = op(B) Gᵀ.
                        (true, false) => gemm_nt(k, n, m, bv, g, da, true),
                        (true, true) => {
                            // dA (k×m) = Bᵀ... with B stored n×k: dA = Bᵀ Gᵀ = (G B)ᵀ
                            let mut tmp = vec![T::zero(); m * k];
                            gemm_nn(m, n, k, g, bv, &mut tmp, false);
                            for r in 0..m {
                                for c in 0..k {
                                    da[c * m + r] += tmp[r * k + c];
                                }
                            }
                        }
                    }
                }
                if needs(b) {
                    let db = acc!(*b);
                    match (ta, tb) {
                        (false, false) => gemm_tn(k, m, n, av, g, db, true),
                        (true, false) => gemm_nn(k, m, n, av, g, db, true),
                        // B stored n×k: dB = Gᵀ op(A).
                        (false, true) => gemm_tn(n, m, k, g, av, db, true),
                        (true, true) => {
                            // A stored k×m, dB (n×k) = Gᵀ Aᵀ
                            let mut tmp = vec![T::zero(); n * k];
                            gemm_tn(n, m, k, g, &transpose_buf(av, k, m), &mut tmp, false);
                            for (d, t) in db.iter_mut().zip(tmp) {
                                *d += t;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if needs(x) {
                    let (r, c) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                    let dx = acc!(*x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    let dx = acc!(*x);
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SumAll(x) => {
                if needs(x) {
                    let dx = acc!(*x);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumRows(x) => {
                if needs(x) {
                    let c = g.len();
                    let dx = acc!(*x);
                    for row in dx.chunks_mut(c) {
                        for (d, &gv) in row.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SumCols(x) => {
                if needs(x) {
                    let c = self.nodes[x.0].value.cols();
                    let dx = acc!(*x);
                    for (row, &gv) in dx.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if needs(x) {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let (outer, inner, so, si) = match axis {
                        Axis::Rows => (r, c, c, 1),
                        Axis::Cols => (c, r, 1, c),
                    };
                    let dx = acc!(*x);
                    for o in 0..outer {
                        let at = |i: usize| o * so + i * si;
                        let dot = (0..inner).fold(T::zero(), |s, i| s + g[at(i)] * out[at(i)]);
                        for i in 0..inner {
                            dx[at(i)] += out[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for x in xs {
                    let w = self.nodes[x.0].value.cols();
                    if needs(x) {
                        let dx = acc!(*x);
                        for r in 0..rows {
                            for j in 0..w {
                                dx[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(x) {
                    let c = self.nodes[x.0].value.cols();
                    let len = node.value.cols();
                    let dx = acc!(*x);
                    for (r, grow) in g.chunks(len).enumerate() {
                        for (j, &gv) in grow.iter().enumerate() {
                            dx[r * c + start + j] += gv;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(x) {
                    let c = node.value.cols();
                    let dx = acc!(*x);
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let dx = if needs(x) { Some(acc!(*x).as_mut_slice()) } else { None };
                let dw = if needs(w) { Some(acc!(*w).as_mut_slice()) } else { None };
                kernels::conv2d_backward(geom, xv, wv, g, dx, dw);
            }
            Op::Depthwise { x, w, k } => {
                let s = self.nodes[x.0].value.shape();
                let (h, wd, c) = (s[0], s[1], s[2]);
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let dx = if needs(x) { Some(acc!(*x).as_mut_slice()) } else { None };
                let dw = if needs(w) { Some(acc!(*w).as_mut_slice()) } else { None };
                kernels::depthwise_backward(h, wd, c, *k, xv, wv, g, dx, dw);
            }
            Op::Upsample2x(x) => {
                if needs(x) {
                    let s = self.nodes[x.0].value.shape();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    kernels::upsample2x_backward(h, w, c, g, acc!(*x));
                }
            }
            Op::Standardize { x, spec, s, sigma } => {
                if needs(x) {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let (groups, len, stride_g, stride_i) = match spec.axis {
                        Axis::Cols => (c, r, 1, c),
                        Axis::Rows => (r, c, c, 1),
                    };
                    let nf = T::from_usize(len).unwrap();
                    let dx = acc!(*x);
                    for grp in 0..groups {
                        let at = |i: usize| grp * stride_g + i * stride_i;
                        let sg = s[grp];
                        let gbar = (0..len).fold(T::zero(), |a, i| a + g[at(i)]) / nf;
                        // d_i = x_i - mean = y_i * s
                        let gd = (0..len).fold(T::zero(), |a, i| a + g[at(i)] * out[at(i)] * sg);
                        let coef = if spec.eps_inside_sqrt {
                            T::one() / (nf * sg * sg * sg)
                        } else if sigma[grp] > T::zero() {
                            T::one() / (nf * sigma[grp] * sg * sg)
                        } else {
                            T::zero()
                        };
                        for i in 0..len {
                            let d = out[at(i)] * sg;
                            dx[at(i)] += (g[at(i)] - gbar) / sg - d * gd * coef;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, layout } => {
                let qv = self.nodes[q.0].value.data();
                let kv = self.nodes[k.0].value.data();
                let vv = self.nodes[v.0].value.data();
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                kernels::attention_backward(layout, qv, kv, vv, out, g, &mut dq, &mut dk, &mut dv);
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if needs(var) {
                        let slot = acc!(*var);
                        for (s, dd) in slot.iter_mut().zip(d) {
                            *s += dd;
                        }
                    }
                }
            }
            Op::SmallestEigvec { x, values, vectors } => {
                if needs(x) {
                    let n = values.len();
                    let vd = vectors.data();
                    let col = |kk: usize, r: usize| vd[r * n + kk];
                    // dX = Σ_{k>0} (v_kᵀ g)/(λ0 - λk) v_k v0ᵀ, symmetrized.
                    let mut u = vec![T::zero(); n];
                    for kk in 1..n {
                        let gap = values[0] - values[kk];
                        if gap.abs() <= T::min_positive_value() {
                            continue;
                        }
                        let proj = (0..n).fold(T::zero(), |a, r| a + col(kk, r) * g[r]) / gap;
                        for r in 0..n {
                            u[r] += proj * col(kk, r);
                        }
                    }
                    let dx = acc!(*x);
                    let half = T::lit(0.5);
                    for r in 0..n {
                        for c in 0..n {
                            dx[r * n + c] += half * (u[r] * col(0, c) + u[c] * col(0, r));
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if needs(x) {
                    let c = node.value.cols();
                    let dx = acc!(*x);
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm <= T::zero() {
                            continue;
                        }
                        let y = &out[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot = y.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for j in 0..c {
                            dx[r * c + j] += (gr[j] - y[j] * dot) / nrm;
                        }
                    }
                }
            }
        }
    }
}

fn transpose_buf<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
