//! Coarse matching by dual softmax and mutual nearest neighbours, then
//! sub-cell refinement by local heatmap expectation.

use nrmatch_tensor::{Axis, Binder, Graph, ParamStore, Rng, Tensor, Var};

use crate::backbone::{backbone_graph, declare_backbone, declare_fpm, fpm_graph};
use crate::config::{MatcherConfig, PeMode};
use crate::enhancer::{declare_feformer, encoding_field, feformer_graph, Groups};
use crate::error::{CoreError, Result};
use crate::image::Image;

/// Score given to rows whose feature vector has zero norm.
pub const UNMATCHED_SCORE: f64 = -1e9;

/// One coarse correspondence between flat cell indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseMatch {
    pub a: usize,
    pub b: usize,
    pub conf: f64,
}

/// Mutually best cell pairs over two grids of `(rows, cols)` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMatchSet {
    pub entries: Vec<CoarseMatch>,
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
}

impl CoarseMatchSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    /// `(row, col)` of a flat index on grid A.
    pub fn cell_a(&self, idx: usize) -> (usize, usize) {
        (idx / self.grid_a.1, idx % self.grid_a.1)
    }
    pub fn cell_b(&self, idx: usize) -> (usize, usize) {
        (idx / self.grid_b.1, idx % self.grid_b.1)
    }
}

/// Pixel correspondence `(uA, vA) ↔ (uB, vB)`; `u` is horizontal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMatch {
    pub ua: f64,
    pub va: f64,
    pub ub: f64,
    pub vb: f64,
    pub conf_coarse: f64,
    pub conf_fine: f64,
    pub var_heatmap: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelMatchSet {
    pub entries: Vec<PixelMatch>,
    /// Coarse matches dropped because a patch left the fine map.
    pub skipped: usize,
}

impl PixelMatchSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn from_points(points: &[[f64; 4]]) -> Self {
        let entries = points
            .iter()
            .map(|p| PixelMatch { ua: p[0], va: p[1], ub: p[2], vb: p[3], conf_coarse: 1.0, conf_fine: 1.0, var_heatmap: 0.0 })
            .collect();
        Self { entries, skipped: 0 }
    }
    pub fn points(&self) -> Vec<[f64; 4]> {
        self.entries.iter().map(|m| [m.ua, m.va, m.ub, m.vb]).collect()
    }
}

fn zero_row_mask(g: &Graph, x: Var) -> Vec<bool> {
    let t = g.value(x);
    (0..t.rows()).map(|i| t.row(i).iter().all(|&v| v == 0.0)).collect()
}

/// Records `S = â b̂ᵀ / τ_s` with L2-normalized rows. Rows that are exactly
/// zero on either side score [`UNMATCHED_SCORE`].
pub fn score_graph(g: &mut Graph, fa: Var, fb: Var, tau_s: f64) -> Result<Var> {
    let (za, zb) = (zero_row_mask(g, fa), zero_row_mask(g, fb));
    let na = g.l2_normalize_rows(fa);
    let nb = g.l2_normalize_rows(fb);
    let s = g.matmul_t(na, nb, false, true)?;
    let s = g.scale(s, 1.0 / tau_s);
    if za.iter().chain(&zb).any(|&z| z) {
        let (n, m) = (za.len(), zb.len());
        let mut mask = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                if za[i] || zb[j] {
                    mask[i * m + j] = UNMATCHED_SCORE;
                }
            }
        }
        let mk = g.constant(Tensor::new(&[n, m], mask)?);
        return Ok(g.add(s, mk)?);
    }
    Ok(s)
}

pub fn score_matrix(fa: &Tensor, fb: &Tensor, tau_s: f64) -> Result<Tensor> {
    if fa.rank() != 2 || fb.rank() != 2 || fa.cols() != fb.cols() {
        return Err(CoreError::Dimension(format!("score inputs {:?} and {:?}", fa.shape(), fb.shape())));
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(fa.clone()), g.constant(fb.clone()));
    let s = score_graph(&mut g, a, b, tau_s)?;
    Ok(g.value(s).clone())
}

/// Records the row-softmax ⊙ column-softmax product.
pub fn dual_softmax_graph(g: &mut Graph, s: Var) -> Result<Var> {
    let r = g.softmax(s, Axis::Rows);
    let c = g.softmax(s, Axis::Cols);
    Ok(g.mul(r, c)?)
}

pub fn dual_softmax(s: &Tensor) -> Result<Tensor> {
    if s.rank() != 2 {
        return Err(CoreError::Dimension(format!("score matrix must be 2-D, got {:?}", s.shape())));
    }
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let p = dual_softmax_graph(&mut g, v)?;
    Ok(g.value(p).clone())
}

/// Mutual-nearest-neighbour selection above `tau_c`. Row maxima prefer the
/// smaller column and column maxima the smaller row on ties.
pub fn select_coarse(p: &Tensor, tau_c: f64, grid_a: (usize, usize), grid_b: (usize, usize)) -> Result<CoarseMatchSet> {
    if p.rank() != 2 || p.shape()[0] != grid_a.0 * grid_a.1 || p.shape()[1] != grid_b.0 * grid_b.1 {
        return Err(CoreError::Dimension(format!("confidences {:?} vs grids {:?}, {:?}", p.shape(), grid_a, grid_b)));
    }
    let (n, m) = (p.shape()[0], p.shape()[1]);
    let mut row_best = vec![0usize; n];
    let mut col_best = vec![0usize; m];
    for i in 0..n {
        for j in 0..m {
            if p.at2(i, j) > p.at2(i, row_best[i]) {
                row_best[i] = j;
            }
            if p.at2(i, j) > p.at2(col_best[j], j) {
                col_best[j] = i;
            }
        }
    }
    let entries = (0..n)
        .filter_map(|i| {
            let j = row_best[i];
            let conf = p.at2(i, j);
            (col_best[j] == i && conf >= tau_c).then_some(CoarseMatch { a: i, b: j, conf })
        })
        .collect();
    Ok(CoarseMatchSet { entries, grid_a, grid_b })
}

/// Symmetric normalized grid coordinate of 1-based index `j` on an
/// `n`-cell axis: `(2j - n - 1) / n`, centred on the middle cell.
pub fn grid_coord(j: usize, n: usize) -> f64 {
    (2.0 * j as f64 - n as f64 - 1.0) / n as f64
}

/// `n²×2` matrix of `(X, Y)` per heatmap cell in row-major order.
pub fn grid_matrix(n: usize) -> Tensor {
    let mut d = Vec::with_capacity(2 * n * n);
    for i in 1..=n {
        for j in 1..=n {
            d.push(grid_coord(j, n));
            d.push(grid_coord(i, n));
        }
    }
    Tensor::new(&[n * n, 2], d).expect("positive extent")
}

/// Spatial expectation `(E_x, E_y)` and total variance of a row-major
/// `n×n` heatmap over the normalized grid.
pub fn heatmap_moments(z: &[f64], n: usize) -> ([f64; 2], f64) {
    let (mut ex, mut ey, mut ex2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let p = z[i * n + j];
            let (x, y) = (grid_coord(j + 1, n), grid_coord(i + 1, n));
            ex += p * x;
            ey += p * y;
            ex2 += p * (x * x + y * y);
        }
    }
    ([ex, ey], ex2 - ex * ex - ey * ey)
}

/// Graph pieces of the fine stage for a batch of coarse pairs.
pub struct FineOutputs {
    /// `n×w_f²` heatmaps.
    pub heatmap: Var,
    /// `n×2` expectations in grid units.
    pub expectation: Var,
    /// `n×1` total variances.
    pub variance: Var,
    /// Indices (into the requested pairs) that produced a heatmap.
    pub kept: Vec<usize>,
    /// Fine-map centres `(row, col)` of each kept pair on A and B.
    pub centers: Vec<((usize, usize), (usize, usize))>,
}

/// Fine-map centre of a coarse cell: the fine pixel under the cell centre.
pub fn fine_center(cell: (usize, usize)) -> (usize, usize) {
    (4 * cell.0 + 2, 4 * cell.1 + 2)
}

fn patch_rows(center: (usize, usize), r: usize, fw: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for y in center.0 - r..=center.0 + r {
        for x in center.1 - r..=center.1 + r {
            out.push(y * fw + x);
        }
    }
    out
}

fn inside(c: (usize, usize), r: usize, h: usize, w: usize) -> bool {
    c.0 >= r && c.1 >= r && c.0 + r < h && c.1 + r < w
}

/// Network weights and configuration of the full two-stage matcher.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub cfg: MatcherConfig,
    pub params: ParamStore,
}

/// Coarse-stage graph handles.
pub struct CoarseOutputs {
    pub scores: Var,
    pub conf: Var,
    pub fine_a: Var,
    pub fine_b: Var,
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
}

/// Result of matching one image pair.
#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub coarse: CoarseMatchSet,
    pub pixels: PixelMatchSet,
}

impl Matcher {
    /// Fresh weights drawn from the named seed stream.
    pub fn init(cfg: MatcherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::named(seed, "matcher.init");
        let mut params = ParamStore::new();
        declare_backbone(&mut params, &cfg, &mut rng)?;
        declare_fpm(&mut params, cfg.coarse_dim, &mut rng)?;
        declare_feformer(&mut params, "feformer.coarse", cfg.coarse_dim, cfg.l1, &mut rng)?;
        declare_feformer(&mut params, "feformer.fine", cfg.fine_dim, cfg.l2, &mut rng)?;
        Ok(Self { cfg, params })
    }

    /// Overwrites every declared tensor present in `weights`; all backbone
    /// and attention tensors must be supplied.
    pub fn load(&mut self, weights: &ParamStore) -> Result<usize> {
        let missing: Vec<&str> = self.params.names().filter(|n| !weights.contains(n)).collect();
        if !missing.is_empty() {
            return Err(CoreError::Load(format!("{} matcher tensors missing, first {}", missing.len(), missing[0])));
        }
        Ok(self.params.load_matching(weights)?)
    }

    fn encoding_scale(&self, w: usize, h: usize) -> (f64, f64) {
        match self.cfg.pe {
            PeMode::Normalized => (self.cfg.train_w as f64 / w as f64, self.cfg.train_h as f64 / h as f64),
            PeMode::Absolute => (1.0, 1.0),
        }
    }

    fn prepare_coarse(&self, g: &mut Graph, b: &mut Binder, coarse: Var, w: usize, h: usize) -> Result<Var> {
        let x = if self.cfg.fpm { fpm_graph(g, b, coarse)? } else { coarse };
        let s = g.shape(x).to_vec();
        let (mu, nu) = self.encoding_scale(w, h);
        let pe = g.constant(encoding_field(s[0], s[1], s[2], mu, nu));
        let x = g.add(x, pe)?;
        Ok(g.reshape(x, &[s[0] * s[1], s[2]])?)
    }

    /// Records backbone, preprocessing, encoding, coarse attention and the
    /// confidence matrix for one pair.
    pub fn coarse_graph(&self, g: &mut Graph, b: &mut Binder, a: &Image, bimg: &Image) -> Result<CoarseOutputs> {
        let ia = g.constant(a.to_tensor());
        let ib = g.constant(bimg.to_tensor());
        let (ca, fa) = backbone_graph(g, b, ia, &self.cfg)?;
        let (cb, fb) = backbone_graph(g, b, ib, &self.cfg)?;
        let grid_a = (a.height / 8, a.width / 8);
        let grid_b = (bimg.height / 8, bimg.width / 8);
        let ta = self.prepare_coarse(g, b, ca, a.width, a.height)?;
        let tb = self.prepare_coarse(g, b, cb, bimg.width, bimg.height)?;
        let (ga, gb) = (Groups::single(grid_a.0 * grid_a.1), Groups::single(grid_b.0 * grid_b.1));
        let (ea, eb) = feformer_graph(g, b, "feformer.coarse", ta, tb, self.cfg.l1, self.cfg.heads, &ga, &gb)?;
        let scores = score_graph(g, ea, eb, self.cfg.tau_s)?;
        let conf = dual_softmax_graph(g, scores)?;
        Ok(CoarseOutputs { scores, conf, fine_a: fa, fine_b: fb, grid_a, grid_b })
    }

    /// Records the fine stage for `pairs` of `(cell A, cell B)` as
    /// `(row, col)` coarse cells.
    pub fn fine_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        fine_a: Var,
        fine_b: Var,
        pairs: &[((usize, usize), (usize, usize))],
    ) -> Result<Option<FineOutputs>> {
        let n = self.cfg.w_f;
        let r = n / 2;
        let (sa, sb) = (g.shape(fine_a).to_vec(), g.shape(fine_b).to_vec());
        let mut rows_a = Vec::new();
        let mut rows_b = Vec::new();
        let mut centre_rows = Vec::new();
        let mut kept = Vec::new();
        let mut centers = Vec::new();
        for (k, &(ca, cb)) in pairs.iter().enumerate() {
            let (pa, pb) = (fine_center(ca), fine_center(cb));
            if !inside(pa, r, sa[0], sa[1]) || !inside(pb, r, sb[0], sb[1]) {
                continue;
            }
            rows_a.extend(patch_rows(pa, r, sa[1]));
            rows_b.extend(patch_rows(pb, r, sb[1]));
            kept.push(k);
            centers.push((pa, pb));
        }
        if kept.is_empty() {
            return Ok(None);
        }
        let m = kept.len();
        let c = self.cfg.fine_dim;
        let flat_a = g.reshape(fine_a, &[sa[0] * sa[1], c])?;
        let flat_b = g.reshape(fine_b, &[sb[0] * sb[1], c])?;
        let pa = g.gather_rows(flat_a, &rows_a)?;
        let pb = g.gather_rows(flat_b, &rows_b)?;
        let groups = Groups::uniform(m, n * n);
        let (ea, eb) = feformer_graph(g, b, "feformer.fine", pa, pb, self.cfg.l2, self.cfg.heads, &groups, &groups)?;
        // Centre token of each A patch, repeated against all of B's tokens.
        let mid = n * n / 2;
        for k in 0..m {
            centre_rows.extend(std::iter::repeat(k * n * n + mid).take(n * n));
        }
        let ctr = g.gather_rows(ea, &centre_rows)?;
        let prod = g.mul(ctr, eb)?;
        let sim = g.sum_cols(prod);
        let sim = g.reshape(sim, &[m, n * n])?;
        let sim = g.scale(sim, 1.0 / (c as f64).sqrt());
        let heatmap = g.softmax(sim, Axis::Rows);
        let grid = grid_matrix(n);
        let sq: Vec<f64> = (0..n * n).map(|i| grid.at2(i, 0).powi(2) + grid.at2(i, 1).powi(2)).collect();
        let gv = g.constant(grid);
        let sqv = g.constant(Tensor::new(&[n * n, 1], sq)?);
        let expectation = g.matmul(heatmap, gv)?;
        let second = g.matmul(heatmap, sqv)?;
        let e2 = g.square(expectation);
        let e2 = g.sum_cols(e2);
        let variance = g.sub(second, e2)?;
        Ok(Some(FineOutputs { heatmap, expectation, variance, kept, centers }))
    }

    /// Full inference on one pair.
    pub fn match_pair(&self, a: &Image, bimg: &Image) -> Result<MatchOutput> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let co = self.coarse_graph(&mut g, &mut b, a, bimg)?;
        let coarse = select_coarse(g.value(co.conf), self.cfg.tau_c, co.grid_a, co.grid_b)?;
        let pairs: Vec<_> = coarse.entries.iter().map(|m| (coarse.cell_a(m.a), coarse.cell_b(m.b))).collect();
        let mut pixels = PixelMatchSet::default();
        if let Some(fo) = self.fine_graph(&mut g, &mut b, co.fine_a, co.fine_b, &pairs)? {
            pixels.skipped = pairs.len() - fo.kept.len();
            let n = self.cfg.w_f as f64;
            let (hm, ex, var) = (g.value(fo.heatmap), g.value(fo.expectation), g.value(fo.variance));
            for (row, (&k, &(pa, pb))) in fo.kept.iter().zip(&fo.centers).enumerate() {
                // Fine pixel f sits at image pixel 2f; a grid unit spans n/2 fine pixels.
                let (ox, oy) = (ex.at2(row, 0) * n, ex.at2(row, 1) * n);
                pixels.entries.push(PixelMatch {
                    ua: 2.0 * pa.1 as f64,
                    va: 2.0 * pa.0 as f64,
                    ub: 2.0 * pb.1 as f64 + ox,
                    vb: 2.0 * pb.0 as f64 + oy,
                    conf_coarse: coarse.entries[k].conf,
                    conf_fine: hm.row(row).iter().copied().fold(0.0, f64::max),
                    var_heatmap: var.data()[row],
                });
            }
        } else {
            pixels.skipped = pairs.len();
        }
        Ok(MatchOutput { coarse, pixels })
    }
}
