//! Minimal reverse-mode automatic differentiation over f64 matrices.
//!
//! A [`Tape`] records each operation's value and a backward closure. Parents
//! always precede children, so one reverse sweep accumulates gradients.
//! All kernels are single-threaded with fixed iteration order: two runs over
//! the same inputs produce bitwise-identical results, and row-level kernels
//! (matmul, softmax) compute each output row independently so that a row
//! subset of a larger product is bitwise equal to the same rows computed
//! standalone.

use indexmap::IndexMap;
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Array2<f64>;
pub type VarId = usize;

/// Additive mask value for disallowed attention links. Large enough that
/// `exp(MASKED - rowmax)` underflows to exactly zero.
pub const NEG_INF_MASK: f64 = -1.0e30;

// ---------------------------------------------------------------------------
// Raw matrix kernels
// ---------------------------------------------------------------------------

/// Deterministic single-threaded matrix product. Each output row depends only
/// on the matching row of `a` with a fixed accumulation order, so a row
/// subset of a product is bitwise equal to the same rows computed standalone
/// (guarded by a unit test below).
pub fn matmul_raw(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
    a.dot(b)
}

pub fn transpose_raw(a: &Mat) -> Mat {
    let (m, n) = a.dim();
    let av = a.as_slice().expect("standard layout");
    let mut out = vec![0.0; m * n];
    for j in 0..n {
        let orow = &mut out[j * m..(j + 1) * m];
        for (i, o) in orow.iter_mut().enumerate() {
            *o = av[i * n + j];
        }
    }
    Mat::from_shape_vec((n, m), out).unwrap()
}

/// Standard-normal matrix from `rng`.
pub fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let mut m = Mat::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    m
}

/// Xavier-uniform init.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Mat::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.random_range(-s..s);
    }
    m
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct Node {
    value: Mat,
    back: Option<BackFn>,
}

type BackFn = Box<dyn Fn(&[Node], &Mat) -> Vec<(VarId, Mat)>>;

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that skips backward-closure bookkeeping (inference mode).
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Mat, back: Option<BackFn>) -> VarId {
        let back = if self.grad_enabled { back } else { None };
        self.nodes.push(Node { value, back });
        self.nodes.len() - 1
    }

    /// Leaf node (input or parameter).
    pub fn input(&mut self, value: Mat) -> VarId {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar root; returns one gradient slot per node.
    pub fn backward(&self, root: VarId) -> Vec<Option<Mat>> {
        assert_eq!(
            self.nodes[root].value.dim(),
            (1, 1),
            "backward root must be a 1x1 scalar"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Mat::from_elem((1, 1), 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                for (pid, contrib) in back(&self.nodes, &g) {
                    debug_assert!(pid < id, "parent {pid} not before child {id}");
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(
            v,
            Some(Box::new(move |_, g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(
            v,
            Some(Box::new(move |_, g| vec![(a, g.clone()), (b, -g)])),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                vec![(a, g * &nodes[b].value), (b, g * &nodes[a].value)]
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let v = &self.nodes[a].value * s;
        self.push(v, Some(Box::new(move |_, g| vec![(a, g * s)])))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a].value + c;
        self.push(v, Some(Box::new(move |_, g| vec![(a, g.clone())])))
    }

    /// Elementwise product with a non-differentiated constant.
    pub fn mul_const(&mut self, a: VarId, c: &Mat) -> VarId {
        let v = &self.nodes[a].value * c;
        let cc = c.clone();
        self.push(v, Some(Box::new(move |_, g| vec![(a, g * &cc)])))
    }

    /// Elementwise sum with a non-differentiated constant.
    pub fn add_const(&mut self, a: VarId, c: &Mat) -> VarId {
        let v = &self.nodes[a].value + c;
        self.push(v, Some(Box::new(move |_, g| vec![(a, g.clone())])))
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(|x| x * x);
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                vec![(a, g * &(&nodes[a].value * 2.0))]
            })),
        )
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let y = self.nodes[a].value.mapv(f64::exp);
        let yc = y.clone();
        self.push(y, Some(Box::new(move |_, g| vec![(a, g * &yc)])))
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let y = self.nodes[a].value.mapv(f64::ln);
        self.push(
            y,
            Some(Box::new(move |nodes, g| {
                vec![(a, g / &nodes[a].value)]
            })),
        )
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let y = self.nodes[a].value.mapv(f64::sqrt);
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |_, g| {
                let d = yc.mapv(|v| if v > 0.0 { 0.5 / v } else { 0.0 });
                vec![(a, g * &d)]
            })),
        )
    }

    pub fn recip(&mut self, a: VarId) -> VarId {
        let y = self.nodes[a].value.mapv(|x| 1.0 / x);
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |_, g| vec![(a, g * &yc.mapv(|v| -v * v))])),
        )
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let y = self.nodes[a].value.mapv(stable_sigmoid);
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |_, g| {
                vec![(a, g * &yc.mapv(|v| v * (1.0 - v)))]
            })),
        )
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let y = self.nodes[a].value.mapv(|x| {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        });
        self.push(
            y,
            Some(Box::new(move |nodes, g| {
                vec![(a, g * &nodes[a].value.mapv(stable_sigmoid))]
            })),
        )
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let y = self.nodes[a].value.mapv(gelu_forward);
        self.push(
            y,
            Some(Box::new(move |nodes, g| {
                vec![(a, g * &nodes[a].value.mapv(gelu_derivative))]
            })),
        )
    }

    /// Elementwise min with a scalar ceiling (derivative 1 below, 0 above).
    pub fn min_scalar(&mut self, a: VarId, ceil: f64) -> VarId {
        let y = self.nodes[a].value.mapv(|x| x.min(ceil));
        self.push(
            y,
            Some(Box::new(move |nodes, g| {
                let d = nodes[a].value.mapv(|x| if x <= ceil { 1.0 } else { 0.0 });
                vec![(a, g * &d)]
            })),
        )
    }

    // -- reductions and broadcasts -------------------------------------------

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a].value.sum();
        self.push(
            Mat::from_elem((1, 1), s),
            Some(Box::new(move |nodes, g| {
                let dim = nodes[a].value.dim();
                vec![(a, Mat::from_elem(dim, g[[0, 0]]))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].value.len() as f64;
        let s = self.nodes[a].value.sum() / n;
        self.push(
            Mat::from_elem((1, 1), s),
            Some(Box::new(move |nodes, g| {
                let dim = nodes[a].value.dim();
                vec![(a, Mat::from_elem(dim, g[[0, 0]] / n))]
            })),
        )
    }

    /// Broadcast-add a `[1, D]` row to every row of `[L, D]`.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let vr = &self.nodes[row].value;
        assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
        assert_eq!(vr.nrows(), 1, "add_row rhs must be a single row");
        let mut v = va.clone();
        for mut r in v.rows_mut() {
            r += &vr.row(0);
        }
        self.push(
            v,
            Some(Box::new(move |_, g| {
                let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(a, g.clone()), (row, col_sum)]
            })),
        )
    }

    /// Mean over rows: `[L, D] -> [1, D]`.
    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let l = va.nrows() as f64;
        let v = (va.sum_axis(Axis(0)) / l).insert_axis(Axis(0));
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                let (rows, cols) = nodes[a].value.dim();
                let mut d = Mat::zeros((rows, cols));
                for mut r in d.rows_mut() {
                    for (dst, src) in r.iter_mut().zip(g.row(0).iter()) {
                        *dst = src / l;
                    }
                }
                vec![(a, d)]
            })),
        )
    }

    /// Scale row `l` of `a` by scalar `s[l, 0]`.
    pub fn scale_rows(&mut self, a: VarId, s: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let vs = &self.nodes[s].value;
        assert_eq!(va.nrows(), vs.nrows(), "scale_rows length mismatch");
        assert_eq!(vs.ncols(), 1, "scale factors must be a column");
        let mut v = va.clone();
        for (mut r, &f) in v.rows_mut().into_iter().zip(vs.column(0).iter()) {
            r *= f;
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                let va = &nodes[a].value;
                let vs = &nodes[s].value;
                let mut da = g.clone();
                for (mut r, &f) in da.rows_mut().into_iter().zip(vs.column(0).iter()) {
                    r *= f;
                }
                let mut ds = Mat::zeros((va.nrows(), 1));
                for i in 0..va.nrows() {
                    let mut acc = 0.0;
                    for j in 0..va.ncols() {
                        acc += g[[i, j]] * va[[i, j]];
                    }
                    ds[[i, 0]] = acc;
                }
                vec![(a, da), (s, ds)]
            })),
        )
    }

    // -- linear algebra --------------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = matmul_raw(&self.nodes[a].value, &self.nodes[b].value);
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                let bt = transpose_raw(&nodes[b].value);
                let at = transpose_raw(&nodes[a].value);
                vec![(a, matmul_raw(g, &bt)), (b, matmul_raw(&at, g))]
            })),
        )
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = transpose_raw(&self.nodes[a].value);
        self.push(
            v,
            Some(Box::new(move |_, g| vec![(a, transpose_raw(g))])),
        )
    }

    /// Row-wise softmax. Masked entries should hold [`NEG_INF_MASK`] added
    /// beforehand; they come out exactly zero.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let va = &self.nodes[a].value;
        let mut y = va.clone();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |_, g| {
                let (rows, cols) = g.dim();
                let gs = g.as_slice().expect("standard layout");
                let ys = yc.as_slice().expect("standard layout");
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    let gr = &gs[i * cols..(i + 1) * cols];
                    let yr = &ys[i * cols..(i + 1) * cols];
                    let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                    for ((dv, &gv), &yv) in d[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(gr)
                        .zip(yr)
                    {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![(a, Mat::from_shape_vec((rows, cols), d).unwrap())]
            })),
        )
    }

    /// Layer normalization over each row with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> VarId {
        const EPS: f64 = 1e-8;
        let vx = &self.nodes[x].value;
        let vg = &self.nodes[gain].value;
        let vb = &self.nodes[bias].value;
        let (l, d) = vx.dim();
        assert_eq!(vg.dim(), (1, d), "layer_norm gain shape");
        assert_eq!(vb.dim(), (1, d), "layer_norm bias shape");
        let mut xhat = Mat::zeros((l, d));
        let mut inv_std = vec![0.0; l];
        let mut y = Mat::zeros((l, d));
        for i in 0..l {
            let row = vx.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (vx[[i, j]] - mean) * is;
                xhat[[i, j]] = h;
                y[[i, j]] = h * vg[[0, j]] + vb[[0, j]];
            }
        }
        let xhat_c = xhat;
        let inv_std_c = inv_std;
        self.push(
            y,
            Some(Box::new(move |nodes, g| {
                let vg = &nodes[gain].value;
                let (l, d) = g.dim();
                let df = d as f64;
                let mut dx = Mat::zeros((l, d));
                let mut dgain = Mat::zeros((1, d));
                let mut dbias = Mat::zeros((1, d));
                for i in 0..l {
                    let is = inv_std_c[i];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxhat = g[[i, j]] * vg[[0, j]];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat_c[[i, j]];
                        dgain[[0, j]] += g[[i, j]] * xhat_c[[i, j]];
                        dbias[[0, j]] += g[[i, j]];
                    }
                    for j in 0..d {
                        let dxhat = g[[i, j]] * vg[[0, j]];
                        dx[[i, j]] = is
                            * (dxhat
                                - sum_dxhat / df
                                - xhat_c[[i, j]] * sum_dxhat_xhat / df);
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            })),
        )
    }

    // -- structural ops --------------------------------------------------------

    /// `out[i, :] = a[map[i], :]`. Also serves as nearest-neighbour upsampling.
    pub fn gather_rows(&mut self, a: VarId, map: Vec<usize>) -> VarId {
        let va = &self.nodes[a].value;
        let d = va.ncols();
        let mut v = Mat::zeros((map.len(), d));
        for (i, &src) in map.iter().enumerate() {
            v.row_mut(i).assign(&va.row(src));
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                let dim = nodes[a].value.dim();
                let mut da = Mat::zeros(dim);
                for (i, &src) in map.iter().enumerate() {
                    let mut row = da.row_mut(src);
                    row += &g.row(i);
                }
                vec![(a, da)]
            })),
        )
    }

    /// Rows listed in `idx` come from `selected` (in order); all other rows
    /// are the broadcast `fill` row.
    pub fn assemble_rows(
        &mut self,
        total_rows: usize,
        idx: Vec<usize>,
        selected: VarId,
        fill: VarId,
    ) -> VarId {
        let vs = &self.nodes[selected].value;
        let vf = &self.nodes[fill].value;
        assert_eq!(vs.nrows(), idx.len(), "assemble_rows index count");
        assert_eq!(vf.nrows(), 1, "assemble_rows fill must be one row");
        let d = vf.ncols();
        let mut v = Mat::zeros((total_rows, d));
        for mut r in v.rows_mut() {
            r.assign(&vf.row(0));
        }
        for (i, &dst) in idx.iter().enumerate() {
            v.row_mut(dst).assign(&vs.row(i));
        }
        let idx_c = idx;
        self.push(
            v,
            Some(Box::new(move |_, g| {
                let d = g.ncols();
                let mut dsel = Mat::zeros((idx_c.len(), d));
                let mut in_sel = vec![false; g.nrows()];
                for (i, &dst) in idx_c.iter().enumerate() {
                    dsel.row_mut(i).assign(&g.row(dst));
                    in_sel[dst] = true;
                }
                let mut dfill = Mat::zeros((1, d));
                for (r, flag) in in_sel.iter().enumerate() {
                    if !flag {
                        let mut row = dfill.row_mut(0);
                        row += &g.row(r);
                    }
                }
                vec![(selected, dsel), (fill, dfill)]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0]].value.ncols();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.nrows()).sum();
        let mut v = Mat::zeros((total, d));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = &self.nodes[p].value;
            assert_eq!(vp.ncols(), d, "concat_rows width mismatch");
            for (i, row) in vp.rows().into_iter().enumerate() {
                v.row_mut(offset + i).assign(&row);
            }
            spans.push((p, offset, vp.nrows()));
            offset += vp.nrows();
        }
        self.push(
            v,
            Some(Box::new(move |_, g| {
                spans
                    .iter()
                    .map(|&(p, off, rows)| {
                        let mut dp = Mat::zeros((rows, g.ncols()));
                        for i in 0..rows {
                            dp.row_mut(i).assign(&g.row(off + i));
                        }
                        (p, dp)
                    })
                    .collect()
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let l = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut out = vec![0.0; l * total];
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = &self.nodes[p].value;
            assert_eq!(vp.nrows(), l, "concat_cols height mismatch");
            let cols = vp.ncols();
            let vs = vp.as_slice().expect("standard layout");
            for i in 0..l {
                out[i * total + offset..i * total + offset + cols]
                    .copy_from_slice(&vs[i * cols..(i + 1) * cols]);
            }
            spans.push((p, offset, cols));
            offset += cols;
        }
        let v = Mat::from_shape_vec((l, total), out).unwrap();
        self.push(
            v,
            Some(Box::new(move |_, g| {
                let total = g.ncols();
                let gs = g.as_slice().expect("standard layout");
                spans
                    .iter()
                    .map(|&(p, off, cols)| {
                        let mut dp = vec![0.0; g.nrows() * cols];
                        for i in 0..g.nrows() {
                            dp[i * cols..(i + 1) * cols]
                                .copy_from_slice(&gs[i * total + off..i * total + off + cols]);
                        }
                        (p, Mat::from_shape_vec((g.nrows(), cols), dp).unwrap())
                    })
                    .collect()
            })),
        )
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let va = &self.nodes[a].value;
        assert!(start + len <= va.nrows(), "slice_rows out of range");
        let d = va.ncols();
        let mut v = Mat::zeros((len, d));
        for i in 0..len {
            v.row_mut(i).assign(&va.row(start + i));
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                let mut da = Mat::zeros(nodes[a].value.dim());
                for i in 0..len {
                    da.row_mut(start + i).assign(&g.row(i));
                }
                vec![(a, da)]
            })),
        )
    }

    /// Apply a constant linear map on the left: `out = p * a`. Used for
    /// average pooling over token grids, where `p` is the pooling stencil.
    pub fn linear_map_rows(&mut self, a: VarId, p: &Mat) -> VarId {
        let v = matmul_raw(p, &self.nodes[a].value);
        let pt = transpose_raw(p);
        self.push(
            v,
            Some(Box::new(move |_, g| vec![(a, matmul_raw(&pt, g))])),
        )
    }

    /// Unfold row windows for 1-D convolution along the row axis:
    /// `out[o, tap*C + c] = a[src(o, tap), c]` with zeros outside the map.
    /// `map` has one entry per (output row, tap).
    pub fn unfold_rows(&mut self, a: VarId, map: &TapMap) -> VarId {
        let va = &self.nodes[a].value;
        let c = va.ncols();
        let k = map.taps;
        let rows = map.src.len() / k;
        let avs = va.as_slice().expect("standard layout");
        let mut out = vec![0.0; rows * k * c];
        for o in 0..rows {
            let orow = &mut out[o * k * c..(o + 1) * k * c];
            for tap in 0..k {
                if let Some(src) = map.src[o * k + tap] {
                    orow[tap * c..(tap + 1) * c].copy_from_slice(&avs[src * c..(src + 1) * c]);
                }
            }
        }
        let v = Mat::from_shape_vec((rows, k * c), out).unwrap();
        let src = map.src.clone();
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                let (rows_in, c) = nodes[a].value.dim();
                let rows_out = src.len() / k;
                let gs = g.as_slice().expect("standard layout");
                let mut da = vec![0.0; rows_in * c];
                for o in 0..rows_out {
                    let grow = &gs[o * k * c..(o + 1) * k * c];
                    for tap in 0..k {
                        if let Some(s) = src[o * k + tap] {
                            let dst = &mut da[s * c..(s + 1) * c];
                            for (d, gv) in dst.iter_mut().zip(&grow[tap * c..(tap + 1) * c]) {
                                *d += gv;
                            }
                        }
                    }
                }
                vec![(a, Mat::from_shape_vec((rows_in, c), da).unwrap())]
            })),
        )
    }

    /// 1-D max pooling along rows, per column, with symmetric padding of
    /// `pad` (padded taps are ignored). Output rows: (L + 2*pad - k)/stride + 1.
    pub fn maxpool_rows(&mut self, a: VarId, k: usize, stride: usize, pad: usize) -> VarId {
        let va = &self.nodes[a].value;
        let (l, d) = va.dim();
        assert!(l + 2 * pad >= k, "maxpool window exceeds padded length");
        let out_rows = (l + 2 * pad - k) / stride + 1;
        let mut v = Mat::zeros((out_rows, d));
        let mut argmax = vec![0usize; out_rows * d];
        for o in 0..out_rows {
            for j in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for tap in 0..k {
                    let pos = o * stride + tap;
                    if pos < pad || pos - pad >= l {
                        continue;
                    }
                    let i = pos - pad;
                    if va[[i, j]] > best {
                        best = va[[i, j]];
                        best_i = i;
                    }
                }
                v[[o, j]] = best;
                argmax[o * d + j] = best_i;
            }
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g| {
                let dim = nodes[a].value.dim();
                let mut da = Mat::zeros(dim);
                for o in 0..g.nrows() {
                    for j in 0..g.ncols() {
                        da[[argmax[o * g.ncols() + j], j]] += g[[o, j]];
                    }
                }
                vec![(a, da)]
            })),
        )
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_forward(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

// ---------------------------------------------------------------------------
// Convolution tap maps
// ---------------------------------------------------------------------------

/// Source-row lookup table for [`Tape::unfold_rows`]: `src[o * taps + tap]`
/// is the input row feeding tap `tap` of output row `o`, or None for padding.
#[derive(Debug, Clone)]
pub struct TapMap {
    pub taps: usize,
    pub src: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero padding split evenly so output length equals ceil(L / stride).
    Same,
    /// Left padding of k-1 so each output sees only current and past rows.
    Causal,
}

/// Tap map for a plain sequence of `len` rows.
pub fn conv_map(len: usize, k: usize, stride: usize, mode: PadMode) -> TapMap {
    let (pad_left, out_len) = match mode {
        PadMode::Same => {
            let out = len.div_ceil(stride);
            let needed = (out - 1) * stride + k;
            let total_pad = needed.saturating_sub(len);
            (total_pad / 2, out)
        }
        PadMode::Causal => {
            assert_eq!(stride, 1, "causal convolution uses stride 1");
            (k - 1, len)
        }
    };
    let mut src = Vec::with_capacity(out_len * k);
    for o in 0..out_len {
        for tap in 0..k {
            let pos = o * stride + tap;
            if pos < pad_left || pos - pad_left >= len {
                src.push(None);
            } else {
                src.push(Some(pos - pad_left));
            }
        }
    }
    TapMap { taps: k, src }
}

/// Tap map for a token grid laid out frequency-major (`rows = f * time + t`):
/// convolution runs along time within each frequency row independently.
pub fn grid_conv_map(freqs: usize, time: usize, k: usize, mode: PadMode) -> TapMap {
    let base = conv_map(time, k, 1, mode);
    let out_time = base.src.len() / k;
    let mut src = Vec::with_capacity(freqs * out_time * k);
    for f in 0..freqs {
        for entry in &base.src {
            src.push(entry.map(|t| f * time + t));
        }
    }
    TapMap { taps: k, src }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

/// Ordered, named parameter tensors. Iteration order is insertion order, so
/// initialization, optimizer sweeps, and serialization are all deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate param {name}");
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.entries.iter_mut()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Register every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = IndexMap::new();
        for (name, value) in &self.entries {
            let id = tape.input(value.clone());
            ids.insert(name.clone(), id);
        }
        BoundParams { ids }
    }
}

/// Tape leaf ids for a bound [`ParamSet`].
pub struct BoundParams {
    ids: IndexMap<String, VarId>,
}

impl BoundParams {
    /// Bind explicit (name, id) pairs; used by test harnesses that manage
    /// tape leaves themselves.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, VarId)>) -> Self {
        BoundParams {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.ids.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences through an arbitrary graph builder.
    fn check_grad<F>(build: F, inputs: &[Mat], tol: f64)
    where
        F: Fn(&mut Tape, &[VarId]) -> VarId,
    {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = inputs.iter().map(|m| tape.input(m.clone())).collect();
        let root = build(&mut tape, &ids);
        let grads = tape.backward(root);

        let eps = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads[ids[which]]
                .as_ref()
                .cloned()
                .unwrap_or_else(|| Mat::zeros(input.dim()));
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let eval = |delta: f64| {
                    let mut pert: Vec<Mat> = inputs.to_vec();
                    pert[which][[r, c]] += delta;
                    let mut t = Tape::new();
                    let ids: Vec<VarId> = pert.iter().map(|m| t.input(m.clone())).collect();
                    let root = build(&mut t, &ids);
                    t.value(root)[[0, 0]]
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[[r, c]];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "input {which} entry ({r},{c}): analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randn(rows, cols, &mut rng)
    }

    #[test]
    fn matmul_against_simple_reference() {
        let a = Mat::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Mat::from_shape_vec((3, 2), vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul_raw(&a, &b);
        assert_eq!(c[[0, 0]], 58.0);
        assert_eq!(c[[0, 1]], 64.0);
        assert_eq!(c[[1, 0]], 139.0);
        assert_eq!(c[[1, 1]], 154.0);
    }

    #[test]
    fn matmul_rows_are_independent() {
        let a = rand_mat(6, 8, 1);
        let b = rand_mat(8, 5, 2);
        let full = matmul_raw(&a, &b);
        let sub_rows = [1usize, 4];
        let mut sub = Mat::zeros((2, 8));
        for (i, &r) in sub_rows.iter().enumerate() {
            sub.row_mut(i).assign(&a.row(r));
        }
        let part = matmul_raw(&sub, &b);
        for (i, &r) in sub_rows.iter().enumerate() {
            for j in 0..5 {
                assert_eq!(part[[i, j]].to_bits(), full[[r, j]].to_bits());
            }
        }
    }

    #[test]
    fn grads_elementwise_chain() {
        let x = rand_mat(3, 4, 3);
        let y = rand_mat(3, 4, 4);
        check_grad(
            |t, ids| {
                let p = t.mul(ids[0], ids[1]);
                let q = t.gelu(p);
                let r = t.add(q, ids[0]);
                t.mean_all(r)
            },
            &[x, y],
            1e-6,
        );
    }

    #[test]
    fn grads_matmul_softmax() {
        let q = rand_mat(4, 3, 5);
        let k = rand_mat(5, 3, 6);
        let v = rand_mat(5, 2, 7);
        check_grad(
            |t, ids| {
                let kt = t.transpose(ids[1]);
                let s = t.matmul(ids[0], kt);
                let s = t.scale(s, 1.0 / (3.0f64).sqrt());
                let a = t.softmax_rows(s);
                let o = t.matmul(a, ids[2]);
                let w = t.square(o);
                t.sum_all(w)
            },
            &[q, k, v],
            1e-6,
        );
    }

    #[test]
    fn grads_scalar_maps() {
        let x = rand_mat(3, 3, 8).mapv(|v| v.abs() + 0.5);
        check_grad(
            |t, ids| {
                let a = t.ln(ids[0]);
                let b = t.sqrt(ids[0]);
                let c = t.recip(ids[0]);
                let d = t.exp(a);
                let e = t.add(b, c);
                let f = t.add(d, e);
                let g = t.sigmoid(f);
                let h = t.softplus(g);
                t.mean_all(h)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn grads_layer_norm() {
        let x = rand_mat(4, 6, 9);
        let g = rand_mat(1, 6, 10);
        let b = rand_mat(1, 6, 11);
        check_grad(
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]);
                let y2 = t.square(y);
                t.mean_all(y2)
            },
            &[x, g, b],
            1e-5,
        );
    }

    #[test]
    fn grads_structural_ops() {
        let x = rand_mat(5, 3, 12);
        let y = rand_mat(2, 3, 13);
        let f = rand_mat(1, 3, 14);
        check_grad(
            |t, ids| {
                let g = t.gather_rows(ids[0], vec![4, 0, 2, 2]);
                let asm = t.assemble_rows(6, vec![1, 3], ids[1], ids[2]);
                let cat = t.concat_rows(&[g, asm]);
                let sl = t.slice_rows(cat, 2, 6);
                let m = t.mean_rows(sl);
                let s = t.square(m);
                t.sum_all(s)
            },
            &[x, y, f],
            1e-6,
        );
    }

    #[test]
    fn grads_unfold_and_pool() {
        let x = rand_mat(7, 2, 15);
        let w = rand_mat(6, 3, 16); // k=3 taps, 2 channels -> 3 outputs
        check_grad(
            |t, ids| {
                let map = conv_map(7, 3, 1, PadMode::Same);
                let u = t.unfold_rows(ids[0], &map);
                let c = t.matmul(u, ids[1]);
                let p = t.maxpool_rows(c, 3, 2, 1);
                let s = t.square(p);
                t.sum_all(s)
            },
            &[x, w],
            1e-5,
        );
    }

    #[test]
    fn grads_grid_conv_and_scale_rows() {
        let x = rand_mat(6, 2, 17); // grid 2x3
        let w = rand_mat(6, 2, 18);
        let s = rand_mat(6, 1, 19);
        check_grad(
            |t, ids| {
                let map = grid_conv_map(2, 3, 3, PadMode::Causal);
                let u = t.unfold_rows(ids[0], &map);
                let c = t.matmul(u, ids[1]);
                let sc = t.scale_rows(c, ids[2]);
                let q = t.square(sc);
                t.mean_all(q)
            },
            &[x, w, s],
            1e-5,
        );
    }

    #[test]
    fn causal_map_never_looks_ahead() {
        let map = conv_map(5, 3, 1, PadMode::Causal);
        for o in 0..5 {
            for tap in 0..3 {
                if let Some(src) = map.src[o * 3 + tap] {
                    assert!(src <= o, "output {o} reads future row {src}");
                }
            }
        }
    }

    #[test]
    fn same_map_output_length() {
        for len in [5usize, 8, 17] {
            for stride in [1usize, 2] {
                let map = conv_map(len, 3, stride, PadMode::Same);
                assert_eq!(map.src.len() / 3, len.div_ceil(stride));
            }
        }
    }

    #[test]
    fn maxpool_halves_length_with_ceil() {
        for l in [4usize, 5, 64, 65] {
            let mut t = Tape::no_grad();
            let x = t.input(rand_mat(l, 2, l as u64));
            let p = t.maxpool_rows(x, 3, 2, 1);
            assert_eq!(t.value(p).nrows(), l.div_ceil(2), "L = {l}");
        }
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        // f(x) = sum(x * x + x) -> df/dx = 2x + 1
        let x = rand_mat(2, 2, 20);
        let mut t = Tape::new();
        let xi = t.input(x.clone());
        let sq = t.mul(xi, xi);
        let sum = t.add(sq, xi);
        let root = t.sum_all(sum);
        let grads = t.backward(root);
        let gx = grads[xi].as_ref().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((gx[[i, j]] - (2.0 * x[[i, j]] + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_zeroes_future() {
        let mut t = Tape::new();
        let x = t.input(rand_mat(3, 3, 21));
        let mut mask = Mat::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    mask[[i, j]] = NEG_INF_MASK;
                }
            }
        }
        let masked = t.add_const(x, &mask);
        let y = t.softmax_rows(masked);
        let v = t.value(y);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[0, 2]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        for i in 0..3 {
            let s: f64 = (0..3).map(|j| v[[i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
