//! Attention primitives: scaled-dot full attention, ProbSparse attention,
//! the HiLo split-head block, and sinusoidal positional encodings.
//!
//! ProbSparse grants exact softmax attention to the top-u queries by sparsity
//! score (estimated on a sampled key subset) and emits the value mean for the
//! rest. HiLo splits heads into a full-resolution group and a group that
//! attends over an average-pooled view of the token grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{xavier, BoundParams, Mat, ParamSet, Tape, VarId};
use crate::dataset::derive_seed;
use crate::error::{AxError, Result};

/// Head split, sparsity factor, and Lo-path pooling geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads_hi: usize,
    pub n_heads_lo: usize,
    /// ProbSparse factor c: u = min(L, ceil(c * ln L)) queries get full attention.
    pub probsparse_factor: f64,
    pub lo_pool_kernel: (usize, usize),
    pub lo_pool_stride: (usize, usize),
    /// Key subsampling stride in the Hi path (0 or 1 disables).
    pub hi_dilation: usize,
    /// Key subsampling stride in the Lo path (0 or 1 disables).
    pub lo_dilation: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_model: 16,
            n_heads_hi: 1,
            n_heads_lo: 1,
            probsparse_factor: 5.0,
            lo_pool_kernel: (2, 2),
            lo_pool_stride: (2, 2),
            hi_dilation: 1,
            lo_dilation: 1,
        }
    }
}

impl AttentionConfig {
    pub fn n_heads(&self) -> usize {
        self.n_heads_hi + self.n_heads_lo
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads() == 0 {
            return Err(AxError::InvalidConfig(
                "need at least one attention head".into(),
            ));
        }
        if self.d_model == 0 || self.d_model % self.n_heads() != 0 {
            return Err(AxError::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model,
                self.n_heads()
            )));
        }
        if !(self.probsparse_factor > 0.0) {
            return Err(AxError::InvalidConfig(
                "probsparse_factor must be positive".into(),
            ));
        }
        if self.lo_pool_kernel.0 == 0
            || self.lo_pool_kernel.1 == 0
            || self.lo_pool_stride.0 == 0
            || self.lo_pool_stride.1 == 0
        {
            return Err(AxError::InvalidConfig(
                "lo_pool kernel and stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Token sequence, optionally tiling a spectrogram grid (frequency-major:
/// row index = f * T + t).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Mat,
    pub grid_shape: Option<(usize, usize)>,
}

impl TokenGrid {
    pub fn new(tokens: Mat) -> Self {
        TokenGrid {
            tokens,
            grid_shape: None,
        }
    }

    pub fn with_grid(tokens: Mat, grid: (usize, usize)) -> Result<Self> {
        if grid.0 * grid.1 != tokens.nrows() {
            return Err(AxError::ShapeMismatch(format!(
                "grid {}x{} does not tile {} tokens",
                grid.0,
                grid.1,
                tokens.nrows()
            )));
        }
        Ok(TokenGrid {
            tokens,
            grid_shape: Some(grid),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Sinusoidal positional encodings:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, d_model: usize) -> Result<Mat> {
    if len == 0 {
        return Err(AxError::InvalidArgument("length must be positive".into()));
    }
    if d_model == 0 || d_model % 2 != 0 {
        return Err(AxError::InvalidArgument(format!(
            "d_model must be positive and even, got {d_model}"
        )));
    }
    let mut pe = Mat::zeros((len, d_model));
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let rate = (10000.0f64).powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

// ---------------------------------------------------------------------------
// Core attention on the tape
// ---------------------------------------------------------------------------

fn check_attention_shapes(q: &Mat, k: &Mat, v: &Mat, mask: Option<&Mat>) -> Result<()> {
    if q.ncols() != k.ncols() {
        return Err(AxError::ShapeMismatch(format!(
            "query dim {} vs key dim {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(AxError::ShapeMismatch(format!(
            "{} keys vs {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if let Some(m) = mask {
        if m.dim() != (q.nrows(), k.nrows()) {
            return Err(AxError::ShapeMismatch(format!(
                "mask {:?} vs attention {:?}",
                m.dim(),
                (q.nrows(), k.nrows())
            )));
        }
    }
    Ok(())
}

/// softmax(q k^T / sqrt(d) + mask) v on the tape.
pub fn attend_full(tape: &mut Tape, q: VarId, k: VarId, v: VarId, mask: Option<&Mat>) -> VarId {
    let d = tape.value(q).ncols() as f64;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let scores = match mask {
        Some(m) => tape.add_const(scores, m),
        None => scores,
    };
    let weights = tape.softmax_rows(scores);
    tape.matmul(weights, v)
}

/// ProbSparse attention on the tape. The top-u queries by sparsity score
/// (max minus mean over a sampled key subset) receive exact softmax attention
/// over all keys; the rest emit mean(v). Selection is deterministic in `seed`.
pub fn attend_probsparse(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    c_factor: f64,
    seed: u64,
) -> VarId {
    let l_q = tape.value(q).nrows();
    let l_k = tape.value(k).nrows();
    let d = tape.value(q).ncols();
    let scale = 1.0 / (d as f64).sqrt();

    let u = probsparse_budget(l_q, c_factor);
    let selected: Vec<usize> = if u >= l_q {
        (0..l_q).collect()
    } else {
        let sample = sample_key_indices(l_k, seed);
        let qv = tape.value(q);
        let kv = tape.value(k);
        let mut scored: Vec<(f64, usize)> = (0..l_q)
            .map(|i| {
                let mut max_s = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for &j in &sample {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += qv[[i, c]] * kv[[j, c]];
                    }
                    let s = dot * scale;
                    max_s = max_s.max(s);
                    sum += s;
                }
                (max_s - sum / sample.len() as f64, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut idx: Vec<usize> = scored[..u].iter().map(|&(_, i)| i).collect();
        idx.sort_unstable();
        idx
    };

    let q_sel = tape.gather_rows(q, selected.clone());
    let kt = tape.transpose(k);
    let scores = tape.matmul(q_sel, kt);
    let scores = tape.scale(scores, scale);
    let weights = tape.softmax_rows(scores);
    let out_sel = tape.matmul(weights, v);
    let fill = tape.mean_rows(v);
    tape.assemble_rows(l_q, selected, out_sel, fill)
}

/// u = min(L, max(1, ceil(c * ln L))).
pub fn probsparse_budget(l_q: usize, c_factor: f64) -> usize {
    let raw = (c_factor * (l_q as f64).ln()).ceil() as usize;
    raw.max(1).min(l_q)
}

/// ceil(5 ln L) keys sampled without replacement for score estimation.
fn sample_key_indices(l_k: usize, seed: u64) -> Vec<usize> {
    let m = ((5.0 * (l_k as f64).ln()).ceil() as usize).clamp(1, l_k);
    let mut idx: Vec<usize> = (0..l_k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..m {
        let j = rng.random_range(i..l_k);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

fn stride_indices(len: usize, dilation: usize) -> Option<Vec<usize>> {
    let step = dilation.max(1);
    if step == 1 {
        None
    } else {
        Some((0..len).step_by(step).collect())
    }
}

// ---------------------------------------------------------------------------
// Multi-head blocks
// ---------------------------------------------------------------------------

/// Parameter shapes for a multi-head full-attention block named `prefix`.
pub fn full_mha_shapes(prefix: &str, d_model: usize, n_heads: usize) -> Vec<(String, usize, usize)> {
    let dh = d_model / n_heads;
    let mut shapes = Vec::new();
    for h in 0..n_heads {
        for w in ["wq", "wk", "wv"] {
            shapes.push((format!("{prefix}.h{h}.{w}"), d_model, dh));
        }
    }
    shapes.push((format!("{prefix}.wo"), d_model, d_model));
    shapes.push((format!("{prefix}.bo"), 1, d_model));
    shapes
}

/// Multi-head full attention: query tokens `x_q`, key/value tokens `x_kv`.
pub fn multihead_full(
    tape: &mut Tape,
    x_q: VarId,
    x_kv: VarId,
    d_model: usize,
    n_heads: usize,
    bound: &BoundParams,
    prefix: &str,
    mask: Option<&Mat>,
) -> VarId {
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let wq = bound.id(&format!("{prefix}.h{h}.wq"));
        let wk = bound.id(&format!("{prefix}.h{h}.wk"));
        let wv = bound.id(&format!("{prefix}.h{h}.wv"));
        let q = tape.matmul(x_q, wq);
        let k = tape.matmul(x_kv, wk);
        let v = tape.matmul(x_kv, wv);
        heads.push(attend_full(tape, q, k, v, mask));
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    let _ = d_model;
    let proj = tape.matmul(cat, bound.id(&format!("{prefix}.wo")));
    tape.add_row(proj, bound.id(&format!("{prefix}.bo")))
}

/// Multi-head ProbSparse self-attention (keys optionally dilated).
pub fn multihead_probsparse(
    tape: &mut Tape,
    x: VarId,
    n_heads: usize,
    c_factor: f64,
    key_dilation: usize,
    bound: &BoundParams,
    prefix: &str,
    seed: u64,
) -> VarId {
    let l = tape.value(x).nrows();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let wq = bound.id(&format!("{prefix}.h{h}.wq"));
        let wk = bound.id(&format!("{prefix}.h{h}.wk"));
        let wv = bound.id(&format!("{prefix}.h{h}.wv"));
        let q = tape.matmul(x, wq);
        let mut k = tape.matmul(x, wk);
        let mut v = tape.matmul(x, wv);
        if let Some(idx) = stride_indices(l, key_dilation) {
            k = tape.gather_rows(k, idx.clone());
            v = tape.gather_rows(v, idx);
        }
        heads.push(attend_probsparse(
            tape,
            q,
            k,
            v,
            c_factor,
            derive_seed(seed, h as u64),
        ));
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    let proj = tape.matmul(cat, bound.id(&format!("{prefix}.wo")));
    tape.add_row(proj, bound.id(&format!("{prefix}.bo")))
}

// ---------------------------------------------------------------------------
// HiLo split-head attention
// ---------------------------------------------------------------------------

/// Parameter shapes for a HiLo block named `prefix`.
pub fn hilo_shapes(prefix: &str, cfg: &AttentionConfig) -> Vec<(String, usize, usize)> {
    let dh = cfg.head_dim();
    let mut shapes = Vec::new();
    for h in 0..cfg.n_heads_hi {
        for w in ["wq", "wk", "wv"] {
            shapes.push((format!("{prefix}.hi{h}.{w}"), cfg.d_model, dh));
        }
    }
    for h in 0..cfg.n_heads_lo {
        for w in ["wq", "wk", "wv"] {
            shapes.push((format!("{prefix}.lo{h}.{w}"), cfg.d_model, dh));
        }
    }
    shapes.push((format!("{prefix}.wo"), cfg.d_model, cfg.d_model));
    shapes.push((format!("{prefix}.bo"), 1, cfg.d_model));
    shapes
}

/// Average-pooling stencil over a frequency-major token grid. Returns the
/// pooling matrix and the pooled grid shape.
pub fn grid_pool_matrix(
    grid: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Mat, (usize, usize))> {
    let (f, t) = grid;
    let (kf, kt) = kernel;
    let (sf, st) = stride;
    if kf > f || kt > t {
        return Err(AxError::InvalidConfig(format!(
            "pool kernel ({kf},{kt}) exceeds token grid ({f},{t}); pooled grid is empty"
        )));
    }
    let fp = (f - kf) / sf + 1;
    let tp = (t - kt) / st + 1;
    let inv = 1.0 / (kf * kt) as f64;
    let mut p = Mat::zeros((fp * tp, f * t));
    for i in 0..fp {
        for j in 0..tp {
            let row = i * tp + j;
            for di in 0..kf {
                for dj in 0..kt {
                    let src = (i * sf + di) * t + (j * st + dj);
                    p[[row, src]] = inv;
                }
            }
        }
    }
    Ok((p, (fp, tp)))
}

/// Nearest-neighbour map from full-resolution grid cells to pooled cells.
pub fn grid_upsample_map(
    grid: (usize, usize),
    pooled: (usize, usize),
    stride: (usize, usize),
) -> Vec<usize> {
    let (f, t) = grid;
    let (fp, tp) = pooled;
    let (sf, st) = stride;
    let mut map = Vec::with_capacity(f * t);
    for i in 0..f {
        for j in 0..t {
            let pi = (i / sf).min(fp - 1);
            let pj = (j / st).min(tp - 1);
            map.push(pi * tp + pj);
        }
    }
    map
}

/// HiLo attention on the tape. Hi heads run ProbSparse at full resolution;
/// Lo heads pool the grid first and their outputs are upsampled back before
/// the concatenated head projection.
pub fn hilo_block(
    tape: &mut Tape,
    x: VarId,
    grid: (usize, usize),
    cfg: &AttentionConfig,
    bound: &BoundParams,
    prefix: &str,
    seed: u64,
) -> Result<VarId> {
    cfg.validate()?;
    let l = tape.value(x).nrows();
    if grid.0 * grid.1 != l {
        return Err(AxError::ShapeMismatch(format!(
            "grid {}x{} does not tile {l} tokens",
            grid.0, grid.1
        )));
    }

    let mut heads = Vec::with_capacity(cfg.n_heads());
    for h in 0..cfg.n_heads_hi {
        let wq = bound.id(&format!("{prefix}.hi{h}.wq"));
        let wk = bound.id(&format!("{prefix}.hi{h}.wk"));
        let wv = bound.id(&format!("{prefix}.hi{h}.wv"));
        let q = tape.matmul(x, wq);
        let mut k = tape.matmul(x, wk);
        let mut v = tape.matmul(x, wv);
        if let Some(idx) = stride_indices(l, cfg.hi_dilation) {
            k = tape.gather_rows(k, idx.clone());
            v = tape.gather_rows(v, idx);
        }
        heads.push(attend_probsparse(
            tape,
            q,
            k,
            v,
            cfg.probsparse_factor,
            derive_seed(seed, h as u64),
        ));
    }

    if cfg.n_heads_lo > 0 {
        let (pool, pooled_grid) = grid_pool_matrix(grid, cfg.lo_pool_kernel, cfg.lo_pool_stride)?;
        let xp = tape.linear_map_rows(x, &pool);
        let lp = pooled_grid.0 * pooled_grid.1;
        let up = grid_upsample_map(grid, pooled_grid, cfg.lo_pool_stride);
        for h in 0..cfg.n_heads_lo {
            let wq = bound.id(&format!("{prefix}.lo{h}.wq"));
            let wk = bound.id(&format!("{prefix}.lo{h}.wk"));
            let wv = bound.id(&format!("{prefix}.lo{h}.wv"));
            let q = tape.matmul(xp, wq);
            let mut k = tape.matmul(xp, wk);
            let mut v = tape.matmul(xp, wv);
            if let Some(idx) = stride_indices(lp, cfg.lo_dilation) {
                k = tape.gather_rows(k, idx.clone());
                v = tape.gather_rows(v, idx);
            }
            let pooled_out = attend_probsparse(
                tape,
                q,
                k,
                v,
                cfg.probsparse_factor,
                derive_seed(seed, 1000 + h as u64),
            );
            heads.push(tape.gather_rows(pooled_out, up.clone()));
        }
    }

    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    let proj = tape.matmul(cat, bound.id(&format!("{prefix}.wo")));
    Ok(tape.add_row(proj, bound.id(&format!("{prefix}.bo"))))
}

/// Initialize HiLo parameters under `prefix` into `params`.
pub fn init_hilo_params(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut impl Rng,
) {
    for (name, rows, cols) in hilo_shapes(prefix, cfg) {
        if name.ends_with(".bo") {
            params.insert(name, Mat::zeros((rows, cols)));
        } else {
            params.insert(name, xavier(rows, cols, rng));
        }
    }
}

// ---------------------------------------------------------------------------
// Forward-only public operations
// ---------------------------------------------------------------------------

/// Row-stochastic scaled-dot attention: softmax(q k^T / sqrt(d) + mask) v.
pub fn full_attention(q: &Mat, k: &Mat, v: &Mat, mask: Option<&Mat>) -> Result<Mat> {
    check_attention_shapes(q, k, v, mask)?;
    let mut tape = Tape::no_grad();
    let qi = tape.input(q.clone());
    let ki = tape.input(k.clone());
    let vi = tape.input(v.clone());
    let out = attend_full(&mut tape, qi, ki, vi, mask);
    Ok(tape.value(out).clone())
}

/// ProbSparse attention; deterministic in `seed` (key subsampling).
pub fn probsparse_attention(q: &Mat, k: &Mat, v: &Mat, c_factor: f64, seed: u64) -> Result<Mat> {
    check_attention_shapes(q, k, v, None)?;
    if !(c_factor > 0.0) {
        return Err(AxError::InvalidArgument(
            "probsparse factor must be positive".into(),
        ));
    }
    let mut tape = Tape::no_grad();
    let qi = tape.input(q.clone());
    let ki = tape.input(k.clone());
    let vi = tape.input(v.clone());
    let out = attend_probsparse(&mut tape, qi, ki, vi, c_factor, seed);
    Ok(tape.value(out).clone())
}

/// HiLo attention over a token grid using parameters named `hilo.*`.
pub fn hilo_attention(grid: &TokenGrid, cfg: &AttentionConfig, params: &ParamSet) -> Result<TokenGrid> {
    let shape = grid.grid_shape.ok_or_else(|| {
        AxError::InvalidArgument("hilo_attention requires a token grid shape".into())
    })?;
    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape);
    let x = tape.input(grid.tokens.clone());
    let out = hilo_block(&mut tape, x, shape, cfg, &bound, "hilo", 0)?;
    TokenGrid::with_grid(tape.value(out).clone(), shape)
}
