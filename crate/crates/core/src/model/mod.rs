//! The two forecaster architectures.
//!
//! The time-domain variant lifts the raw signal through convolutional
//! embedding (ELT), runs a ProbSparse self-attention encoder with
//! conv-distilling blocks that halve the sequence per layer, and decodes with
//! a vanilla masked transformer decoder into a Gaussian head. The spectral
//! variant tokenizes the STFT grid, encodes with HiLo split-head attention,
//! conditions the decoder on test features and a reference-signal template,
//! applies learned global frequency gains, and parameterizes the output
//! distribution with an exponential prior on the variance.

pub mod checkpoint;
pub mod forecast;
pub mod window;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    hilo_block, hilo_shapes, multihead_full, multihead_probsparse,
    positional_encoding, AttentionConfig, TokenGrid,
};
use crate::autodiff::{
    conv_map, grid_conv_map, xavier, BoundParams, Mat, PadMode, ParamSet, Tape, VarId,
    NEG_INF_MASK,
};
use crate::dataset::{derive_seed, TestCondition};
use crate::error::{AxError, Result};
use crate::spectral::{Spectrogram, WindowKind};

pub use checkpoint::ModelCheckpoint;
pub use forecast::{forecast, ForecastResult};
pub use window::{build_window, min_window_samples, spec_to_slab, WindowSlabs};

pub const LAMBDA_FLOOR: f64 = 1e-6;
const LAMBDA_PRE_CEIL: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Time-domain forecaster (per-sample steps).
    Sf,
    /// Spectral forecaster (per-frame steps on the STFT grid).
    Ssf,
}

impl ModelVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sf" => Ok(ModelVariant::Sf),
            "ssf" => Ok(ModelVariant::Ssf),
            other => Err(AxError::InvalidArgument(format!(
                "unknown variant '{other}' (expected sf or ssf)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Sf => "sf",
            ModelVariant::Ssf => "ssf",
        }
    }
}

/// Architecture configuration shared by both variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub n_encoder_layers: usize,
    pub attention: AttentionConfig,
    /// Kernel of the frequency-independent ELT convolutions (odd).
    pub elt_kernel: usize,
    /// STFT frame length = freq_resolution * time_resolution.
    pub freq_resolution: usize,
    /// STFT hop in samples.
    pub time_resolution: usize,
    /// Kernel of the causal mean-head convolution (odd).
    pub mean_kernel: usize,
    /// Kernel of the causal variance-head convolution (odd).
    pub variance_kernel: usize,
    pub dropout: f64,
    pub use_positional_encoding: bool,
    /// Std of white noise added to decoder inputs during training (time model).
    pub noise_std: f64,
    /// Frames folded into one model step in the spectral model.
    pub time_compression: usize,
    /// Encoder window in model steps (samples or compressed frames).
    pub src_len: usize,
    /// Prediction window in model steps.
    pub tgt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::Ssf,
            n_encoder_layers: 2,
            attention: AttentionConfig::default(),
            elt_kernel: 5,
            freq_resolution: 2,
            time_resolution: 16,
            mean_kernel: 5,
            variance_kernel: 5,
            dropout: 0.1,
            use_positional_encoding: true,
            noise_std: 0.05,
            time_compression: 1,
            src_len: 24,
            tgt_len: 8,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn stft_frame_len(&self) -> usize {
        self.freq_resolution * self.time_resolution
    }

    pub fn stft_hop(&self) -> usize {
        self.time_resolution
    }

    pub fn stft_window(&self) -> WindowKind {
        WindowKind::Hann
    }

    /// One-sided bin count of the model's STFT geometry.
    pub fn n_bins(&self) -> usize {
        self.stft_frame_len() / 2 + 1
    }

    /// Raw channels per token cell.
    pub fn channels(&self) -> usize {
        match self.variant {
            ModelVariant::Sf => 1,
            ModelVariant::Ssf => 2 * self.time_compression,
        }
    }

    /// Decoder warm-start context in model steps.
    pub fn label_len(&self) -> usize {
        (self.src_len / 2).max(1)
    }

    /// Samples covered by one predicted step.
    pub fn step_samples(&self) -> usize {
        match self.variant {
            ModelVariant::Sf => 1,
            ModelVariant::Ssf => self.stft_hop() * self.time_compression,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        for (name, k) in [
            ("elt_kernel", self.elt_kernel),
            ("mean_kernel", self.mean_kernel),
            ("variance_kernel", self.variance_kernel),
        ] {
            if k < 3 || k % 2 == 0 {
                return Err(AxError::InvalidConfig(format!(
                    "{name} must be odd and >= 3, got {k}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AxError::InvalidConfig(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if self.noise_std < 0.0 {
            return Err(AxError::InvalidConfig("noise_std must be >= 0".into()));
        }
        if self.n_encoder_layers == 0
            || self.freq_resolution == 0
            || self.time_resolution == 0
            || self.time_compression == 0
            || self.src_len == 0
            || self.tgt_len == 0
        {
            return Err(AxError::InvalidConfig(
                "layer count, resolutions, compression, and windows must be positive".into(),
            ));
        }
        if self.d_model() % 2 != 0 {
            return Err(AxError::InvalidConfig(
                "d_model must be even for sinusoidal encodings".into(),
            ));
        }
        match self.variant {
            ModelVariant::Sf => {
                // Distilling must leave at least one token.
                if (self.src_len >> self.n_encoder_layers) == 0 {
                    return Err(AxError::InvalidConfig(format!(
                        "{} encoder layers exhaust a source window of {} steps",
                        self.n_encoder_layers, self.src_len
                    )));
                }
            }
            ModelVariant::Ssf => {
                if self.label_len() < 1 || self.tgt_len < 1 {
                    return Err(AxError::InvalidConfig("empty decoder window".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-element predictive parameters of the stochastic head: mean `mu` and a
/// positive `lam` that is the exponential rate on the variance (spectral
/// model) or the Gaussian precision 1/sigma^2 (time model).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveParams {
    pub mu: Mat,
    pub lam: Mat,
    pub grid_shape: Option<(usize, usize)>,
}

impl PredictiveParams {
    pub fn validate(&self) -> Result<()> {
        if self.mu.dim() != self.lam.dim() {
            return Err(AxError::ShapeMismatch(format!(
                "mu {:?} vs lam {:?}",
                self.mu.dim(),
                self.lam.dim()
            )));
        }
        if !self.mu.iter().all(|v| v.is_finite()) {
            return Err(AxError::Numerical("non-finite mu".into()));
        }
        if !self.lam.iter().all(|&v| v.is_finite() && v > 0.0) {
            return Err(AxError::Numerical("lam must be positive".into()));
        }
        Ok(())
    }

    /// Predictive variance estimate per element.
    pub fn variance(&self) -> Mat {
        self.lam.mapv(|l| 1.0 / l)
    }
}

/// Decoder-side conditioning: test-condition features plus an optional
/// reference spectrogram template.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub feature_embedding: Vec<f64>,
    pub reference_spec: Option<Spectrogram>,
}

impl ConditioningBundle {
    pub fn from_condition(condition: &TestCondition) -> Self {
        ConditioningBundle {
            feature_embedding: condition.feature_vector(),
            reference_spec: None,
        }
    }

    pub fn with_reference(mut self, spec: Spectrogram) -> Self {
        self.reference_spec = Some(spec);
        self
    }
}

// ---------------------------------------------------------------------------
// Model: config + parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zero,
    One,
    Const(f64),
}

/// A configured model with its named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Build a model with deterministic seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, rows, cols, init) in param_inventory(&cfg) {
            let m = match init {
                Init::Xavier => xavier(rows, cols, &mut rng),
                Init::Zero => Mat::zeros((rows, cols)),
                Init::One => Mat::from_elem((rows, cols), 1.0),
                Init::Const(c) => Mat::from_elem((rows, cols), c),
            };
            params.insert(name, m);
        }
        Ok(Model { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let expected = param_inventory(&cfg);
        if expected.len() != params.len() {
            return Err(AxError::ConfigMismatch(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, rows, cols, _) in &expected {
            match params.get(name) {
                Some(m) if m.dim() == (*rows, *cols) => {}
                Some(m) => {
                    return Err(AxError::ConfigMismatch(format!(
                        "parameter '{name}' has shape {:?}, expected ({rows},{cols})",
                        m.dim()
                    )))
                }
                None => {
                    return Err(AxError::ConfigMismatch(format!(
                        "missing parameter '{name}'"
                    )))
                }
            }
        }
        Ok(Model { cfg, params })
    }
}

fn mha_shapes_into(
    out: &mut Vec<(String, usize, usize, Init)>,
    prefix: &str,
    d_model: usize,
    n_heads: usize,
) {
    let dh = d_model / n_heads;
    for h in 0..n_heads {
        for w in ["wq", "wk", "wv"] {
            out.push((format!("{prefix}.h{h}.{w}"), d_model, dh, Init::Xavier));
        }
    }
    out.push((format!("{prefix}.wo"), d_model, d_model, Init::Xavier));
    out.push((format!("{prefix}.bo"), 1, d_model, Init::Zero));
}

fn ln_shapes_into(out: &mut Vec<(String, usize, usize, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), 1, d, Init::One));
    out.push((format!("{prefix}.b"), 1, d, Init::Zero));
}

/// Complete, ordered parameter inventory for a config.
fn param_inventory(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_model();
    let c_in = cfg.channels();
    let k = cfg.elt_kernel;
    let heads = cfg.attention.n_heads();
    let mut out = Vec::new();

    out.push(("elt.c1.w".into(), k * c_in, d, Init::Xavier));
    out.push(("elt.c1.b".into(), 1, d, Init::Zero));
    out.push(("elt.c2.w".into(), k * d, d, Init::Xavier));
    out.push(("elt.c2.b".into(), 1, d, Init::Zero));
    out.push(("cond.w".into(), TestCondition::FEATURE_DIM, d, Init::Xavier));
    out.push(("cond.b".into(), 1, d, Init::Zero));

    for i in 0..cfg.n_encoder_layers {
        match cfg.variant {
            ModelVariant::Sf => {
                ln_shapes_into(&mut out, &format!("enc{i}.ln"), d);
                mha_shapes_into(&mut out, &format!("enc{i}.attn"), d, heads);
                out.push((format!("enc{i}.down.w"), 3 * d, d, Init::Xavier));
                out.push((format!("enc{i}.down.b"), 1, d, Init::Zero));
                out.push((format!("enc{i}.up.w"), 3 * d, d, Init::Xavier));
                out.push((format!("enc{i}.up.b"), 1, d, Init::Zero));
                out.push((format!("enc{i}.merge.w"), 3 * 2 * d, d, Init::Xavier));
                out.push((format!("enc{i}.merge.b"), 1, d, Init::Zero));
            }
            ModelVariant::Ssf => {
                ln_shapes_into(&mut out, &format!("enc{i}.ln1"), d);
                for (name, rows, cols) in hilo_shapes(&format!("enc{i}.attn"), &cfg.attention) {
                    let init = if name.ends_with(".bo") {
                        Init::Zero
                    } else {
                        Init::Xavier
                    };
                    out.push((name, rows, cols, init));
                }
                ln_shapes_into(&mut out, &format!("enc{i}.ln2"), d);
                out.push((format!("enc{i}.ffn.w1"), d, 2 * d, Init::Xavier));
                out.push((format!("enc{i}.ffn.b1"), 1, 2 * d, Init::Zero));
                out.push((format!("enc{i}.ffn.w2"), 2 * d, d, Init::Xavier));
                out.push((format!("enc{i}.ffn.b2"), 1, d, Init::Zero));
            }
        }
    }

    ln_shapes_into(&mut out, "dec.ln1", d);
    mha_shapes_into(&mut out, "dec.self", d, heads);
    ln_shapes_into(&mut out, "dec.ln2", d);
    mha_shapes_into(&mut out, "dec.cross", d, heads);
    ln_shapes_into(&mut out, "dec.ln3", d);
    out.push(("dec.ffn.w1".into(), d, 2 * d, Init::Xavier));
    out.push(("dec.ffn.b1".into(), 1, 2 * d, Init::Zero));
    out.push(("dec.ffn.w2".into(), 2 * d, d, Init::Xavier));
    out.push(("dec.ffn.b2".into(), 1, d, Init::Zero));

    if cfg.variant == ModelVariant::Ssf {
        out.push(("dec.feat.w".into(), TestCondition::FEATURE_DIM, d, Init::Xavier));
        out.push(("dec.feat.b".into(), 1, d, Init::Zero));
        out.push(("dec.ref.w".into(), c_in, d, Init::Xavier));
        // Raw gains start in the pass-band (sigmoid(2) ~ 0.88).
        out.push(("dec.freqgain".into(), cfg.n_bins(), 1, Init::Const(2.0)));
    }

    out.push(("head.mean.w".into(), cfg.mean_kernel * d, c_in, Init::Xavier));
    out.push(("head.mean.b".into(), 1, c_in, Init::Zero));
    out.push(("head.var.w".into(), cfg.variance_kernel * d, c_in, Init::Xavier));
    out.push(("head.var.b".into(), 1, c_in, Init::Zero));
    out
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Forward-pass context: dropout masks and probsparse seeds come from here so
/// that training steps are reproducible and evaluation is deterministic.
pub(crate) struct PassCtx {
    pub rng: Option<ChaCha8Rng>,
    pub dropout: f64,
    pub seed: u64,
}

impl PassCtx {
    pub fn eval(seed: u64) -> Self {
        PassCtx {
            rng: None,
            dropout: 0.0,
            seed,
        }
    }

    pub fn train(seed: u64, dropout: f64) -> Self {
        PassCtx {
            rng: Some(ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD0))),
            dropout,
            seed,
        }
    }

    fn apply_dropout(&mut self, tape: &mut Tape, x: VarId) -> VarId {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if self.dropout <= 0.0 {
            return x;
        }
        let p = self.dropout;
        let keep = 1.0 - p;
        let dim = tape.value(x).dim();
        let mut mask = Mat::zeros(dim);
        use rand::Rng;
        for v in mask.iter_mut() {
            *v = if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep };
        }
        tape.mul_const(x, &mask)
    }
}

/// Causal mask over decoder steps; for grid tokens the step is the time
/// coordinate, so same-step cross-frequency attention stays allowed.
fn causal_mask(steps: usize, grid: Option<(usize, usize)>) -> Mat {
    match grid {
        None => {
            let mut m = Mat::zeros((steps, steps));
            for i in 0..steps {
                for j in (i + 1)..steps {
                    m[[i, j]] = NEG_INF_MASK;
                }
            }
            m
        }
        Some((f_bins, t)) => {
            let l = f_bins * t;
            let mut m = Mat::zeros((l, l));
            for a in 0..l {
                let ta = a % t;
                for b in 0..l {
                    if b % t > ta {
                        m[[a, b]] = NEG_INF_MASK;
                    }
                }
            }
            m
        }
    }
}

/// ELT embedding: stacked same-padded 1-D convolutions lift the raw channels
/// to d_model, the condition embedding is added, positional encodings follow.
pub(crate) fn elt_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &BoundParams,
    slab: VarId,
    grid: Option<(usize, usize)>,
    cond_features: VarId,
    with_pe: bool,
) -> VarId {
    let k = cfg.elt_kernel;
    let rows = tape.value(slab).nrows();
    let map = match grid {
        None => conv_map(rows, k, 1, PadMode::Same),
        Some((f, t)) => grid_conv_map(f, t, k, PadMode::Same),
    };
    let u1 = tape.unfold_rows(slab, &map);
    let h = tape.matmul(u1, bound.id("elt.c1.w"));
    let h = tape.add_row(h, bound.id("elt.c1.b"));
    let h = tape.gelu(h);
    let u2 = tape.unfold_rows(h, &map);
    let h = tape.matmul(u2, bound.id("elt.c2.w"));
    let h = tape.add_row(h, bound.id("elt.c2.b"));

    let cond = tape.matmul(cond_features, bound.id("cond.w"));
    let cond = tape.add_row(cond, bound.id("cond.b"));
    let mut tokens = tape.add_row(h, cond);

    if with_pe {
        let pe = positional_encoding(rows, cfg.d_model()).expect("even d_model");
        tokens = tape.add_const(tokens, &pe);
    }
    tokens
}

/// One ProbSparse + distilling encoder stack (time model). Each layer halves
/// the token count; the memory ends at ceil(L / 2^layers).
pub(crate) fn encode_sf_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &BoundParams,
    tokens: VarId,
    ctx: &mut PassCtx,
) -> VarId {
    let heads = cfg.attention.n_heads();
    let mut x = tokens;
    for i in 0..cfg.n_encoder_layers {
        let p = format!("enc{i}");
        let normed = tape.layer_norm(x, bound.id(&format!("{p}.ln.g")), bound.id(&format!("{p}.ln.b")));
        let attn = multihead_probsparse(
            tape,
            normed,
            heads,
            cfg.attention.probsparse_factor,
            cfg.attention.hi_dilation,
            bound,
            &format!("{p}.attn"),
            derive_seed(ctx.seed, 10 + i as u64),
        );
        let attn = ctx.apply_dropout(tape, attn);
        let a = tape.add(x, attn);

        // Distilling: down-sample/up-sample branch, concat with the residual
        // copy, merge convolution, then max-pool halving the sequence.
        let l = tape.value(a).nrows();
        let down_map = conv_map(l, 3, 2, PadMode::Same);
        let u = tape.unfold_rows(a, &down_map);
        let dconv = tape.matmul(u, bound.id(&format!("{p}.down.w")));
        let dconv = tape.add_row(dconv, bound.id(&format!("{p}.down.b")));
        let dconv = tape.gelu(dconv);

        let down_rows = tape.value(dconv).nrows();
        let up_map: Vec<usize> = (0..l).map(|r| (r / 2).min(down_rows - 1)).collect();
        let up = tape.gather_rows(dconv, up_map);
        let up_conv_map = conv_map(l, 3, 1, PadMode::Same);
        let u = tape.unfold_rows(up, &up_conv_map);
        let uconv = tape.matmul(u, bound.id(&format!("{p}.up.w")));
        let uconv = tape.add_row(uconv, bound.id(&format!("{p}.up.b")));
        let uconv = tape.gelu(uconv);

        let cat = tape.concat_cols(&[a, uconv]);
        let merge_map = conv_map(l, 3, 1, PadMode::Same);
        let u = tape.unfold_rows(cat, &merge_map);
        let m = tape.matmul(u, bound.id(&format!("{p}.merge.w")));
        let m = tape.add_row(m, bound.id(&format!("{p}.merge.b")));
        let m = tape.gelu(m);
        x = tape.maxpool_rows(m, 3, 2, 1);
    }
    x
}

/// HiLo encoder stack (spectral model); token count is preserved.
pub(crate) fn encode_ssf_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &BoundParams,
    tokens: VarId,
    grid: (usize, usize),
    ctx: &mut PassCtx,
) -> Result<VarId> {
    let mut x = tokens;
    for i in 0..cfg.n_encoder_layers {
        let p = format!("enc{i}");
        let normed = tape.layer_norm(
            x,
            bound.id(&format!("{p}.ln1.g")),
            bound.id(&format!("{p}.ln1.b")),
        );
        let attn = hilo_block(
            tape,
            normed,
            grid,
            &cfg.attention,
            bound,
            &format!("{p}.attn"),
            derive_seed(ctx.seed, 20 + i as u64),
        )?;
        let attn = ctx.apply_dropout(tape, attn);
        x = tape.add(x, attn);

        let normed = tape.layer_norm(
            x,
            bound.id(&format!("{p}.ln2.g")),
            bound.id(&format!("{p}.ln2.b")),
        );
        let h = tape.matmul(normed, bound.id(&format!("{p}.ffn.w1")));
        let h = tape.add_row(h, bound.id(&format!("{p}.ffn.b1")));
        let h = tape.gelu(h);
        let h = tape.matmul(h, bound.id(&format!("{p}.ffn.w2")));
        let h = tape.add_row(h, bound.id(&format!("{p}.ffn.b2")));
        let h = ctx.apply_dropout(tape, h);
        x = tape.add(x, h);
    }
    Ok(x)
}

/// Learned per-frequency gains squashed to [0,1] scale every token in the
/// matching frequency row.
pub(crate) fn frequency_filter_tape(
    tape: &mut Tape,
    tokens: VarId,
    gains_raw: VarId,
    grid: (usize, usize),
) -> VarId {
    let (f_bins, t) = grid;
    let g = tape.sigmoid(gains_raw);
    let expand: Vec<usize> = (0..f_bins * t).map(|row| row / t).collect();
    let g_rows = tape.gather_rows(g, expand);
    tape.scale_rows(tokens, g_rows)
}

pub(crate) struct DecodeOut {
    pub mu: VarId,
    /// Positive head output: exponential rate (spectral) or variance (time).
    pub positive: VarId,
}

/// Two-step decoder. Step one is the vanilla masked decoder; step two (the
/// spectral model) injects condition features and the projected reference
/// template, applies the frequency filter, and runs the causal output convs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decode_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &BoundParams,
    memory: VarId,
    dec_tokens: VarId,
    dec_grid: Option<(usize, usize)>,
    cond_features: VarId,
    reference_slab: Option<&Mat>,
    ctx: &mut PassCtx,
) -> DecodeOut {
    let d = cfg.d_model();
    let heads = cfg.attention.n_heads();
    let steps = match dec_grid {
        None => tape.value(dec_tokens).nrows(),
        Some((_, t)) => t,
    };
    let mask = causal_mask(steps, dec_grid);

    let normed = tape.layer_norm(dec_tokens, bound.id("dec.ln1.g"), bound.id("dec.ln1.b"));
    let sa = multihead_full(tape, normed, normed, d, heads, bound, "dec.self", Some(&mask));
    let sa = ctx.apply_dropout(tape, sa);
    let mut x = tape.add(dec_tokens, sa);

    let normed = tape.layer_norm(x, bound.id("dec.ln2.g"), bound.id("dec.ln2.b"));
    let ca = multihead_full(tape, normed, memory, d, heads, bound, "dec.cross", None);
    let ca = ctx.apply_dropout(tape, ca);
    x = tape.add(x, ca);

    let normed = tape.layer_norm(x, bound.id("dec.ln3.g"), bound.id("dec.ln3.b"));
    let h = tape.matmul(normed, bound.id("dec.ffn.w1"));
    let h = tape.add_row(h, bound.id("dec.ffn.b1"));
    let h = tape.gelu(h);
    let h = tape.matmul(h, bound.id("dec.ffn.w2"));
    let h = tape.add_row(h, bound.id("dec.ffn.b2"));
    let h = ctx.apply_dropout(tape, h);
    x = tape.add(x, h);

    if cfg.variant == ModelVariant::Ssf {
        let feat = tape.matmul(cond_features, bound.id("dec.feat.w"));
        let feat = tape.add_row(feat, bound.id("dec.feat.b"));
        x = tape.add_row(x, feat);
        if let Some(slab) = reference_slab {
            let ref_in = tape.input(slab.clone());
            let proj = tape.matmul(ref_in, bound.id("dec.ref.w"));
            x = tape.add(x, proj);
        }
        let grid = dec_grid.expect("spectral decoder tokens carry a grid");
        x = frequency_filter_tape(tape, x, bound.id("dec.freqgain"), grid);
    }

    let map = match dec_grid {
        None => conv_map(tape.value(x).nrows(), cfg.mean_kernel, 1, PadMode::Causal),
        Some((f, t)) => grid_conv_map(f, t, cfg.mean_kernel, PadMode::Causal),
    };
    let u = tape.unfold_rows(x, &map);
    let mu = tape.matmul(u, bound.id("head.mean.w"));
    let mu = tape.add_row(mu, bound.id("head.mean.b"));

    let vmap = match dec_grid {
        None => conv_map(tape.value(x).nrows(), cfg.variance_kernel, 1, PadMode::Causal),
        Some((f, t)) => grid_conv_map(f, t, cfg.variance_kernel, PadMode::Causal),
    };
    let u = tape.unfold_rows(x, &vmap);
    let raw = tape.matmul(u, bound.id("head.var.w"));
    let raw = tape.add_row(raw, bound.id("head.var.b"));
    let positive = match cfg.variant {
        // Exponential rate lambda = exp(raw): multiplicative updates let the
        // rate sweep orders of magnitude within a training budget.
        ModelVariant::Ssf => {
            let capped = tape.min_scalar(raw, LAMBDA_PRE_CEIL);
            let e = tape.exp(capped);
            tape.add_scalar(e, LAMBDA_FLOOR)
        }
        // Direct variance sigma^2 = softplus(raw): decays exponentially fast
        // toward the floor when the data demands confidence.
        ModelVariant::Sf => {
            let sp = tape.softplus(raw);
            tape.add_scalar(sp, LAMBDA_FLOOR)
        }
    };
    DecodeOut { mu, positive }
}

/// Reparameterized draw on the tape: sigma^2 = -ln(1-u)/lambda, z = mu +
/// sqrt(sigma^2) * eps, differentiable in mu and lambda for fixed (u, eps).
pub(crate) fn sample_head_tape(
    tape: &mut Tape,
    mu: VarId,
    lam: VarId,
    u: &Mat,
    eps: &Mat,
) -> VarId {
    let neg_ln = u.mapv(|ui| -(1.0 - ui).ln());
    let inv_lam = tape.recip(lam);
    let sigma2 = tape.mul_const(inv_lam, &neg_ln);
    let sigma = tape.sqrt(sigma2);
    let noise = tape.mul_const(sigma, eps);
    tape.add(mu, noise)
}

/// Gaussian draw for the direct-variance head: z = mu + sqrt(var) * eps.
pub(crate) fn sample_gaussian_tape(tape: &mut Tape, mu: VarId, var: VarId, eps: &Mat) -> VarId {
    let sigma = tape.sqrt(var);
    let noise = tape.mul_const(sigma, eps);
    tape.add(mu, noise)
}

// ---------------------------------------------------------------------------
// Public forward-only operations
// ---------------------------------------------------------------------------

/// Embedding input: a raw 1-D window or a spectrogram slab (frequency-major,
/// `[F*S, channels]`).
pub enum EltInput<'a> {
    Signal(&'a [f64]),
    Slab { slab: &'a Mat, grid: (usize, usize) },
}

/// ELT embedding of a window under `condition`.
pub fn elt_embed(
    input: EltInput<'_>,
    condition: &TestCondition,
    cfg: &ModelConfig,
    params: &ParamSet,
) -> Result<TokenGrid> {
    cfg.validate()?;
    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape);
    let (slab, grid) = match input {
        EltInput::Signal(xs) => {
            if xs.is_empty() {
                return Err(AxError::InvalidArgument("empty input window".into()));
            }
            (
                Mat::from_shape_vec((xs.len(), 1), xs.to_vec()).expect("column"),
                None,
            )
        }
        EltInput::Slab { slab, grid } => {
            if slab.nrows() != grid.0 * grid.1 {
                return Err(AxError::ShapeMismatch(format!(
                    "slab rows {} vs grid {:?}",
                    slab.nrows(),
                    grid
                )));
            }
            if slab.ncols() != cfg.channels() {
                return Err(AxError::ShapeMismatch(format!(
                    "slab channels {} vs config {}",
                    slab.ncols(),
                    cfg.channels()
                )));
            }
            (slab.clone(), Some(grid))
        }
    };
    let slab_id = tape.input(slab);
    let cond = tape.input(Mat::from_shape_vec(
        (1, TestCondition::FEATURE_DIM),
        condition.feature_vector(),
    )
    .expect("feature row"));
    let tokens = elt_tape(
        &mut tape,
        cfg,
        &bound,
        slab_id,
        grid,
        cond,
        cfg.use_positional_encoding,
    );
    let out = tape.value(tokens).clone();
    match grid {
        Some(g) => TokenGrid::with_grid(out, g),
        None => Ok(TokenGrid::new(out)),
    }
}

/// ProbSparse distilling encoder (time model): memory length is
/// ceil(L / 2^layers).
pub fn encode_sf(tokens: &TokenGrid, cfg: &ModelConfig, params: &ParamSet) -> Result<TokenGrid> {
    if cfg.variant != ModelVariant::Sf {
        return Err(AxError::ConfigMismatch("encode_sf needs the sf variant".into()));
    }
    if tokens.len() >> cfg.n_encoder_layers == 0 {
        return Err(AxError::InvalidConfig(format!(
            "{} layers of pooling exhaust {} tokens",
            cfg.n_encoder_layers,
            tokens.len()
        )));
    }
    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape);
    let x = tape.input(tokens.tokens.clone());
    let mut ctx = PassCtx::eval(0);
    let mem = encode_sf_tape(&mut tape, cfg, &bound, x, &mut ctx);
    Ok(TokenGrid::new(tape.value(mem).clone()))
}

/// HiLo encoder (spectral model): token count preserved.
pub fn encode_ssf(tokens: &TokenGrid, cfg: &ModelConfig, params: &ParamSet) -> Result<TokenGrid> {
    if cfg.variant != ModelVariant::Ssf {
        return Err(AxError::ConfigMismatch("encode_ssf needs the ssf variant".into()));
    }
    let grid = tokens.grid_shape.ok_or_else(|| {
        AxError::InvalidArgument("spectral encoder tokens need a grid shape".into())
    })?;
    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape);
    let x = tape.input(tokens.tokens.clone());
    let mut ctx = PassCtx::eval(0);
    let mem = encode_ssf_tape(&mut tape, cfg, &bound, x, grid, &mut ctx)?;
    TokenGrid::with_grid(tape.value(mem).clone(), grid)
}

/// Decoder head: masked self-attention over the embedded target prefix,
/// cross-attention to the memory, conditioning and frequency filtering
/// (spectral model), then the causal mean/variance convolutions.
pub fn decode(
    memory: &TokenGrid,
    target_prefix: &TokenGrid,
    bundle: &ConditioningBundle,
    cfg: &ModelConfig,
    params: &ParamSet,
) -> Result<PredictiveParams> {
    cfg.validate()?;
    let reference_slab = match (&bundle.reference_spec, cfg.variant) {
        (Some(spec), ModelVariant::Ssf) => {
            let grid = target_prefix
                .grid_shape
                .ok_or_else(|| AxError::InvalidArgument("decoder tokens need a grid".into()))?;
            if spec.n_bins() != grid.0 {
                return Err(AxError::ShapeMismatch(format!(
                    "reference has {} bins, decoder grid {}",
                    spec.n_bins(),
                    grid.0
                )));
            }
            if spec.n_frames() < grid.1 * cfg.time_compression {
                return Err(AxError::ShapeMismatch(format!(
                    "reference has {} frames, decoder needs {}",
                    spec.n_frames(),
                    grid.1 * cfg.time_compression
                )));
            }
            Some(spec_to_slab(spec, 0, grid.1, cfg.time_compression))
        }
        _ => None,
    };

    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape);
    let mem = tape.input(memory.tokens.clone());
    let dec = tape.input(target_prefix.tokens.clone());
    let cond = tape.input(
        Mat::from_shape_vec(
            (1, TestCondition::FEATURE_DIM),
            bundle.feature_embedding.clone(),
        )
        .map_err(|e| AxError::ShapeMismatch(e.to_string()))?,
    );
    let mut ctx = PassCtx::eval(0);
    let out = decode_tape(
        &mut tape,
        cfg,
        &bound,
        mem,
        dec,
        target_prefix.grid_shape,
        cond,
        reference_slab.as_ref(),
        &mut ctx,
    );
    let mu = tape.value(out.mu).clone();
    let positive = tape.value(out.positive).clone();
    let lam = match cfg.variant {
        ModelVariant::Ssf => positive,
        ModelVariant::Sf => positive.mapv(|v| 1.0 / v),
    };
    let params_out = PredictiveParams {
        mu,
        lam,
        grid_shape: target_prefix.grid_shape,
    };
    params_out.validate()?;
    Ok(params_out)
}

/// Learned global frequency gains: squash to [0,1] and scale each frequency
/// row of the token grid.
pub fn frequency_filter(tokens: &TokenGrid, gains_raw: &Mat) -> Result<TokenGrid> {
    let grid = tokens.grid_shape.ok_or_else(|| {
        AxError::InvalidArgument("frequency_filter needs a token grid shape".into())
    })?;
    if gains_raw.dim() != (grid.0, 1) {
        return Err(AxError::ShapeMismatch(format!(
            "gains {:?} vs {} frequency rows",
            gains_raw.dim(),
            grid.0
        )));
    }
    let mut tape = Tape::no_grad();
    let x = tape.input(tokens.tokens.clone());
    let g = tape.input(gains_raw.clone());
    let out = frequency_filter_tape(&mut tape, x, g, grid);
    TokenGrid::with_grid(tape.value(out).clone(), grid)
}

/// Inverse-transform sampling of the variance plus the reparameterization
/// trick: sigma^2 = -(1/lam) ln(1-u), z = mu + sqrt(sigma^2) * eps.
pub fn sample_head(params: &PredictiveParams, u: &Mat, eps: &Mat) -> Result<Mat> {
    params.validate()?;
    if u.dim() != params.mu.dim() || eps.dim() != params.mu.dim() {
        return Err(AxError::ShapeMismatch(format!(
            "draw shapes {:?}/{:?} vs params {:?}",
            u.dim(),
            eps.dim(),
            params.mu.dim()
        )));
    }
    if u.iter().any(|&v| !(0.0..1.0).contains(&v)) {
        return Err(AxError::InvalidArgument(
            "uniform draws must lie in [0, 1)".into(),
        ));
    }
    let mut z = params.mu.clone();
    for ((zv, (&lv, &uv)), &ev) in z
        .iter_mut()
        .zip(params.lam.iter().zip(u.iter()))
        .zip(eps.iter())
    {
        let sigma2 = -(1.0 - uv).ln() / lv;
        *zv += sigma2.sqrt() * ev;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::randn;
    use crate::dataset::{FlawLevel, Rotation, SensorOrientation, SensorSide};
    use rand::SeedableRng;

    fn condition() -> TestCondition {
        TestCondition::new(
            FlawLevel::D1,
            4.0,
            20.0,
            Rotation::Clockwise,
            SensorSide::Lhs,
            SensorOrientation::Vertical,
        )
    }

    fn sf_config() -> ModelConfig {
        ModelConfig {
            variant: ModelVariant::Sf,
            n_encoder_layers: 1,
            attention: AttentionConfig {
                d_model: 8,
                n_heads_hi: 2,
                n_heads_lo: 0,
                ..AttentionConfig::default()
            },
            elt_kernel: 3,
            mean_kernel: 3,
            variance_kernel: 3,
            dropout: 0.0,
            src_len: 32,
            tgt_len: 8,
            ..ModelConfig::default()
        }
    }

    fn ssf_config() -> ModelConfig {
        ModelConfig {
            variant: ModelVariant::Ssf,
            n_encoder_layers: 1,
            attention: AttentionConfig {
                d_model: 8,
                n_heads_hi: 1,
                n_heads_lo: 1,
                lo_pool_kernel: (2, 2),
                lo_pool_stride: (2, 2),
                ..AttentionConfig::default()
            },
            elt_kernel: 3,
            freq_resolution: 1,
            time_resolution: 8,
            mean_kernel: 3,
            variance_kernel: 3,
            dropout: 0.0,
            time_compression: 1,
            src_len: 8,
            tgt_len: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation_catches_bad_kernels() {
        let mut cfg = sf_config();
        cfg.elt_kernel = 4;
        assert!(cfg.validate().is_err());
        cfg.elt_kernel = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = sf_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn elt_token_count_matches_input_length() {
        let cfg = sf_config();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let xs: Vec<f64> = (0..32).map(|i| (i as f64 * 0.1).sin()).collect();
        let tokens = elt_embed(EltInput::Signal(&xs), &condition(), &cfg, &model.params).unwrap();
        assert_eq!(tokens.len(), 32);
        assert_eq!(tokens.tokens.ncols(), 8);
    }

    #[test]
    fn elt_zero_input_zero_weights_gives_zero_tokens() {
        let cfg = sf_config();
        let mut model = Model::new(cfg.clone(), 1).unwrap();
        // Zero the condition path and biases; PE off.
        let mut cfg = cfg;
        cfg.use_positional_encoding = false;
        for name in ["cond.w", "cond.b", "elt.c1.b", "elt.c2.b"] {
            model.params.get_mut(name).unwrap().fill(0.0);
        }
        let xs = vec![0.0; 16];
        let tokens = elt_embed(EltInput::Signal(&xs), &condition(), &cfg, &model.params).unwrap();
        assert!(tokens.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elt_conditioning_is_additive() {
        let mut cfg = sf_config();
        cfg.use_positional_encoding = false;
        let model = Model::new(cfg.clone(), 3).unwrap();
        let xs: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
        let c1 = condition();
        let c3 = TestCondition::new(
            FlawLevel::D3,
            4.0,
            20.0,
            Rotation::Clockwise,
            SensorSide::Lhs,
            SensorOrientation::Vertical,
        );
        let t1 = elt_embed(EltInput::Signal(&xs), &c1, &cfg, &model.params).unwrap();
        let t3 = elt_embed(EltInput::Signal(&xs), &c3, &cfg, &model.params).unwrap();

        // Difference must equal the difference of the embedded features,
        // broadcast over time.
        let f1 = Mat::from_shape_vec((1, 6), c1.feature_vector()).unwrap();
        let f3 = Mat::from_shape_vec((1, 6), c3.feature_vector()).unwrap();
        let w = model.params.get("cond.w").unwrap();
        let e1 = crate::autodiff::matmul_raw(&f1, w);
        let e3 = crate::autodiff::matmul_raw(&f3, w);
        for r in 0..16 {
            for c in 0..8 {
                let got = t3.tokens[[r, c]] - t1.tokens[[r, c]];
                let want = e3[[0, c]] - e1[[0, c]];
                assert!((got - want).abs() < 1e-12, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn sf_memory_lengths_follow_halving() {
        for (layers, len, want) in [(1usize, 64usize, 32usize), (3, 64, 8), (2, 50, 13)] {
            let mut cfg = sf_config();
            cfg.n_encoder_layers = layers;
            cfg.src_len = len;
            let model = Model::new(cfg.clone(), 5).unwrap();
            let xs: Vec<f64> = (0..len).map(|i| (i as f64 * 0.05).sin()).collect();
            let tokens =
                elt_embed(EltInput::Signal(&xs), &condition(), &cfg, &model.params).unwrap();
            let mem = encode_sf(&tokens, &cfg, &model.params).unwrap();
            assert_eq!(mem.len(), want, "layers={layers} len={len}");
        }
    }

    #[test]
    fn ssf_encoder_preserves_shape_and_is_deterministic() {
        let cfg = ssf_config();
        let model = Model::new(cfg.clone(), 7).unwrap();
        let f_bins = cfg.n_bins();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let slab = randn(f_bins * cfg.src_len, cfg.channels(), &mut rng);
        let tokens = elt_embed(
            EltInput::Slab {
                slab: &slab,
                grid: (f_bins, cfg.src_len),
            },
            &condition(),
            &cfg,
            &model.params,
        )
        .unwrap();
        let a = encode_ssf(&tokens, &cfg, &model.params).unwrap();
        let b = encode_ssf(&tokens, &cfg, &model.params).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.dim(), tokens.tokens.dim());
    }

    #[test]
    fn decode_causality_prefix_invariance() {
        let cfg = sf_config();
        let model = Model::new(cfg.clone(), 11).unwrap();
        let xs: Vec<f64> = (0..32).map(|i| (i as f64 * 0.2).sin()).collect();
        let src = elt_embed(EltInput::Signal(&xs), &condition(), &cfg, &model.params).unwrap();
        let mem = encode_sf(&src, &cfg, &model.params).unwrap();

        let dec_vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.4).cos()).collect();
        let bundle = ConditioningBundle::from_condition(&condition());
        let full_tokens =
            elt_embed(EltInput::Signal(&dec_vals), &condition(), &cfg, &model.params).unwrap();
        let full = decode(&mem, &full_tokens, &bundle, &cfg, &model.params).unwrap();

        let t = 7;
        let trunc_tokens =
            elt_embed(EltInput::Signal(&dec_vals[..t]), &condition(), &cfg, &model.params)
                .unwrap();
        let trunc = decode(&mem, &trunc_tokens, &bundle, &cfg, &model.params).unwrap();

        // ELT convolutions are same-padded (acausal by half a kernel), so
        // compare the strictly safe prefix: steps whose embedding window and
        // causal decode window never see the truncated tail.
        let safe = t - cfg.elt_kernel; // kernel reach of the two conv layers
        for i in 0..safe {
            assert!(
                (full.mu[[i, 0]] - trunc.mu[[i, 0]]).abs() < 1e-10,
                "step {i}: {} vs {}",
                full.mu[[i, 0]],
                trunc.mu[[i, 0]]
            );
            assert!((full.lam[[i, 0]] - trunc.lam[[i, 0]]).abs() < 1e-10 * full.lam[[i, 0]]);
        }
    }

    #[test]
    fn decode_lambda_positive() {
        let cfg = ssf_config();
        let model = Model::new(cfg.clone(), 13).unwrap();
        let f_bins = cfg.n_bins();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        for trial in 0..20 {
            let slab = randn(f_bins * cfg.src_len, cfg.channels(), &mut rng);
            let tokens = elt_embed(
                EltInput::Slab {
                    slab: &slab,
                    grid: (f_bins, cfg.src_len),
                },
                &condition(),
                &cfg,
                &model.params,
            )
            .unwrap();
            let mem = encode_ssf(&tokens, &cfg, &model.params).unwrap();
            let dec_slab = randn(f_bins * 4, cfg.channels(), &mut rng);
            let dec = elt_embed(
                EltInput::Slab {
                    slab: &dec_slab,
                    grid: (f_bins, 4),
                },
                &condition(),
                &cfg,
                &model.params,
            )
            .unwrap();
            let bundle = ConditioningBundle::from_condition(&condition());
            let out = decode(&mem, &dec, &bundle, &cfg, &model.params).unwrap();
            assert!(
                out.lam.iter().all(|&l| l > 0.0),
                "trial {trial} produced non-positive lambda"
            );
        }
    }

    #[test]
    fn decode_zero_reference_matches_absent_reference() {
        let cfg = ssf_config();
        let model = Model::new(cfg.clone(), 15).unwrap();
        let f_bins = cfg.n_bins();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let slab = randn(f_bins * cfg.src_len, cfg.channels(), &mut rng);
        let tokens = elt_embed(
            EltInput::Slab {
                slab: &slab,
                grid: (f_bins, cfg.src_len),
            },
            &condition(),
            &cfg,
            &model.params,
        )
        .unwrap();
        let mem = encode_ssf(&tokens, &cfg, &model.params).unwrap();
        let dec_slab = randn(f_bins * 4, cfg.channels(), &mut rng);
        let dec = elt_embed(
            EltInput::Slab {
                slab: &dec_slab,
                grid: (f_bins, 4),
            },
            &condition(),
            &cfg,
            &model.params,
        )
        .unwrap();

        let plain = ConditioningBundle::from_condition(&condition());
        let zero_ref = Spectrogram::new(
            Mat::zeros((f_bins, 4)),
            Mat::zeros((f_bins, 4)),
            cfg.stft_frame_len(),
            cfg.stft_hop(),
            cfg.stft_window(),
            256.0,
        )
        .unwrap();
        let with_zero = plain.clone().with_reference(zero_ref);

        let a = decode(&mem, &dec, &plain, &cfg, &model.params).unwrap();
        let b = decode(&mem, &dec, &with_zero, &cfg, &model.params).unwrap();
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.lam, b.lam);
    }

    #[test]
    fn frequency_filter_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let tokens = TokenGrid::with_grid(randn(12, 4, &mut rng), (3, 4)).unwrap();

        // Saturated-high gains: identity within fp (sigmoid(40) == 1.0).
        let high = Mat::from_elem((3, 1), 40.0);
        let out = frequency_filter(&tokens, &high).unwrap();
        for (a, b) in out.tokens.iter().zip(tokens.tokens.iter()) {
            assert_eq!(a, b);
        }

        // One fully muted row.
        let mut gains = Mat::from_elem((3, 1), 40.0);
        gains[[1, 0]] = -1e3;
        let out = frequency_filter(&tokens, &gains).unwrap();
        for t in 0..4 {
            assert_eq!(out.tokens[[4 + t, 0]], 0.0);
        }

        // Uniform 0.5 gain: raw = 0 gives sigmoid 0.5 exactly.
        let gains = Mat::zeros((3, 1));
        let out = frequency_filter(&tokens, &gains).unwrap();
        for (a, b) in out.tokens.iter().zip(tokens.tokens.iter()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_head_examples() {
        let mu = Mat::from_elem((2, 3), 1.5);
        let lam = Mat::from_elem((2, 3), 1.0);
        let params = PredictiveParams {
            mu: mu.clone(),
            lam,
            grid_shape: None,
        };
        // u = 0 -> z = mu exactly.
        let z = sample_head(&params, &Mat::zeros((2, 3)), &Mat::from_elem((2, 3), 3.0)).unwrap();
        assert_eq!(z, mu);

        // lambda = 1, u = 1 - e^{-1} -> sigma^2 = 1, so z = mu + eps.
        let u = Mat::from_elem((2, 3), 1.0 - (-1.0f64).exp());
        let eps = Mat::from_elem((2, 3), 2.0);
        let z = sample_head(&params, &u, &eps).unwrap();
        for v in z.iter() {
            assert!((v - 3.5).abs() < 1e-12);
        }

        // Monte-Carlo: mean sigma^2 = 1/lambda within 1%.
        let lam = 2.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
        use rand::Rng;
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u: f64 = rng.random();
            acc += -(1.0 - u).ln() / lam;
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean sigma^2 = {mean}");
    }

    #[test]
    fn checkpoint_shape_validation() {
        let cfg = sf_config();
        let model = Model::new(cfg.clone(), 19).unwrap();
        let mut params = model.params.clone();
        *params.get_mut("cond.w").unwrap() = Mat::zeros((2, 2));
        assert!(Model::from_parts(cfg, params).is_err());
    }
}
