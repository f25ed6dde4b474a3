//! Autoregressive rollout: each generated step feeds back as the next decoder
//! input. The spectral model rolls spectrogram frames and maps them to the
//! time domain by overlap-add inversion; the time model rolls raw samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mat, Tape};
use crate::dataset::{derive_seed, reference_signal, TestCondition, VibrationRecord};
use crate::error::{AxError, Result};
use crate::model::window::{
    build_window, min_window_samples, slab_to_channels, spec_to_slab, steps_to_samples,
    WindowSlabs,
};
use crate::model::{
    decode_tape, elt_tape, encode_sf_tape, encode_ssf_tape, Model, ModelCheckpoint, ModelConfig,
    ModelVariant, PassCtx, PredictiveParams,
};
use crate::spectral::{istft, stft, Spectrogram};

/// Quantile levels reported in forecast bands.
pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone)]
pub struct ForecastResult {
    /// Mean trajectory (mu rollout), `horizon` samples.
    pub mean: Vec<f64>,
    /// Empirical quantile bands over the stochastic trajectories.
    pub quantiles: Vec<(f64, Vec<f64>)>,
    /// Raw stochastic trajectories.
    pub samples: Vec<Vec<f64>>,
}

pub(crate) enum DrawMode<'a> {
    /// Zero-variance rollout: every step emits mu.
    Mean,
    Stochastic(&'a mut ChaCha8Rng),
}

/// Teacher-forced forward pass for one window; returns predictive parameters
/// for the `tgt_len` steps (rows follow the target slab layout).
pub(crate) fn window_params(
    model: &Model,
    w: &WindowSlabs,
    condition: &TestCondition,
    seed: u64,
) -> Result<PredictiveParams> {
    let cfg = &model.cfg;
    let mut tape = Tape::no_grad();
    let bound = model.params.bind(&mut tape);
    let mut ctx = PassCtx::eval(seed);

    let cond = tape.input(
        Mat::from_shape_vec((1, TestCondition::FEATURE_DIM), condition.feature_vector())
            .expect("feature row"),
    );
    let enc_slab = tape.input(w.enc.clone());
    let enc_tokens = elt_tape(
        &mut tape,
        cfg,
        &bound,
        enc_slab,
        w.enc_grid,
        cond,
        cfg.use_positional_encoding,
    );
    let memory = match cfg.variant {
        ModelVariant::Sf => encode_sf_tape(&mut tape, cfg, &bound, enc_tokens, &mut ctx),
        ModelVariant::Ssf => encode_ssf_tape(
            &mut tape,
            cfg,
            &bound,
            enc_tokens,
            w.enc_grid.expect("spectral grid"),
            &mut ctx,
        )?,
    };

    let dec_slab = tape.input(w.dec.clone());
    let dec_tokens = elt_tape(
        &mut tape,
        cfg,
        &bound,
        dec_slab,
        w.dec_grid,
        cond,
        cfg.use_positional_encoding,
    );
    let out = decode_tape(
        &mut tape,
        cfg,
        &bound,
        memory,
        dec_tokens,
        w.dec_grid,
        cond,
        w.reference.as_ref(),
        &mut ctx,
    );

    let mu_full = tape.value(out.mu);
    let pos_full = tape.value(out.positive);
    let map = WindowSlabs::output_row_map(cfg);
    let c = mu_full.ncols();
    let mut mu = Mat::zeros((map.len(), c));
    let mut pos = Mat::zeros((map.len(), c));
    for (i, &src) in map.iter().enumerate() {
        mu.row_mut(i).assign(&mu_full.row(src));
        pos.row_mut(i).assign(&pos_full.row(src));
    }
    let lam = match cfg.variant {
        ModelVariant::Ssf => pos,
        ModelVariant::Sf => pos.mapv(|v| 1.0 / v),
    };
    let params = PredictiveParams {
        mu,
        lam,
        grid_shape: w.target_grid,
    };
    params.validate()?;
    Ok(params)
}

/// Decode the current prefix and return (mu, positive) for its last step,
/// shaped `[F_or_1, C]`.
fn decode_last_step(
    model: &Model,
    enc_memory_slab: &Mat,
    enc_grid: Option<(usize, usize)>,
    dec_slab: &Mat,
    dec_steps: usize,
    condition: &TestCondition,
    reference: Option<&Mat>,
    seed: u64,
) -> Result<(Mat, Mat)> {
    let cfg = &model.cfg;
    let mut tape = Tape::no_grad();
    let bound = model.params.bind(&mut tape);
    let mut ctx = PassCtx::eval(seed);
    let cond = tape.input(
        Mat::from_shape_vec((1, TestCondition::FEATURE_DIM), condition.feature_vector())
            .expect("feature row"),
    );

    let enc = tape.input(enc_memory_slab.clone());
    let enc_tokens = elt_tape(
        &mut tape,
        cfg,
        &bound,
        enc,
        enc_grid,
        cond,
        cfg.use_positional_encoding,
    );
    let memory = match cfg.variant {
        ModelVariant::Sf => encode_sf_tape(&mut tape, cfg, &bound, enc_tokens, &mut ctx),
        ModelVariant::Ssf => encode_ssf_tape(
            &mut tape,
            cfg,
            &bound,
            enc_tokens,
            enc_grid.expect("spectral grid"),
            &mut ctx,
        )?,
    };

    let dec_grid = match cfg.variant {
        ModelVariant::Sf => None,
        ModelVariant::Ssf => Some((cfg.n_bins(), dec_steps)),
    };
    let dec = tape.input(dec_slab.clone());
    let dec_tokens = elt_tape(
        &mut tape,
        cfg,
        &bound,
        dec,
        dec_grid,
        cond,
        cfg.use_positional_encoding,
    );
    let out = decode_tape(
        &mut tape, cfg, &bound, memory, dec_tokens, dec_grid, cond, reference, &mut ctx,
    );

    let mu_full = tape.value(out.mu);
    let pos_full = tape.value(out.positive);
    let c = mu_full.ncols();
    match cfg.variant {
        ModelVariant::Sf => {
            let mut mu = Mat::zeros((1, c));
            let mut pos = Mat::zeros((1, c));
            mu.row_mut(0).assign(&mu_full.row(dec_steps - 1));
            pos.row_mut(0).assign(&pos_full.row(dec_steps - 1));
            Ok((mu, pos))
        }
        ModelVariant::Ssf => {
            let f_bins = cfg.n_bins();
            let mut mu = Mat::zeros((f_bins, c));
            let mut pos = Mat::zeros((f_bins, c));
            for f in 0..f_bins {
                let src = f * dec_steps + dec_steps - 1;
                mu.row_mut(f).assign(&mu_full.row(src));
                pos.row_mut(f).assign(&pos_full.row(src));
            }
            Ok((mu, pos))
        }
    }
}

fn draw_step(cfg: &ModelConfig, mu: &Mat, pos: &Mat, mode: &mut DrawMode<'_>) -> Mat {
    match mode {
        DrawMode::Mean => mu.clone(),
        DrawMode::Stochastic(rng) => {
            let mut z = mu.clone();
            for (zv, &pv) in z.iter_mut().zip(pos.iter()) {
                let eps: f64 = StandardNormal.sample(*rng);
                let sigma2 = match cfg.variant {
                    // pos is the exponential rate on the variance.
                    ModelVariant::Ssf => {
                        let u: f64 = rng.random();
                        -(1.0 - u).ln() / pv
                    }
                    // pos is the variance itself.
                    ModelVariant::Sf => pv,
                };
                *zv += sigma2.sqrt() * eps;
            }
            z
        }
    }
}

/// Roll the model `horizon` samples past the end of `context`. The context
/// must be long enough for one encoder source window. Returns exactly
/// `horizon` predicted samples.
pub(crate) fn rollout(
    model: &Model,
    context: &[f64],
    sample_rate_hz: f64,
    condition: &TestCondition,
    horizon: usize,
    mode: &mut DrawMode<'_>,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let src_samples = steps_to_samples(cfg, cfg.src_len);
    if context.len() < src_samples {
        return Err(AxError::InsufficientContext(format!(
            "rollout needs {src_samples} context samples, got {}",
            context.len()
        )));
    }
    let label = cfg.label_len();
    let max_dec_steps = label + cfg.tgt_len.max(1) - 1;

    match cfg.variant {
        ModelVariant::Sf => {
            let enc = Mat::from_shape_vec(
                (src_samples, 1),
                context[context.len() - src_samples..].to_vec(),
            )
            .expect("column");
            let mut state: Vec<f64> = context[context.len() - label..].to_vec();
            let mut out = Vec::with_capacity(horizon);
            for h in 0..horizon {
                let keep = state.len().min(max_dec_steps.max(label));
                let window = &state[state.len() - keep..];
                let dec = Mat::from_shape_vec((window.len(), 1), window.to_vec()).expect("column");
                let (mu, pos) = decode_last_step(
                    model,
                    &enc,
                    None,
                    &dec,
                    window.len(),
                    condition,
                    None,
                    derive_seed(seed, h as u64),
                )?;
                let z = draw_step(cfg, &mu, &pos, mode);
                let value = z[[0, 0]];
                state.push(value);
                out.push(value);
            }
            Ok(out)
        }
        ModelVariant::Ssf => {
            let tc = cfg.time_compression;
            let frame = cfg.stft_frame_len();
            let hop = cfg.stft_hop();
            let f_bins = cfg.n_bins();
            let n_frames_needed = horizon.div_ceil(hop) + 1;
            let n_steps = n_frames_needed.div_ceil(tc);

            let window_start = context.len() - src_samples;
            let src_spec = stft(
                &context[window_start..],
                frame,
                hop,
                cfg.stft_window(),
                sample_rate_hz,
            )?;
            let enc = spec_to_slab(&src_spec, 0, cfg.src_len, tc);
            let enc_grid = Some((f_bins, cfg.src_len));

            // Reference template over context + forecast range (the decoder
            // sees reference frames aligned with its own step positions).
            let total_len = context.len() + horizon + frame + hop * tc * n_steps;
            let ref_rec = reference_signal(
                condition,
                total_len as f64 / sample_rate_hz + 1.0,
                sample_rate_hz,
            )?;
            let ref_spec = stft(
                &ref_rec.samples[window_start..],
                frame,
                hop,
                cfg.stft_window(),
                sample_rate_hz,
            )?;

            // Step state: frequency-major step slabs [F, 2tc], oldest first.
            // First global step index of the state within the window grid.
            let mut state: Vec<Mat> = (cfg.src_len - label..cfg.src_len)
                .map(|s| {
                    let slab = spec_to_slab(&src_spec, s * tc, 1, tc);
                    slab
                })
                .collect();
            let mut first_step = cfg.src_len - label;

            let mut gen_steps: Vec<Mat> = Vec::with_capacity(n_steps);
            for h in 0..n_steps {
                if state.len() > max_dec_steps {
                    let drop = state.len() - max_dec_steps;
                    state.drain(..drop);
                    first_step += drop;
                }
                let dec_steps = state.len();
                // Assemble the decoder slab (frequency-major over steps).
                let mut dec = Mat::zeros((f_bins * dec_steps, 2 * tc));
                for (s, step) in state.iter().enumerate() {
                    for f in 0..f_bins {
                        for ch in 0..2 * tc {
                            dec[[f * dec_steps + s, ch]] = step[[f, ch]];
                        }
                    }
                }
                // Reference frames for these decoder steps.
                let ref_ok =
                    (first_step + dec_steps) * tc <= ref_spec.n_frames();
                let reference = if ref_ok {
                    Some(spec_to_slab(&ref_spec, first_step * tc, dec_steps, tc))
                } else {
                    None
                };
                let (mu, pos) = decode_last_step(
                    model,
                    &enc,
                    enc_grid,
                    &dec,
                    dec_steps,
                    condition,
                    reference.as_ref(),
                    derive_seed(seed, h as u64),
                )?;
                let z = draw_step(cfg, &mu, &pos, mode);
                state.push(z.clone());
                gen_steps.push(z);
            }

            // Stitch generated steps into one spectrogram and invert.
            let gen_frames = n_steps * tc;
            let mut slab = Mat::zeros((f_bins * n_steps, 2 * tc));
            for (s, step) in gen_steps.iter().enumerate() {
                for f in 0..f_bins {
                    for ch in 0..2 * tc {
                        slab[[f * n_steps + s, ch]] = step[[f, ch]];
                    }
                }
            }
            let (real, imag) = slab_to_channels(&slab, f_bins, n_steps, tc);
            let spec = Spectrogram::new(real, imag, frame, hop, cfg.stft_window(), sample_rate_hz)?;
            let recon_len = frame + (gen_frames - 1) * hop;
            let recon = istft(&spec, recon_len)?;
            // The first generated frame starts (frame - hop) samples before
            // the end of the context window.
            let offset = frame - hop;
            if recon.len() < offset + horizon {
                return Err(AxError::Numerical(format!(
                    "rollout reconstruction too short: {} < {}",
                    recon.len(),
                    offset + horizon
                )));
            }
            Ok(recon[offset..offset + horizon].to_vec())
        }
    }
}

fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Probabilistic forecast: a mu rollout as the central trajectory plus
/// `n_samples` stochastic trajectories with empirical quantile bands.
/// Deterministic for a fixed seed.
pub fn forecast(
    ckpt: &ModelCheckpoint,
    history: &VibrationRecord,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ForecastResult> {
    let model = ckpt.to_model()?;
    if horizon == 0 {
        return Ok(ForecastResult {
            mean: Vec::new(),
            quantiles: Vec::new(),
            samples: Vec::new(),
        });
    }
    history.validate()?;
    if let Some(mask) = &history.mask {
        if mask.iter().any(|&m| !m) {
            return Err(AxError::InvalidArgument(
                "forecast history must be fully observed (impute gaps first)".into(),
            ));
        }
    }
    let _ = min_window_samples(&model.cfg);
    let mean = rollout(
        &model,
        &history.samples,
        history.sample_rate_hz,
        &history.condition,
        horizon,
        &mut DrawMode::Mean,
        derive_seed(seed, 0xA11),
    )?;

    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB00 + s as u64));
        let traj = rollout(
            &model,
            &history.samples,
            history.sample_rate_hz,
            &history.condition,
            horizon,
            &mut DrawMode::Stochastic(&mut rng),
            derive_seed(seed, 0xC00 + s as u64),
        )?;
        samples.push(traj);
    }

    let quantiles = if samples.is_empty() {
        Vec::new()
    } else {
        QUANTILE_LEVELS
            .iter()
            .map(|&q| {
                let band: Vec<f64> = (0..horizon)
                    .map(|t| {
                        let mut col: Vec<f64> = samples.iter().map(|s| s[t]).collect();
                        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        empirical_quantile(&col, q)
                    })
                    .collect();
                (q, band)
            })
            .collect()
    };

    Ok(ForecastResult {
        mean,
        quantiles,
        samples,
    })
}

#[doc(hidden)]
pub fn bench_forward(
    model: &Model,
    w: &WindowSlabs,
    condition: &TestCondition,
    seed: u64,
) -> Result<PredictiveParams> {
    window_params(model, w, condition, seed)
}

/// Teacher-forced predictive parameters for consecutive windows tiling the
/// record (stride = tgt window). Used by evaluation and outlier scoring.
pub fn teacher_forced_params(
    model: &Model,
    record: &VibrationRecord,
    reference: Option<&[f64]>,
    seed: u64,
) -> Result<Vec<(usize, PredictiveParams)>> {
    let cfg = &model.cfg;
    let need = min_window_samples(cfg);
    if record.samples.len() < need {
        return Err(AxError::InsufficientContext(format!(
            "record '{}' has {} samples, needs {need}",
            record.record_id,
            record.samples.len()
        )));
    }
    let stride = match cfg.variant {
        ModelVariant::Sf => cfg.tgt_len,
        ModelVariant::Ssf => cfg.tgt_len * cfg.time_compression * cfg.stft_hop(),
    };
    let mut out = Vec::new();
    let mut start = 0usize;
    while start + need <= record.samples.len() {
        let w = build_window(cfg, &record.samples, start, record.sample_rate_hz, reference)?;
        let params = window_params(model, &w, &record.condition, derive_seed(seed, start as u64))?;
        out.push((start, params));
        start += stride;
    }
    Ok(out)
}
