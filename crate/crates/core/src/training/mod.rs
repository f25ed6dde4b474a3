//! Teacher-forced optimization and losses.
//!
//! The decoder consumes the ground-truth future shifted one step; the loss is
//! the MSE of the *sampled* head output (time domain for the time model,
//! spectrogram channels for the spectral model), so both the mean and the
//! variance parameters receive gradients through the reparameterized draw.
//! Validation tracks the expected sampled MSE, (mu-y)^2 + E[sigma^2], which
//! is deterministic.

pub mod gradcheck;
pub mod search;

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamSet, Tape, VarId};
use crate::dataset::{derive_seed, reference_signal, DatasetSplit, TestCondition, VibrationRecord};
use crate::error::{AxError, Result};
use crate::model::forecast::{teacher_forced_params, window_params};
use crate::model::window::{build_window, min_window_samples};
use crate::model::{
    decode_tape, elt_tape, encode_sf_tape, encode_ssf_tape, sample_gaussian_tape,
    sample_head_tape, Model, ModelCheckpoint, ModelConfig, ModelVariant, PassCtx,
    PredictiveParams, WindowSlabs,
};
use crate::spectral::Spectrogram;

pub use gradcheck::{gradient_check, list_blocks};
pub use search::{hyperparameter_search, write_sweep_csv, SearchSpace, TrialResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossDomain {
    Time,
    Frequency,
}

impl LossDomain {
    pub fn for_variant(variant: ModelVariant) -> Self {
        match variant {
            ModelVariant::Sf => LossDomain::Time,
            ModelVariant::Ssf => LossDomain::Frequency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss_domain: LossDomain,
    /// Teacher-forced windows drawn per record per epoch.
    pub windows_per_record: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2.97881e-3,
            max_epochs: 1000,
            batch_size: 8,
            early_stop_patience: 50,
            seed: 0,
            loss_domain: LossDomain::Frequency,
            windows_per_record: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model_cfg: &ModelConfig) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(AxError::InvalidConfig(
                "learning_rate must be non-negative".into(),
            ));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.windows_per_record == 0 {
            return Err(AxError::InvalidConfig(
                "max_epochs, batch_size, windows_per_record must be >= 1".into(),
            ));
        }
        let expected = LossDomain::for_variant(model_cfg.variant);
        if self.loss_domain != expected {
            return Err(AxError::ConfigMismatch(format!(
                "loss domain {:?} does not match variant {}",
                self.loss_domain,
                model_cfg.variant.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub type TrainHistory = Vec<EpochStats>;

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let file = File::create(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "epoch,train_loss,val_loss")
        .map_err(|e| AxError::io(path.display().to_string(), e))?;
    for s in history {
        writeln!(w, "{},{},{}", s.epoch, s.train_loss, s.val_loss)
            .map_err(|e| AxError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Mean squared error over both spectrogram channels jointly.
pub fn freq_mse_loss(pred: &Spectrogram, truth: &Spectrogram) -> Result<f64> {
    if pred.real_part.dim() != truth.real_part.dim() {
        return Err(AxError::ShapeMismatch(format!(
            "pred {:?} vs truth {:?}",
            pred.real_part.dim(),
            truth.real_part.dim()
        )));
    }
    let n = (2 * pred.real_part.len()) as f64;
    let mut acc = 0.0;
    for (a, b) in pred.real_part.iter().zip(truth.real_part.iter()) {
        acc += (a - b) * (a - b);
    }
    for (a, b) in pred.imag_part.iter().zip(truth.imag_part.iter()) {
        acc += (a - b) * (a - b);
    }
    Ok(acc / n)
}

/// Mean squared error between two equal-length sequences.
pub fn time_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(AxError::ShapeMismatch(format!(
            "pred {} vs truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: IndexMap<String, Mat>,
    v: IndexMap<String, Mat>,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Mat>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        // Global norm clip keeps early training stable.
        let mut norm_sq = 0.0;
        for g in grads.values() {
            norm_sq += g.iter().map(|v| v * v).sum::<f64>();
        }
        let norm = norm_sq.sqrt();
        let clip = 5.0;
        let scale = if norm > clip { clip / norm } else { 1.0 };

        for (name, g) in grads {
            let g = g * scale;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.dim()));
            let p = params.get_mut(name).expect("known parameter");
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Teacher-forced training
// ---------------------------------------------------------------------------

/// Reference templates per record (spectral conditioning).
fn reference_table(cfg: &ModelConfig, records: &[VibrationRecord]) -> Result<Vec<Option<Vec<f64>>>> {
    if cfg.variant != ModelVariant::Ssf {
        return Ok(records.iter().map(|_| None).collect());
    }
    records
        .iter()
        .map(|r| {
            let dur = r.samples.len() as f64 / r.sample_rate_hz + 1.0;
            reference_signal(&r.condition, dur, r.sample_rate_hz).map(|t| Some(t.samples))
        })
        .collect()
}

/// Build the sampled-output loss for one window on the tape.
#[allow(clippy::too_many_arguments)]
fn window_loss_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &crate::autodiff::BoundParams,
    w: &WindowSlabs,
    condition: &TestCondition,
    ctx: &mut PassCtx,
    rng: &mut ChaCha8Rng,
) -> Result<VarId> {
    let cond = tape.input(
        Mat::from_shape_vec((1, TestCondition::FEATURE_DIM), condition.feature_vector())
            .expect("feature row"),
    );
    let enc_slab = tape.input(w.enc.clone());
    let enc_tokens = elt_tape(
        tape,
        cfg,
        bound,
        enc_slab,
        w.enc_grid,
        cond,
        cfg.use_positional_encoding,
    );
    let memory = match cfg.variant {
        ModelVariant::Sf => encode_sf_tape(tape, cfg, bound, enc_tokens, ctx),
        ModelVariant::Ssf => encode_ssf_tape(
            tape,
            cfg,
            bound,
            enc_tokens,
            w.enc_grid.expect("grid"),
            ctx,
        )?,
    };

    // Decoder-input noise injection (time model, training only).
    let mut dec_slab = w.dec.clone();
    if cfg.variant == ModelVariant::Sf && cfg.noise_std > 0.0 {
        for v in dec_slab.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += cfg.noise_std * e;
        }
    }
    let dec_slab = tape.input(dec_slab);
    let dec_tokens = elt_tape(
        tape,
        cfg,
        bound,
        dec_slab,
        w.dec_grid,
        cond,
        cfg.use_positional_encoding,
    );
    let out = decode_tape(
        tape,
        cfg,
        bound,
        memory,
        dec_tokens,
        w.dec_grid,
        cond,
        w.reference.as_ref(),
        ctx,
    );

    let map = WindowSlabs::output_row_map(cfg);
    let mu = tape.gather_rows(out.mu, map.clone());
    let positive = tape.gather_rows(out.positive, map);

    let dim = w.target.dim();
    let mut eps = Mat::zeros(dim);
    for v in eps.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let z = match cfg.variant {
        ModelVariant::Ssf => {
            let mut u = Mat::zeros(dim);
            for v in u.iter_mut() {
                *v = rng.random::<f64>().clamp(1e-16, 1.0 - 1e-12);
            }
            sample_head_tape(tape, mu, positive, &u, &eps)
        }
        ModelVariant::Sf => sample_gaussian_tape(tape, mu, positive, &eps),
    };
    let neg_target = -&w.target;
    let diff = tape.add_const(z, &neg_target);
    let sq = tape.square(diff);
    Ok(tape.mean_all(sq))
}

/// Expected sampled MSE over all teacher-forced windows of `records`
/// (stride = target window), in the model's native loss domain.
pub fn expected_loss(
    model: &Model,
    records: &[VibrationRecord],
    references: &[Option<Vec<f64>>],
    seed: u64,
    max_windows_per_record: Option<usize>,
) -> Result<f64> {
    let cfg = &model.cfg;
    let need = min_window_samples(cfg);
    let stride = match cfg.variant {
        ModelVariant::Sf => cfg.tgt_len,
        ModelVariant::Ssf => cfg.tgt_len * cfg.time_compression * cfg.stft_hop(),
    };
    let mut acc = 0.0;
    let mut count = 0usize;
    for (ri, rec) in records.iter().enumerate() {
        if rec.samples.len() < need {
            return Err(AxError::InsufficientContext(format!(
                "record '{}' too short for evaluation",
                rec.record_id
            )));
        }
        let reference = references.get(ri).and_then(|r| r.as_deref());
        let mut start = 0usize;
        let mut taken = 0usize;
        while start + need <= rec.samples.len() {
            if let Some(cap) = max_windows_per_record {
                if taken >= cap {
                    break;
                }
            }
            let w = build_window(cfg, &rec.samples, start, rec.sample_rate_hz, reference)?;
            let params = window_params(model, &w, &rec.condition, derive_seed(seed, start as u64))?;
            for ((&m, &l), &y) in params
                .mu
                .iter()
                .zip(params.lam.iter())
                .zip(w.target.iter())
            {
                acc += (m - y) * (m - y) + 1.0 / l;
                count += 1;
            }
            start += stride;
            taken += 1;
        }
    }
    if count == 0 {
        return Err(AxError::InsufficientContext(
            "no evaluation windows".into(),
        ));
    }
    Ok(acc / count as f64)
}

const EVAL_WINDOWS_PER_RECORD: usize = 4;

#[doc(hidden)]
pub fn bench_train_step(
    model: &Model,
    cfg: &ModelConfig,
    w: &WindowSlabs,
    condition: &TestCondition,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut ctx = PassCtx::train(seed, cfg.dropout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = window_loss_tape(&mut tape, cfg, &bound, w, condition, &mut ctx, &mut rng)?;
    let grads = tape.backward(loss);
    let mut acc = 0.0;
    for (_, &id) in bound.iter() {
        if let Some(g) = &grads[id] {
            acc += g[[0, 0]];
        }
    }
    Ok(acc)
}

/// Teacher-forced training with early stopping on validation loss; returns
/// the best-validation checkpoint and the per-epoch loss history.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    split: &DatasetSplit,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    model_cfg.validate()?;
    train_cfg.validate(model_cfg)?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(AxError::InvalidArgument(
            "train and validation sets must be non-empty".into(),
        ));
    }
    let need = min_window_samples(model_cfg);
    for rec in split.train.iter().chain(split.validation.iter()) {
        if rec.samples.len() < need {
            return Err(AxError::InsufficientContext(format!(
                "record '{}' has {} samples, window needs {need}",
                rec.record_id,
                rec.samples.len()
            )));
        }
    }

    let mut model = Model::new(model_cfg.clone(), derive_seed(train_cfg.seed, 0x1717))?;
    let train_refs = reference_table(model_cfg, &split.train)?;
    let val_refs = reference_table(model_cfg, &split.validation)?;
    let mut adam = Adam::new(train_cfg.learning_rate);

    let mut history: TrainHistory = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    for epoch in 0..train_cfg.max_epochs {
        let epoch_seed = derive_seed(train_cfg.seed, 1 + epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);

        // Epoch window list: shuffled records, random window offsets.
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut windows: Vec<(usize, usize)> = Vec::new();
        for &ri in &order {
            let span = split.train[ri].samples.len() - need;
            for _ in 0..train_cfg.windows_per_record {
                let start = if span == 0 {
                    0
                } else {
                    rng.random_range(0..=span)
                };
                windows.push((ri, start));
            }
        }

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in windows.chunks(train_cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for (wi, &(ri, start)) in chunk.iter().enumerate() {
                let rec = &split.train[ri];
                let reference = train_refs[ri].as_deref();
                let w = build_window(model_cfg, &rec.samples, start, rec.sample_rate_hz, reference)?;
                let mut ctx = PassCtx::train(
                    derive_seed(epoch_seed, (batch_idx * 1024 + wi) as u64),
                    model_cfg.dropout,
                );
                let loss = window_loss_tape(
                    &mut tape,
                    model_cfg,
                    &bound,
                    &w,
                    &rec.condition,
                    &mut ctx,
                    &mut rng,
                )?;
                losses.push(loss);
            }
            let total = if losses.len() == 1 {
                losses[0]
            } else {
                let mut acc = losses[0];
                for &l in &losses[1..] {
                    acc = tape.add(acc, l);
                }
                acc
            };
            let total = tape.scale(total, 1.0 / losses.len() as f64);
            let loss_value = tape.value(total)[[0, 0]];
            if !loss_value.is_finite() {
                return Err(AxError::Divergence {
                    epoch,
                    msg: format!("batch {batch_idx} loss is {loss_value}"),
                });
            }
            epoch_loss += loss_value;
            n_batches += 1;

            let grads = tape.backward(total);
            let mut grad_map: IndexMap<String, Mat> = IndexMap::new();
            for (name, &id) in bound.iter() {
                if let Some(g) = &grads[id] {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(AxError::Divergence {
                            epoch,
                            msg: format!("non-finite gradient in '{name}'"),
                        });
                    }
                    grad_map.insert(name.clone(), g.clone());
                }
            }
            adam.step(&mut model.params, &grad_map);
        }
        let train_loss = epoch_loss / n_batches.max(1) as f64;

        let val_loss = expected_loss(
            &model,
            &split.validation,
            &val_refs,
            derive_seed(train_cfg.seed, 0xEA1),
            Some(EVAL_WINDOWS_PER_RECORD),
        )?;
        if !val_loss.is_finite() {
            return Err(AxError::Divergence {
                epoch,
                msg: format!("validation loss is {val_loss}"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_params = model.params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= train_cfg.early_stop_patience {
                break;
            }
        }
    }

    let best_model = Model::from_parts(model_cfg.clone(), best_params)?;
    let mut ckpt = ModelCheckpoint::from_model(&best_model, split.seed);
    ckpt.detect_threshold =
        validation_nll_threshold(&best_model, &split.validation, &val_refs_for(&best_model, split)?)
            .ok();
    let _ = best_epoch;
    Ok((ckpt, history))
}

fn val_refs_for(model: &Model, split: &DatasetSplit) -> Result<Vec<Option<Vec<f64>>>> {
    reference_table(&model.cfg, &split.validation)
}

/// 99th percentile of per-step NLL scores on the validation records; stored
/// in the checkpoint as the default anomaly threshold.
fn validation_nll_threshold(
    model: &Model,
    records: &[VibrationRecord],
    references: &[Option<Vec<f64>>],
) -> Result<f64> {
    let mut scores = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        let reference = references.get(ri).and_then(|r| r.as_deref());
        let windows = teacher_forced_params(model, rec, reference, 0x5C0E)?;
        for (start, params) in windows {
            let w = build_window(&model.cfg, &rec.samples, start, rec.sample_rate_hz, reference)?;
            scores.extend(step_nll_scores(&model.cfg, &params, &w.target));
        }
    }
    if scores.is_empty() {
        return Err(AxError::InsufficientContext(
            "no validation scores for threshold calibration".into(),
        ));
    }
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((scores.len() as f64) * 0.99).ceil() as usize;
    Ok(scores[idx.min(scores.len() - 1).max(0)])
}

/// Per-step negative log-likelihood of the observed target under
/// N(mu, sigma_bar^2), averaged over the channels (and frequency rows) of
/// each step.
pub fn step_nll_scores(cfg: &ModelConfig, params: &PredictiveParams, target: &Mat) -> Vec<f64> {
    let steps = cfg.tgt_len;
    let mut scores = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    for r in 0..params.mu.nrows() {
        let step = step_of_row(cfg, r);
        for c in 0..params.mu.ncols() {
            let mu = params.mu[[r, c]];
            let lam = params.lam[[r, c]];
            let var = (1.0 / lam).max(1e-12);
            let y = target[[r, c]];
            let nll = 0.5 * (ln2pi + var.ln()) + (y - mu) * (y - mu) / (2.0 * var);
            scores[step] += nll;
            counts[step] += 1;
        }
    }
    for (s, &n) in scores.iter_mut().zip(counts.iter()) {
        *s /= n.max(1) as f64;
    }
    scores
}

/// Per-step normalized squared error ((y - mu)^2 / sigma_bar^2).
pub fn step_zscore_scores(cfg: &ModelConfig, params: &PredictiveParams, target: &Mat) -> Vec<f64> {
    let steps = cfg.tgt_len;
    let mut scores = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    for r in 0..params.mu.nrows() {
        let step = step_of_row(cfg, r);
        for c in 0..params.mu.ncols() {
            let mu = params.mu[[r, c]];
            let lam = params.lam[[r, c]];
            let var = (1.0 / lam).max(1e-12);
            let y = target[[r, c]];
            scores[step] += (y - mu) * (y - mu) / var;
            counts[step] += 1;
        }
    }
    for (s, &n) in scores.iter_mut().zip(counts.iter()) {
        *s /= n.max(1) as f64;
    }
    scores
}

fn step_of_row(cfg: &ModelConfig, row: usize) -> usize {
    match cfg.variant {
        ModelVariant::Sf => row,
        ModelVariant::Ssf => row % cfg.tgt_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::dataset::{split_dataset, synth_grid};
    use crate::spectral::{stft, WindowKind};

    fn tiny_sf_cfg() -> ModelConfig {
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
            noise_std: 0.0,
            src_len: 32,
            tgt_len: 8,
            ..ModelConfig::default()
        }
    }

    fn tiny_split() -> DatasetSplit {
        let records = synth_grid(1, 1.0, 256.0, 0.05, 33).unwrap();
        split_dataset(&records[..8], (0.7, 0.2, 0.1), 5).unwrap()
    }

    #[test]
    fn freq_mse_examples() {
        let sig: Vec<f64> = (0..256).map(|i| (i as f64 * 0.1).sin()).collect();
        let a = stft(&sig, 32, 16, WindowKind::Hann, 256.0).unwrap();
        assert_eq!(freq_mse_loss(&a, &a).unwrap(), 0.0);

        let mut b = a.clone();
        b.real_part += 1.0;
        b.imag_part += 1.0;
        let mse = freq_mse_loss(&b, &a).unwrap();
        assert!((mse - 1.0).abs() < 1e-12);

        // Brute-force oracle on a random pair.
        let sig2: Vec<f64> = (0..256).map(|i| (i as f64 * 0.17).cos()).collect();
        let c = stft(&sig2, 32, 16, WindowKind::Hann, 256.0).unwrap();
        let mut want = 0.0;
        for (x, y) in a.real_part.iter().zip(c.real_part.iter()) {
            want += (x - y) * (x - y);
        }
        for (x, y) in a.imag_part.iter().zip(c.imag_part.iter()) {
            want += (x - y) * (x - y);
        }
        want /= (2 * a.real_part.len()) as f64;
        assert!((freq_mse_loss(&a, &c).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let cfg = tiny_sf_cfg();
        let split = tiny_split();
        let tc = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 2,
            batch_size: 4,
            early_stop_patience: 10,
            seed: 3,
            loss_domain: LossDomain::Time,
            windows_per_record: 1,
        };
        let (ckpt, _) = train(&cfg, &tc, &split).unwrap();
        let trained = ckpt.to_model().unwrap();
        let init = Model::new(cfg, derive_seed(3, 0x1717)).unwrap();
        for (name, m) in init.params.iter() {
            let t = trained.params.get(name).unwrap();
            for (a, b) in m.iter().zip(t.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "weight {name} changed");
            }
        }
    }

    #[test]
    fn same_seed_identical_histories() {
        let cfg = tiny_sf_cfg();
        let split = tiny_split();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 3,
            batch_size: 4,
            early_stop_patience: 10,
            seed: 7,
            loss_domain: LossDomain::Time,
            windows_per_record: 2,
        };
        let (c1, h1) = train(&cfg, &tc, &split).unwrap();
        let (c2, h2) = train(&cfg, &tc, &split).unwrap();
        assert_eq!(h1.len(), h2.len());
        for (a, b) in h1.iter().zip(h2.iter()) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
        let j1 = serde_json::to_string(&c1).unwrap();
        let j2 = serde_json::to_string(&c2).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = tiny_sf_cfg();
        let split = tiny_split();
        let tc = TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 15,
            batch_size: 8,
            early_stop_patience: 30,
            seed: 11,
            loss_domain: LossDomain::Time,
            windows_per_record: 2,
        };
        let (_, history) = train(&cfg, &tc, &split).unwrap();
        let first = history.first().unwrap().val_loss;
        let best = history
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(
            best < first,
            "validation loss did not improve: first {first}, best {best}"
        );
    }

    #[test]
    fn early_stopping_returns_best_checkpoint() {
        let cfg = tiny_sf_cfg();
        let split = tiny_split();
        let tc = TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 10,
            batch_size: 8,
            early_stop_patience: 2,
            seed: 13,
            loss_domain: LossDomain::Time,
            windows_per_record: 2,
        };
        let (ckpt, history) = train(&cfg, &tc, &split).unwrap();
        let best = history
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        // Re-evaluate the checkpoint on the validation set.
        let model = ckpt.to_model().unwrap();
        let refs = reference_table(&model.cfg, &split.validation).unwrap();
        let val = expected_loss(
            &model,
            &split.validation,
            &refs,
            derive_seed(13, 0xEA1),
            Some(EVAL_WINDOWS_PER_RECORD),
        )
        .unwrap();
        assert!(
            (val - best).abs() < 1e-9,
            "checkpoint val {val} != best {best}"
        );
    }
}
