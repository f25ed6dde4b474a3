//! Monitoring tasks on top of trained checkpoints: missing-data imputation,
//! one-step-ahead outlier detection, split evaluation, and decomposition
//! reports. All file outputs are written atomically (temp file + rename).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, reference_signal, DatasetSplit, VibrationRecord};
use crate::error::{AxError, Result};
use crate::model::forecast::{rollout, teacher_forced_params, DrawMode, ForecastResult};
use crate::model::window::{build_window, steps_to_samples};
use crate::model::{Model, ModelCheckpoint, ModelVariant};
use crate::spectral::{stl_decompose, StlComponents};
use crate::training::{expected_loss, step_nll_scores, step_zscore_scores};

// ---------------------------------------------------------------------------
// Atomic output
// ---------------------------------------------------------------------------

/// Write `content` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f =
            fs::File::create(&tmp).map_err(|e| AxError::io(tmp.display().to_string(), e))?;
        f.write_all(content.as_bytes())
            .map_err(|e| AxError::io(tmp.display().to_string(), e))?;
        f.sync_all()
            .map_err(|e| AxError::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| AxError::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Imputation
// ---------------------------------------------------------------------------

/// Fill masked gaps by conditional prediction from the observed context to
/// the left of each gap, sweeping left to right. Later passes re-run the
/// sweep with earlier fills in place. Observed samples are untouched.
pub fn impute(
    ckpt: &ModelCheckpoint,
    record: &VibrationRecord,
    passes: usize,
) -> Result<VibrationRecord> {
    if passes == 0 {
        return Err(AxError::InvalidArgument("passes must be >= 1".into()));
    }
    record.validate()?;
    let gaps = record.gaps();
    if gaps.is_empty() {
        return Err(AxError::InvalidArgument(
            "record has no masked gaps to impute".into(),
        ));
    }
    let model = ckpt.to_model()?;
    let src_samples = steps_to_samples(&model.cfg, model.cfg.src_len);
    if gaps[0].start < src_samples {
        return Err(AxError::InsufficientContext(format!(
            "first gap starts at {} but the model needs {src_samples} context samples",
            gaps[0].start
        )));
    }

    let mut working = record.samples.clone();
    // Hidden values under the mask must never leak into the prediction.
    for g in &gaps {
        for v in working.iter_mut().take(g.end).skip(g.start) {
            *v = 0.0;
        }
    }

    for pass in 0..passes {
        for (gi, gap) in gaps.iter().enumerate() {
            let context = &working[..gap.start];
            let filled = rollout(
                &model,
                context,
                record.sample_rate_hz,
                &record.condition,
                gap.len(),
                &mut DrawMode::Mean,
                derive_seed(0x1337, (pass * 1024 + gi) as u64),
            )?;
            working[gap.start..gap.end].copy_from_slice(&filled);
        }
    }

    let mut out = record.clone();
    out.samples = working;
    Ok(out)
}

/// Straight-line fill across every gap (the naive baseline imputer).
pub fn linear_interpolate_gaps(record: &VibrationRecord) -> VibrationRecord {
    let mut out = record.clone();
    for gap in record.gaps() {
        let left = if gap.start > 0 {
            record.samples[gap.start - 1]
        } else {
            0.0
        };
        let right = if gap.end < record.samples.len() {
            record.samples[gap.end]
        } else {
            left
        };
        let span = (gap.len() + 1) as f64;
        for (k, i) in (gap.start..gap.end).enumerate() {
            let w = (k + 1) as f64 / span;
            out.samples[i] = left * (1.0 - w) + right * w;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Outlier detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Nll,
    ZScore,
}

impl Scoring {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nll" => Ok(Scoring::Nll),
            "z_score" | "zscore" | "z-score" => Ok(Scoring::ZScore),
            other => Err(AxError::InvalidArgument(format!(
                "unknown scoring '{other}' (expected nll or z_score)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scoring::Nll => "nll",
            Scoring::ZScore => "z_score",
        }
    }
}

/// Per-step anomaly scores with flags above the threshold.
#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub scores: Vec<f64>,
    pub flags: Vec<bool>,
    pub threshold: f64,
    pub scoring: Scoring,
    /// Sample index where each scored step begins.
    pub step_starts: Vec<usize>,
    /// Samples covered by one step.
    pub step_samples: usize,
}

impl AnomalyReport {
    pub fn flagged_steps(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,sample_start,score,flag\n");
        for i in 0..self.scores.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                i,
                self.step_starts[i],
                self.scores[i],
                u8::from(self.flags[i])
            ));
        }
        s
    }
}

/// Rolling one-step-ahead prediction over the record; discrepancies between
/// predictions and observations are scored per step and flagged above the
/// threshold. `threshold = None` uses the checkpoint's calibrated default.
pub fn detect_outliers(
    ckpt: &ModelCheckpoint,
    record: &VibrationRecord,
    threshold: Option<f64>,
    scoring: Scoring,
) -> Result<AnomalyReport> {
    record.validate()?;
    let model = ckpt.to_model()?;
    let cfg = &model.cfg;
    let threshold = match threshold.or(ckpt.detect_threshold) {
        Some(t) => t,
        None => {
            return Err(AxError::InvalidArgument(
                "no threshold given and the checkpoint stores no calibrated default".into(),
            ))
        }
    };
    let reference = match cfg.variant {
        ModelVariant::Ssf => {
            let dur = record.samples.len() as f64 / record.sample_rate_hz + 1.0;
            Some(reference_signal(&record.condition, dur, record.sample_rate_hz)?.samples)
        }
        ModelVariant::Sf => None,
    };
    let windows = teacher_forced_params(&model, record, reference.as_deref(), 0xDE7EC7)?;
    if windows.is_empty() {
        return Err(AxError::InsufficientContext(format!(
            "record '{}' too short for one prediction window",
            record.record_id
        )));
    }

    let src_samples = steps_to_samples(cfg, cfg.src_len);
    let step = cfg.step_samples();
    let mut scores = Vec::new();
    let mut step_starts = Vec::new();
    for (start, params) in windows {
        let w = build_window(cfg, &record.samples, start, record.sample_rate_hz, reference.as_deref())?;
        let step_scores = match scoring {
            Scoring::Nll => step_nll_scores(cfg, &params, &w.target),
            Scoring::ZScore => step_zscore_scores(cfg, &params, &w.target),
        };
        for (i, s) in step_scores.into_iter().enumerate() {
            scores.push(s);
            step_starts.push(start + src_samples + i * step);
        }
    }
    let flags = scores.iter().map(|&s| s > threshold).collect();
    Ok(AnomalyReport {
        scores,
        flags,
        threshold,
        scoring,
        step_starts,
        step_samples: step,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEval {
    pub record_id: String,
    pub split: String,
    pub mse: f64,
}

/// Teacher-forced expected MSE per split, in the checkpoint's loss domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTable {
    pub train_mse: f64,
    pub validation_mse: f64,
    pub test_mse: f64,
    pub per_record: Vec<RecordEval>,
}

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,record_id,mse\n");
        for r in &self.per_record {
            s.push_str(&format!("{},{},{}\n", r.split, r.record_id, r.mse));
        }
        s.push_str(&format!("train,,{}\n", self.train_mse));
        s.push_str(&format!("validation,,{}\n", self.validation_mse));
        s.push_str(&format!("test,,{}\n", self.test_mse));
        s
    }
}

fn record_reference(model: &Model, rec: &VibrationRecord) -> Result<Option<Vec<f64>>> {
    match model.cfg.variant {
        ModelVariant::Ssf => {
            let dur = rec.samples.len() as f64 / rec.sample_rate_hz + 1.0;
            Ok(Some(
                reference_signal(&rec.condition, dur, rec.sample_rate_hz)?.samples,
            ))
        }
        ModelVariant::Sf => Ok(None),
    }
}

/// Evaluate a checkpoint on a split. The split must carry the seed the
/// checkpoint was trained with (its labels are only meaningful then).
pub fn evaluate(ckpt: &ModelCheckpoint, split: &DatasetSplit) -> Result<EvalTable> {
    let model = ckpt.to_model()?;
    if split.seed != ckpt.split_seed {
        return Err(AxError::ConfigMismatch(format!(
            "split seed {} does not match checkpoint split seed {}",
            split.seed, ckpt.split_seed
        )));
    }
    let mut per_record = Vec::new();
    let mut summaries = [0.0f64; 3];
    for (si, (name, records)) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ]
    .into_iter()
    .enumerate()
    {
        let mut acc = 0.0;
        for rec in records.iter() {
            let reference = record_reference(&model, rec)?;
            let refs = vec![reference];
            let mse = expected_loss(
                &model,
                std::slice::from_ref(rec),
                &refs,
                derive_seed(ckpt.split_seed, 0xE7A1),
                None,
            )?;
            per_record.push(RecordEval {
                record_id: rec.record_id.clone(),
                split: name.to_string(),
                mse,
            });
            acc += mse;
        }
        summaries[si] = if records.is_empty() {
            0.0
        } else {
            acc / records.len() as f64
        };
    }
    Ok(EvalTable {
        train_mse: summaries[0],
        validation_mse: summaries[1],
        test_mse: summaries[2],
        per_record,
    })
}

// ---------------------------------------------------------------------------
// Decomposition report
// ---------------------------------------------------------------------------

/// STL decomposition of a true and a predicted signal, side by side.
#[derive(Debug, Clone)]
pub struct DecomposeReport {
    pub truth: StlComponents,
    pub predicted: StlComponents,
}

impl DecomposeReport {
    pub fn to_csv(&self, true_signal: &[f64], predicted_signal: &[f64]) -> String {
        let mut s = String::from(
            "t,true_signal,true_trend,true_seasonal,true_residual,\
             pred_signal,pred_trend,pred_seasonal,pred_residual\n",
        );
        for i in 0..true_signal.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                i,
                true_signal[i],
                self.truth.trend[i],
                self.truth.seasonal[i],
                self.truth.residual[i],
                predicted_signal[i],
                self.predicted.trend[i],
                self.predicted.seasonal[i],
                self.predicted.residual[i],
            ));
        }
        s
    }
}

/// STL both signals with the same period and span.
pub fn decompose_report(
    true_signal: &[f64],
    predicted_signal: &[f64],
    period: usize,
    loess_span: usize,
) -> Result<DecomposeReport> {
    if true_signal.len() != predicted_signal.len() {
        return Err(AxError::ShapeMismatch(format!(
            "true length {} vs predicted length {}",
            true_signal.len(),
            predicted_signal.len()
        )));
    }
    Ok(DecomposeReport {
        truth: stl_decompose(true_signal, period, loess_span)?,
        predicted: stl_decompose(predicted_signal, period, loess_span)?,
    })
}

// ---------------------------------------------------------------------------
// Baselines and forecast export
// ---------------------------------------------------------------------------

/// Persistence baseline: repeat the last observed value.
pub fn persistence_forecast(history: &[f64], horizon: usize) -> Vec<f64> {
    let last = history.last().copied().unwrap_or(0.0);
    vec![last; horizon]
}

pub fn forecast_to_csv(result: &ForecastResult) -> String {
    let mut header = String::from("t,mean");
    for (q, _) in &result.quantiles {
        header.push_str(&format!(",q{:02}", (q * 100.0).round() as u32));
    }
    header.push('\n');
    let mut s = header;
    for t in 0..result.mean.len() {
        s.push_str(&format!("{},{}", t, result.mean[t]));
        for (_, band) in &result.quantiles {
            s.push_str(&format!(",{}", band[t]));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::dataset::{
        mask_gaps, split_dataset, synth_grid, synth_record, FlawLevel, Rotation,
        SensorOrientation, SensorSide, TestCondition,
    };
    use crate::model::{ModelCheckpoint, ModelConfig};
    use crate::training::{train, LossDomain, TrainConfig};

    fn sf_cfg() -> ModelConfig {
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

    fn quick_checkpoint() -> (ModelCheckpoint, DatasetSplit) {
        let records = synth_grid(1, 1.0, 256.0, 0.05, 77).unwrap();
        let split = split_dataset(&records[..8], (0.7, 0.2, 0.1), 4).unwrap();
        let tc = TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 3,
            batch_size: 8,
            early_stop_patience: 5,
            seed: 2,
            loss_domain: LossDomain::Time,
            windows_per_record: 2,
        };
        let (ckpt, _) = train(&sf_cfg(), &tc, &split).unwrap();
        (ckpt, split)
    }

    fn record() -> VibrationRecord {
        let c = TestCondition::new(
            FlawLevel::D1,
            4.0,
            20.0,
            Rotation::Clockwise,
            SensorSide::Lhs,
            SensorOrientation::Vertical,
        );
        synth_record(&c, 1.0, 256.0, 0.05, 5).unwrap()
    }

    #[test]
    fn impute_requires_gaps_and_context() {
        let (ckpt, _) = quick_checkpoint();
        let clean = record();
        assert!(matches!(
            impute(&ckpt, &clean, 1),
            Err(AxError::InvalidArgument(_))
        ));

        // Gap right at the start: not enough context.
        let mut early = clean.clone();
        let mut mask = vec![true; early.samples.len()];
        for m in mask.iter_mut().take(20).skip(5) {
            *m = false;
        }
        early.mask = Some(mask);
        assert!(matches!(
            impute(&ckpt, &early, 1),
            Err(AxError::InsufficientContext(_))
        ));
    }

    #[test]
    fn impute_preserves_observed_bytes() {
        let (ckpt, _) = quick_checkpoint();
        let mut masked = record();
        let n = masked.samples.len();
        let mut mask = vec![true; n];
        for m in mask.iter_mut().take(n / 2 + 20).skip(n / 2) {
            *m = false;
        }
        for m in mask.iter_mut().take(n - 30).skip(n - 45) {
            *m = false;
        }
        masked.mask = Some(mask);
        let filled = impute(&ckpt, &masked, 2).unwrap();
        assert_eq!(filled.mask, masked.mask);
        for (i, (&a, &b)) in masked
            .samples
            .iter()
            .zip(filled.samples.iter())
            .enumerate()
        {
            if masked.is_observed(i) {
                assert_eq!(a.to_bits(), b.to_bits(), "observed sample {i} changed");
            }
        }
    }

    #[test]
    fn linear_interp_fills_and_preserves() {
        let masked = mask_gaps(&record(), 0.1, 2, 3).unwrap();
        let filled = linear_interpolate_gaps(&masked);
        for (i, (&a, &b)) in masked
            .samples
            .iter()
            .zip(filled.samples.iter())
            .enumerate()
        {
            if masked.is_observed(i) {
                assert_eq!(a, b);
            }
        }
        // Interior of a gap lies between its endpoints.
        let gap = &masked.gaps()[0];
        let lo = masked.samples[gap.start - 1].min(masked.samples[gap.end]);
        let hi = masked.samples[gap.start - 1].max(masked.samples[gap.end]);
        for i in gap.clone() {
            assert!(filled.samples[i] >= lo - 1e-12 && filled.samples[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn detect_threshold_monotonicity_and_infinity() {
        let (ckpt, _) = quick_checkpoint();
        let rec = record();
        let low = detect_outliers(&ckpt, &rec, Some(-1e9), Scoring::Nll).unwrap();
        let mid = detect_outliers(&ckpt, &rec, Some(1.0), Scoring::Nll).unwrap();
        let inf = detect_outliers(&ckpt, &rec, Some(f64::INFINITY), Scoring::Nll).unwrap();
        assert!(low.flagged_steps() >= mid.flagged_steps());
        assert_eq!(inf.flagged_steps(), 0);
        assert_eq!(low.flagged_steps(), low.scores.len());
    }

    #[test]
    fn detect_uses_checkpoint_default_threshold() {
        let (ckpt, _) = quick_checkpoint();
        assert!(ckpt.detect_threshold.is_some());
        let rec = record();
        let report = detect_outliers(&ckpt, &rec, None, Scoring::Nll).unwrap();
        assert_eq!(report.threshold, ckpt.detect_threshold.unwrap());
    }

    #[test]
    fn evaluate_checks_split_seed_and_counts_duplicates() {
        let (ckpt, split) = quick_checkpoint();
        let table = evaluate(&ckpt, &split).unwrap();
        assert!(table.train_mse >= 0.0);
        assert_eq!(
            table.per_record.len(),
            split.train.len() + split.validation.len() + split.test.len()
        );

        let mut wrong = split.clone();
        wrong.seed += 1;
        assert!(matches!(
            evaluate(&ckpt, &wrong),
            Err(AxError::ConfigMismatch(_))
        ));

        // Duplicate record counts twice in the mean.
        let mut dup = split.clone();
        let extra = dup.test[0].clone();
        dup.test.push(extra);
        let t2 = evaluate(&ckpt, &dup).unwrap();
        let single = table
            .per_record
            .iter()
            .find(|r| r.split == "test")
            .unwrap()
            .mse;
        assert!((t2.test_mse - single).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (ckpt, split) = quick_checkpoint();
        let a = evaluate(&ckpt, &split).unwrap();
        let b = evaluate(&ckpt, &split).unwrap();
        for (x, y) in a.per_record.iter().zip(b.per_record.iter()) {
            assert_eq!(x.mse.to_bits(), y.mse.to_bits());
        }
    }

    #[test]
    fn decompose_identity_and_identical_inputs() {
        let sig: Vec<f64> = (0..120)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 24.0).sin() + 0.01 * i as f64)
            .collect();
        let report = decompose_report(&sig, &sig, 24, 7).unwrap();
        for i in 0..sig.len() {
            assert_eq!(report.truth.trend[i], report.predicted.trend[i]);
            let sum =
                report.truth.trend[i] + report.truth.seasonal[i] + report.truth.residual[i];
            assert!((sum - sig[i]).abs() < 1e-12);
        }
        assert!(decompose_report(&sig, &sig[..100], 24, 7).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, "a,b\n1,2\n").unwrap();
        write_atomic(&path, "a,b\n3,4\n").unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.contains("3,4"));
    }
}
