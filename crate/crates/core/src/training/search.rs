//! Random hyperparameter search over the tested ranges.
//!
//! Learning rate is sampled log-uniformly, integer parameters uniformly
//! (kernels snapped to odd). Every trial trains with the same data seed and a
//! reduced epoch cap; results are ranked by validation loss and exported as a
//! sweep table.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{derive_seed, DatasetSplit};
use crate::error::{AxError, Result};
use crate::model::{ModelConfig, ModelVariant};
use crate::training::{train, LossDomain, TrainConfig};

/// Inclusive (min, max) bounds per hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub avg_pool_kernel: (usize, usize),
    pub avg_pool_stride: (usize, usize),
    pub hi_dilation: (usize, usize),
    pub lo_dilation: (usize, usize),
    pub dropout: (f64, f64),
    pub elt_kernel: (usize, usize),
    pub n_heads_hi: (usize, usize),
    pub n_heads_lo: (usize, usize),
    pub time_resolution: (usize, usize),
    pub learning_rate: (f64, f64),
    pub mean_kernel: (usize, usize),
    pub n_encoder_layers: (usize, usize),
    pub freq_resolution: (usize, usize),
    pub time_compression: (usize, usize),
    pub variance_kernel: (usize, usize),
}

impl Default for SearchSpace {
    /// The tested ranges of the reference hyperparameter table.
    fn default() -> Self {
        SearchSpace {
            avg_pool_kernel: (3, 27),
            avg_pool_stride: (1, 5),
            hi_dilation: (0, 15),
            lo_dilation: (15, 25),
            dropout: (0.1, 0.6),
            elt_kernel: (3, 27),
            n_heads_hi: (1, 6),
            n_heads_lo: (1, 6),
            time_resolution: (8, 16),
            learning_rate: (1e-4, 1e-2),
            mean_kernel: (3, 27),
            n_encoder_layers: (1, 4),
            freq_resolution: (1, 30),
            time_compression: (1, 5),
            variance_kernel: (3, 27),
        }
    }
}

impl SearchSpace {
    /// A desk-scale space that keeps every sampled trial trainable on short
    /// synthetic records.
    pub fn desk_scale() -> Self {
        SearchSpace {
            avg_pool_kernel: (2, 4),
            avg_pool_stride: (1, 2),
            hi_dilation: (0, 2),
            lo_dilation: (1, 3),
            dropout: (0.0, 0.3),
            elt_kernel: (3, 7),
            n_heads_hi: (1, 2),
            n_heads_lo: (1, 2),
            time_resolution: (8, 16),
            learning_rate: (1e-3, 1e-2),
            mean_kernel: (3, 7),
            n_encoder_layers: (1, 2),
            freq_resolution: (1, 3),
            time_compression: (1, 2),
            variance_kernel: (3, 7),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_u = |(lo, hi): (usize, usize)| lo <= hi;
        let ok_f = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        if !(ok_u(self.avg_pool_kernel)
            && ok_u(self.avg_pool_stride)
            && ok_u(self.hi_dilation)
            && ok_u(self.lo_dilation)
            && ok_f(self.dropout)
            && ok_u(self.elt_kernel)
            && ok_u(self.n_heads_hi)
            && ok_u(self.n_heads_lo)
            && ok_u(self.time_resolution)
            && ok_f(self.learning_rate)
            && ok_u(self.mean_kernel)
            && ok_u(self.n_encoder_layers)
            && ok_u(self.freq_resolution)
            && ok_u(self.time_compression)
            && ok_u(self.variance_kernel))
        {
            return Err(AxError::InvalidArgument(
                "search space bounds must satisfy min <= max".into(),
            ));
        }
        if self.learning_rate.0 <= 0.0 {
            return Err(AxError::InvalidArgument(
                "learning-rate bounds must be positive for log sampling".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub trial: usize,
    pub params: Vec<(String, String)>,
    pub val_loss: Option<f64>,
    pub error: Option<String>,
}

fn sample_int(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn sample_odd(rng: &mut ChaCha8Rng, bounds: (usize, usize)) -> usize {
    let v = sample_int(rng, bounds);
    let v = if v % 2 == 0 { v + 1 } else { v };
    v.clamp(3, bounds.1.max(3) | 1)
}

fn sample_f64(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

fn sample_log(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
    }
}

/// Sample one trial configuration from the space, anchored on `base`.
/// d_model follows the head count at the base head width.
pub fn sample_trial(
    space: &SearchSpace,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (ModelConfig, TrainConfig, Vec<(String, String)>) {
    let mut m = base_model.clone();
    let mut t = base_train.clone();

    let head_dim = base_model.attention.head_dim().max(2);
    m.attention.n_heads_hi = sample_int(rng, space.n_heads_hi);
    m.attention.n_heads_lo = match base_model.variant {
        ModelVariant::Sf => 0,
        ModelVariant::Ssf => sample_int(rng, space.n_heads_lo),
    };
    if m.attention.n_heads() == 0 {
        m.attention.n_heads_hi = 1;
    }
    m.attention.d_model = head_dim * m.attention.n_heads();
    let pk = sample_int(rng, space.avg_pool_kernel);
    let ps = sample_int(rng, space.avg_pool_stride);
    m.attention.lo_pool_kernel = (pk, pk);
    m.attention.lo_pool_stride = (ps, ps);
    m.attention.hi_dilation = sample_int(rng, space.hi_dilation);
    m.attention.lo_dilation = sample_int(rng, space.lo_dilation);
    m.elt_kernel = sample_odd(rng, space.elt_kernel);
    m.mean_kernel = sample_odd(rng, space.mean_kernel);
    m.variance_kernel = sample_odd(rng, space.variance_kernel);
    m.dropout = sample_f64(rng, space.dropout);
    m.n_encoder_layers = sample_int(rng, space.n_encoder_layers);
    if base_model.variant == ModelVariant::Ssf {
        m.time_resolution = sample_int(rng, space.time_resolution);
        m.freq_resolution = sample_int(rng, space.freq_resolution);
        m.time_compression = sample_int(rng, space.time_compression);
        // Keep the pooled grid non-empty.
        let f_bins = m.n_bins();
        let kf = m.attention.lo_pool_kernel.0.min(f_bins).max(1);
        let kt = m.attention.lo_pool_kernel.1.min(m.src_len).max(1);
        m.attention.lo_pool_kernel = (kf, kt);
    } else if (m.src_len >> m.n_encoder_layers) == 0 {
        m.n_encoder_layers = 1;
    }
    t.learning_rate = sample_log(rng, space.learning_rate);

    let fmt_f = |v: f64| format!("{v:.6}");
    let params = vec![
        ("avg_pool_kernel".into(), m.attention.lo_pool_kernel.0.to_string()),
        ("avg_pool_stride".into(), m.attention.lo_pool_stride.0.to_string()),
        ("hi_dilation".into(), m.attention.hi_dilation.to_string()),
        ("lo_dilation".into(), m.attention.lo_dilation.to_string()),
        ("dropout".into(), fmt_f(m.dropout)),
        ("elt_kernel".into(), m.elt_kernel.to_string()),
        ("n_heads_hi".into(), m.attention.n_heads_hi.to_string()),
        ("n_heads_lo".into(), m.attention.n_heads_lo.to_string()),
        ("time_resolution".into(), m.time_resolution.to_string()),
        ("learning_rate".into(), format!("{:.6e}", t.learning_rate)),
        ("mean_kernel".into(), m.mean_kernel.to_string()),
        ("n_encoder_layers".into(), m.n_encoder_layers.to_string()),
        ("freq_resolution".into(), m.freq_resolution.to_string()),
        ("time_compression".into(), m.time_compression.to_string()),
        ("variance_kernel".into(), m.variance_kernel.to_string()),
    ];
    (m, t, params)
}

/// Random search: `budget` trials, each trained with `epoch_cap` epochs on
/// the shared split and data seed. Per-trial failures are recorded, not
/// fatal. The result is sorted ascending by validation loss.
pub fn hyperparameter_search(
    space: &SearchSpace,
    budget: usize,
    split: &DatasetSplit,
    seed: u64,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    epoch_cap: usize,
) -> Result<Vec<TrialResult>> {
    if budget == 0 {
        return Err(AxError::InvalidArgument("budget must be >= 1".into()));
    }
    space.validate()?;
    let mut results = Vec::with_capacity(budget);
    for trial in 0..budget {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial as u64));
        let (m, mut t, params) = sample_trial(space, base_model, base_train, &mut rng);
        t.max_epochs = epoch_cap.max(1);
        t.loss_domain = LossDomain::for_variant(m.variant);
        let outcome = m
            .validate()
            .and_then(|_| train(&m, &t, split))
            .map(|(_, history)| {
                history
                    .iter()
                    .map(|e| e.val_loss)
                    .fold(f64::INFINITY, f64::min)
            });
        match outcome {
            Ok(loss) => results.push(TrialResult {
                trial,
                params,
                val_loss: Some(loss),
                error: None,
            }),
            Err(e) => results.push(TrialResult {
                trial,
                params,
                val_loss: None,
                error: Some(e.to_string()),
            }),
        }
    }
    results.sort_by(|a, b| match (a.val_loss, b.val_loss) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap(),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.trial.cmp(&b.trial),
    });
    Ok(results)
}

/// Sweep table: `trial,param...,val_loss,error`.
pub fn write_sweep_csv(path: &Path, results: &[TrialResult]) -> Result<()> {
    let file = File::create(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| AxError::io(path.display().to_string(), e);
    if results.is_empty() {
        writeln!(w, "trial,val_loss,error").map_err(io_err)?;
        return Ok(());
    }
    let header: Vec<&str> = results[0].params.iter().map(|(k, _)| k.as_str()).collect();
    writeln!(w, "trial,{},val_loss,error", header.join(",")).map_err(io_err)?;
    for r in results {
        let values: Vec<&str> = r.params.iter().map(|(_, v)| v.as_str()).collect();
        writeln!(
            w,
            "{},{},{},{}",
            r.trial,
            values.join(","),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default()
        )
        .map_err(io_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::dataset::{split_dataset, synth_grid};

    fn base_sf() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
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
        };
        let t = TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 2,
            batch_size: 8,
            early_stop_patience: 5,
            seed: 1,
            loss_domain: LossDomain::Time,
            windows_per_record: 1,
        };
        (m, t)
    }

    fn split() -> DatasetSplit {
        let records = synth_grid(1, 1.0, 256.0, 0.05, 21).unwrap();
        split_dataset(&records[..8], (0.7, 0.2, 0.1), 9).unwrap()
    }

    #[test]
    fn budget_one_returns_one_trial() {
        let (m, t) = base_sf();
        let results =
            hyperparameter_search(&SearchSpace::desk_scale(), 1, &split(), 3, &m, &t, 1).unwrap();
        assert_eq!(results.len(), 1);
        assert!(results[0].val_loss.is_some(), "{:?}", results[0].error);
    }

    #[test]
    fn collapsed_space_gives_identical_losses() {
        let (m, t) = base_sf();
        let space = SearchSpace {
            avg_pool_kernel: (2, 2),
            avg_pool_stride: (1, 1),
            hi_dilation: (1, 1),
            lo_dilation: (1, 1),
            dropout: (0.0, 0.0),
            elt_kernel: (3, 3),
            n_heads_hi: (2, 2),
            n_heads_lo: (1, 1),
            time_resolution: (16, 16),
            learning_rate: (3e-3, 3e-3),
            mean_kernel: (3, 3),
            n_encoder_layers: (1, 1),
            freq_resolution: (2, 2),
            time_compression: (1, 1),
            variance_kernel: (3, 3),
        };
        let results = hyperparameter_search(&space, 3, &split(), 5, &m, &t, 1).unwrap();
        let losses: Vec<f64> = results.iter().map(|r| r.val_loss.unwrap()).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
    }

    #[test]
    fn results_sorted_ascending() {
        let (m, t) = base_sf();
        let results =
            hyperparameter_search(&SearchSpace::desk_scale(), 4, &split(), 11, &m, &t, 1).unwrap();
        let losses: Vec<f64> = results.iter().filter_map(|r| r.val_loss).collect();
        assert!(losses.windows(2).all(|w| w[0] <= w[1]), "{losses:?}");
    }
}
