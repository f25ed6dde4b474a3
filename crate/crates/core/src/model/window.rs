//! Window and slab bookkeeping shared by training, evaluation, and rollout.
//!
//! The spectral model works on "slabs": a spectrogram segment rearranged into
//! a frequency-major token table `[F * S, 2 * tc]`, where each row is one
//! (frequency bin, compressed time step) cell and the columns hold the real
//! and imaginary channels of the `tc` frames that step covers. The time model
//! uses the degenerate slab `[W, 1]`.

use ndarray::Array2;

use crate::error::{AxError, Result};
use crate::model::{ModelConfig, ModelVariant};
use crate::spectral::{stft, Spectrogram};

pub type Mat = Array2<f64>;

/// Convert `n_steps` compressed steps of `spec` starting at `start_frame`
/// into a frequency-major slab `[F * n_steps, 2 * tc]`.
pub fn spec_to_slab(spec: &Spectrogram, start_frame: usize, n_steps: usize, tc: usize) -> Mat {
    let f_bins = spec.n_bins();
    let mut slab = Mat::zeros((f_bins * n_steps, 2 * tc));
    for f in 0..f_bins {
        for s in 0..n_steps {
            let row = f * n_steps + s;
            for j in 0..tc {
                let t = start_frame + s * tc + j;
                slab[[row, 2 * j]] = spec.real_part[[f, t]];
                slab[[row, 2 * j + 1]] = spec.imag_part[[f, t]];
            }
        }
    }
    slab
}

/// Inverse of [`spec_to_slab`]: slab `[F * n_steps, 2 * tc]` back to
/// real/imag channel matrices of `n_steps * tc` frames.
pub fn slab_to_channels(slab: &Mat, f_bins: usize, n_steps: usize, tc: usize) -> (Mat, Mat) {
    let frames = n_steps * tc;
    let mut real = Mat::zeros((f_bins, frames));
    let mut imag = Mat::zeros((f_bins, frames));
    for f in 0..f_bins {
        for s in 0..n_steps {
            let row = f * n_steps + s;
            for j in 0..tc {
                let t = s * tc + j;
                real[[f, t]] = slab[[row, 2 * j]];
                imag[[f, t]] = slab[[row, 2 * j + 1]];
            }
        }
    }
    (real, imag)
}

/// Samples consumed by `steps` model steps.
pub fn steps_to_samples(cfg: &ModelConfig, steps: usize) -> usize {
    match cfg.variant {
        ModelVariant::Sf => steps,
        ModelVariant::Ssf => {
            if steps == 0 {
                0
            } else {
                cfg.stft_frame_len() + (steps * cfg.time_compression - 1) * cfg.stft_hop()
            }
        }
    }
}

/// Minimum record length for one teacher-forced window
/// (source + target steps).
pub fn min_window_samples(cfg: &ModelConfig) -> usize {
    match cfg.variant {
        ModelVariant::Sf => cfg.src_len + cfg.tgt_len,
        ModelVariant::Ssf => {
            let steps = (cfg.src_len + cfg.tgt_len) * cfg.time_compression;
            cfg.stft_frame_len() + (steps - 1) * cfg.stft_hop()
        }
    }
}

/// One teacher-forced window in slab form.
#[derive(Debug, Clone)]
pub struct WindowSlabs {
    /// Encoder input: `[rows, C]`.
    pub enc: Mat,
    pub enc_grid: Option<(usize, usize)>,
    /// Decoder input (label context then shifted targets): `[rows, C]`.
    pub dec: Mat,
    pub dec_grid: Option<(usize, usize)>,
    /// Ground truth for the `tgt_len` predicted steps: `[rows, C]`.
    pub target: Mat,
    pub target_grid: Option<(usize, usize)>,
    /// Reference template slab aligned with the decoder steps, if any.
    pub reference: Option<Mat>,
}

impl WindowSlabs {
    pub fn dec_steps(cfg: &ModelConfig) -> usize {
        cfg.label_len() + cfg.tgt_len - 1
    }

    /// Row map extracting the `tgt_len` predicted steps from decoder output.
    pub fn output_row_map(cfg: &ModelConfig) -> Vec<usize> {
        let dec_steps = Self::dec_steps(cfg);
        let first = cfg.label_len() - 1;
        match cfg.variant {
            ModelVariant::Sf => (0..cfg.tgt_len).map(|i| first + i).collect(),
            ModelVariant::Ssf => {
                let f_bins = cfg.n_bins();
                let mut map = Vec::with_capacity(f_bins * cfg.tgt_len);
                for f in 0..f_bins {
                    for i in 0..cfg.tgt_len {
                        map.push(f * dec_steps + first + i);
                    }
                }
                map
            }
        }
    }
}

/// Build the teacher-forced slabs for the window of `record_samples`
/// starting at sample `start`. `reference_samples`, when given, must cover
/// the same index range as the record.
pub fn build_window(
    cfg: &ModelConfig,
    samples: &[f64],
    start: usize,
    sample_rate_hz: f64,
    reference_samples: Option<&[f64]>,
) -> Result<WindowSlabs> {
    let total = min_window_samples(cfg);
    if start + total > samples.len() {
        return Err(AxError::InsufficientContext(format!(
            "window needs {total} samples at offset {start}, record has {}",
            samples.len()
        )));
    }
    let label = cfg.label_len();
    let dec_steps = WindowSlabs::dec_steps(cfg);

    match cfg.variant {
        ModelVariant::Sf => {
            let src = &samples[start..start + cfg.src_len];
            let col = |xs: &[f64]| {
                Mat::from_shape_vec((xs.len(), 1), xs.to_vec()).expect("column")
            };
            // Decoder input: last `label` source samples, then targets shifted
            // by one (the value at step p predicts step p+1).
            let mut dec = Vec::with_capacity(dec_steps);
            dec.extend_from_slice(&src[cfg.src_len - label..]);
            dec.extend_from_slice(
                &samples[start + cfg.src_len..start + cfg.src_len + cfg.tgt_len - 1],
            );
            let target =
                &samples[start + cfg.src_len..start + cfg.src_len + cfg.tgt_len];
            Ok(WindowSlabs {
                enc: col(src),
                enc_grid: None,
                dec: col(&dec),
                dec_grid: None,
                target: col(target),
                target_grid: None,
                reference: None,
            })
        }
        ModelVariant::Ssf => {
            let tc = cfg.time_compression;
            let seg = &samples[start..start + total];
            let spec = stft(
                seg,
                cfg.stft_frame_len(),
                cfg.stft_hop(),
                cfg.stft_window(),
                sample_rate_hz,
            )?;
            let f_bins = cfg.n_bins();
            let total_steps = cfg.src_len + cfg.tgt_len;
            if spec.n_frames() < total_steps * tc {
                return Err(AxError::InsufficientContext(format!(
                    "window yields {} frames, need {}",
                    spec.n_frames(),
                    total_steps * tc
                )));
            }
            let enc = spec_to_slab(&spec, 0, cfg.src_len, tc);
            // Decoder: steps src_len-label .. src_len+tgt_len-1 shifted by one.
            let dec_first = cfg.src_len - label;
            let dec = spec_to_slab(&spec, dec_first * tc, dec_steps, tc);
            let target = spec_to_slab(&spec, cfg.src_len * tc, cfg.tgt_len, tc);
            let reference = match reference_samples {
                Some(refs) => {
                    if refs.len() < samples.len() {
                        return Err(AxError::ShapeMismatch(
                            "reference signal shorter than record".into(),
                        ));
                    }
                    let rseg = &refs[start..start + total];
                    let rspec = stft(
                        rseg,
                        cfg.stft_frame_len(),
                        cfg.stft_hop(),
                        cfg.stft_window(),
                        sample_rate_hz,
                    )?;
                    Some(spec_to_slab(&rspec, dec_first * tc, dec_steps, tc))
                }
                None => None,
            };
            Ok(WindowSlabs {
                enc,
                enc_grid: Some((f_bins, cfg.src_len)),
                dec,
                dec_grid: Some((f_bins, dec_steps)),
                target,
                target_grid: Some((f_bins, cfg.tgt_len)),
                reference,
            })
        }
    }
}
