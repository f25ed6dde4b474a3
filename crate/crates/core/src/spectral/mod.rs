//! Time-frequency transforms and harmonic analysis.
//!
//! Spectrograms keep the real and imaginary STFT channels separate (no
//! magnitude/phase form). Windows use the half-sample-offset periodic form so
//! that hann/hamming satisfy constant overlap-add at 50% hop and stay nonzero,
//! which keeps overlap-add reconstruction exact down to the record edges.

pub mod stl;

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{AxError, Result};

pub use stl::{stl_decompose, StlComponents};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Hamming,
    Rectangular,
}

impl WindowKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hann" => Ok(WindowKind::Hann),
            "hamming" => Ok(WindowKind::Hamming),
            "rectangular" | "rect" => Ok(WindowKind::Rectangular),
            other => Err(AxError::InvalidArgument(format!(
                "unknown window '{other}'"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
            WindowKind::Hamming => "hamming",
            WindowKind::Rectangular => "rectangular",
        }
    }

    /// Window samples, length `n`.
    pub fn samples(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let phase = 2.0 * PI * (i as f64 + 0.5) / n as f64;
                match self {
                    WindowKind::Hann => 0.5 * (1.0 - phase.cos()),
                    WindowKind::Hamming => 0.54 - 0.46 * phase.cos(),
                    WindowKind::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

/// One-sided STFT grid with real and imaginary parts as independent channels.
/// Shape is [F x T] with F = frame_len/2 + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub real_part: Mat,
    pub imag_part: Mat,
    pub frame_len: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub sample_rate_hz: f64,
}

impl Spectrogram {
    pub fn new(
        real_part: Mat,
        imag_part: Mat,
        frame_len: usize,
        hop: usize,
        window: WindowKind,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        if real_part.dim() != imag_part.dim() {
            return Err(AxError::ShapeMismatch(format!(
                "real {:?} vs imag {:?}",
                real_part.dim(),
                imag_part.dim()
            )));
        }
        if hop == 0 || frame_len == 0 {
            return Err(AxError::InvalidArgument(
                "frame_len and hop must be positive".into(),
            ));
        }
        if hop > frame_len {
            return Err(AxError::InvalidArgument(format!(
                "hop {hop} > frame_len {frame_len} would leave gaps"
            )));
        }
        let finite = real_part.iter().chain(imag_part.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(AxError::Numerical("non-finite spectrogram entry".into()));
        }
        Ok(Spectrogram {
            real_part,
            imag_part,
            frame_len,
            hop,
            window,
            sample_rate_hz,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.real_part.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.real_part.ncols()
    }

    /// Frequency in Hz of bin `f`.
    pub fn bin_hz(&self, f: usize) -> f64 {
        f as f64 * self.sample_rate_hz / self.frame_len as f64
    }

    pub fn magnitude(&self, f: usize, t: usize) -> f64 {
        let re = self.real_part[[f, t]];
        let im = self.imag_part[[f, t]];
        (re * re + im * im).sqrt()
    }

    /// CSV export: metadata comment, then one row per frequency bin per
    /// channel (`channel,bin_hz,v0,v1,...`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| AxError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| AxError::io(path.display().to_string(), e);
        writeln!(
            w,
            "# frame_len={},hop={},window={},sample_rate_hz={},bins={},frames={}",
            self.frame_len,
            self.hop,
            self.window.as_str(),
            self.sample_rate_hz,
            self.n_bins(),
            self.n_frames()
        )
        .map_err(io_err)?;
        writeln!(w, "channel,bin_hz,values...").map_err(io_err)?;
        for (name, chan) in [("real", &self.real_part), ("imag", &self.imag_part)] {
            for f in 0..self.n_bins() {
                let row: Vec<String> = chan.row(f).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{name},{},{}", self.bin_hz(f), row.join(","))
                    .map_err(io_err)?;
            }
        }
        Ok(())
    }
}

fn plan_fft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

fn plan_ifft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(n)
}

/// Short-time Fourier transform with `T = 1 + (len - frame_len) / hop` frames
/// and `F = frame_len/2 + 1` one-sided bins.
pub fn stft(
    signal: &[f64],
    frame_len: usize,
    hop: usize,
    window: WindowKind,
    sample_rate_hz: f64,
) -> Result<Spectrogram> {
    if hop == 0 {
        return Err(AxError::InvalidArgument("hop must be >= 1".into()));
    }
    if frame_len < 2 {
        return Err(AxError::InvalidArgument("frame_len must be >= 2".into()));
    }
    if signal.len() < frame_len {
        return Err(AxError::InvalidArgument(format!(
            "signal length {} shorter than frame_len {frame_len}",
            signal.len()
        )));
    }
    if hop > frame_len {
        return Err(AxError::InvalidArgument(format!(
            "hop {hop} > frame_len {frame_len} would leave gaps"
        )));
    }

    let n_frames = 1 + (signal.len() - frame_len) / hop;
    let n_bins = frame_len / 2 + 1;
    let win = window.samples(frame_len);
    let fft = plan_fft(frame_len);

    let mut real = Mat::zeros((n_bins, n_frames));
    let mut imag = Mat::zeros((n_bins, n_frames));
    let mut buf: Vec<Complex<f64>> = vec![Complex::default(); frame_len];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(signal[start + i] * win[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_bins {
            real[[f, t]] = buf[f].re;
            imag[[f, t]] = buf[f].im;
        }
    }
    Spectrogram::new(real, imag, frame_len, hop, window, sample_rate_hz)
}

/// Sum of shifted analysis windows at each output sample (the overlap-add
/// normalizer).
fn window_overlap_sum(win: &[f64], hop: usize, n_frames: usize, out_len: usize) -> Vec<f64> {
    let mut s = vec![0.0; out_len];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, &w) in win.iter().enumerate() {
            if start + i < out_len {
                s[start + i] += w;
            }
        }
    }
    s
}

/// Inverse STFT by overlap-add of inverse-DFT frames, normalized by the
/// window overlap sum. The configuration must satisfy amplitude COLA: the
/// overlap sum has to be flat over the interior of the reconstruction.
pub fn istft(spec: &Spectrogram, out_len: usize) -> Result<Vec<f64>> {
    if out_len == 0 {
        return Ok(Vec::new());
    }
    let frame_len = spec.frame_len;
    let hop = spec.hop;
    let n_frames = spec.n_frames();
    if spec.n_bins() != frame_len / 2 + 1 {
        return Err(AxError::ShapeMismatch(format!(
            "{} bins inconsistent with frame_len {frame_len}",
            spec.n_bins()
        )));
    }
    let natural_len = frame_len + (n_frames - 1) * hop;
    let win = spec.window.samples(frame_len);

    let overlap = window_overlap_sum(&win, hop, n_frames, natural_len);
    // COLA check over the fully-overlapped interior.
    if natural_len > 2 * frame_len {
        let interior = &overlap[frame_len..natural_len - frame_len];
        let mean = interior.iter().sum::<f64>() / interior.len() as f64;
        let max_dev = interior
            .iter()
            .map(|v| (v - mean).abs())
            .fold(0.0, f64::max);
        if max_dev > 1e-6 * mean.abs().max(1e-12) {
            return Err(AxError::InvalidArgument(format!(
                "window '{}' with frame_len {frame_len}, hop {hop} violates constant overlap-add \
                 (deviation {max_dev:.3e})",
                spec.window.as_str()
            )));
        }
    }
    if overlap.iter().any(|&s| s <= 1e-12) {
        return Err(AxError::InvalidArgument(
            "overlap-add normalizer vanishes; reconstruction impossible".into(),
        ));
    }

    let ifft = plan_ifft(frame_len);
    let mut acc = vec![0.0; natural_len];
    let mut buf: Vec<Complex<f64>> = vec![Complex::default(); frame_len];
    for t in 0..n_frames {
        // Rebuild the two-sided spectrum by conjugate symmetry.
        for f in 0..spec.n_bins() {
            buf[f] = Complex::new(spec.real_part[[f, t]], spec.imag_part[[f, t]]);
        }
        for f in spec.n_bins()..frame_len {
            let mirror = frame_len - f;
            buf[f] = Complex::new(spec.real_part[[mirror, t]], -spec.imag_part[[mirror, t]]);
        }
        ifft.process(&mut buf);
        let start = t * hop;
        let norm = 1.0 / frame_len as f64;
        for i in 0..frame_len {
            acc[start + i] += buf[i].re * norm;
        }
    }
    let mut out = vec![0.0; out_len];
    for (i, o) in out.iter_mut().enumerate().take(natural_len.min(out_len)) {
        *o = acc[i] / overlap[i];
    }
    Ok(out)
}

/// 2-D average pooling applied independently to both channels. Output metadata
/// carries the effective downsampling (hop and frame length scaled by the
/// strides).
pub fn avg_pool2d(
    spec: &Spectrogram,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Spectrogram> {
    let (kf, kt) = kernel;
    let (sf, st) = stride;
    let (nf, nt) = spec.real_part.dim();
    if kf == 0 || kt == 0 || sf == 0 || st == 0 {
        return Err(AxError::InvalidArgument(
            "pool kernel and stride must be positive".into(),
        ));
    }
    if kf > nf || kt > nt {
        return Err(AxError::InvalidArgument(format!(
            "pool kernel ({kf},{kt}) exceeds spectrogram shape ({nf},{nt})"
        )));
    }
    let real = pool_channel(&spec.real_part, kernel, stride);
    let imag = pool_channel(&spec.imag_part, kernel, stride);
    let frame_len = (spec.frame_len * sf).max(spec.hop * st);
    Spectrogram::new(
        real,
        imag,
        frame_len,
        spec.hop * st,
        spec.window,
        spec.sample_rate_hz,
    )
}

pub(crate) fn pool_channel(chan: &Mat, kernel: (usize, usize), stride: (usize, usize)) -> Mat {
    let (kf, kt) = kernel;
    let (sf, st) = stride;
    let (nf, nt) = chan.dim();
    let of = (nf - kf) / sf + 1;
    let ot = (nt - kt) / st + 1;
    let inv = 1.0 / (kf * kt) as f64;
    let mut out = Mat::zeros((of, ot));
    for i in 0..of {
        for j in 0..ot {
            let mut sum = 0.0;
            for di in 0..kf {
                for dj in 0..kt {
                    sum += chan[[i * sf + di, j * st + dj]];
                }
            }
            out[[i, j]] = sum * inv;
        }
    }
    out
}

/// Time-averaged magnitude at the bin nearest each harmonic k*f0,
/// k = 1..n_harmonics.
pub fn harmonic_peak_amplitudes(
    spec: &Spectrogram,
    f0_hz: f64,
    n_harmonics: usize,
) -> Result<Vec<f64>> {
    if !(f0_hz > 0.0) || n_harmonics == 0 {
        return Err(AxError::InvalidArgument(
            "f0_hz and n_harmonics must be positive".into(),
        ));
    }
    let nyquist = spec.sample_rate_hz / 2.0;
    if f0_hz * n_harmonics as f64 >= nyquist {
        return Err(AxError::InvalidArgument(format!(
            "harmonic {n_harmonics} at {:.3} Hz >= Nyquist {:.3} Hz",
            f0_hz * n_harmonics as f64,
            nyquist
        )));
    }
    let bin_width = spec.sample_rate_hz / spec.frame_len as f64;
    let n_frames = spec.n_frames().max(1) as f64;
    let mut out = Vec::with_capacity(n_harmonics);
    for k in 1..=n_harmonics {
        let bin = ((k as f64 * f0_hz / bin_width).round() as usize).min(spec.n_bins() - 1);
        let mut sum = 0.0;
        for t in 0..spec.n_frames() {
            sum += spec.magnitude(bin, t);
        }
        out.push(sum / n_frames);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        synth_record, FlawLevel, Rotation, SensorOrientation, SensorSide, SynthConfig,
        TestCondition,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    /// Brute-force DFT of one windowed frame (oracle, independent of rustfft).
    fn dense_dft_frame(frame: &[f64]) -> Vec<(f64, f64)> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * k as f64 * i as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let spec = stft(&vec![0.0; 256], 64, 32, WindowKind::Hann, 256.0).unwrap();
        assert!(spec.real_part.iter().all(|&v| v == 0.0));
        assert!(spec.imag_part.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_match_contract() {
        let spec = stft(&vec![0.0; 300], 64, 16, WindowKind::Hann, 256.0).unwrap();
        assert_eq!(spec.n_bins(), 33);
        assert_eq!(spec.n_frames(), 1 + (300 - 64) / 16);
    }

    #[test]
    fn on_bin_sinusoid_concentrates_in_one_row() {
        // Bin m=8 of a 64-sample rectangular frame at fs=64: f = 8 Hz.
        let n = 256;
        let fs = 64.0;
        let sig: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * 8.0 * i as f64 / fs).sin())
            .collect();
        let spec = stft(&sig, 64, 64, WindowKind::Rectangular, fs).unwrap();
        for t in 0..spec.n_frames() {
            for f in 0..spec.n_bins() {
                let mag = spec.magnitude(f, t);
                if f == 8 {
                    assert!(mag > 1.0, "expected energy at bin 8, got {mag}");
                } else {
                    assert!(mag < 1e-9, "leakage at bin {f}: {mag}");
                }
            }
        }
    }

    #[test]
    fn stft_matches_dense_dft_oracle() {
        let sig = random_signal(200, 3);
        let frame_len = 32;
        let hop = 16;
        let spec = stft(&sig, frame_len, hop, WindowKind::Hamming, 256.0).unwrap();
        let win = WindowKind::Hamming.samples(frame_len);
        for t in 0..spec.n_frames() {
            let frame: Vec<f64> = (0..frame_len)
                .map(|i| sig[t * hop + i] * win[i])
                .collect();
            let oracle = dense_dft_frame(&frame);
            for (f, &(re, im)) in oracle.iter().enumerate() {
                assert!((spec.real_part[[f, t]] - re).abs() < 1e-9);
                assert!((spec.imag_part[[f, t]] - im).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn windowed_energy_matches_direct_summation() {
        // Per-frame DFT energy (Parseval) must equal the directly summed
        // windowed energy, which in turn is the signal energy weighted by the
        // squared-window overlap (its COLA normalizer).
        let sig = random_signal(512, 9);
        let frame_len = 64;
        let hop = 32;
        let spec = stft(&sig, frame_len, hop, WindowKind::Hann, 256.0).unwrap();

        // Spectral energy: two-sided sum / N per frame.
        let mut spectral = 0.0;
        for t in 0..spec.n_frames() {
            for f in 0..spec.n_bins() {
                let e = spec.real_part[[f, t]].powi(2) + spec.imag_part[[f, t]].powi(2);
                let weight = if f == 0 || f == frame_len / 2 { 1.0 } else { 2.0 };
                spectral += weight * e;
            }
        }
        spectral /= frame_len as f64;

        // Direct summation oracle.
        let win = WindowKind::Hann.samples(frame_len);
        let mut direct = 0.0;
        for t in 0..spec.n_frames() {
            for i in 0..frame_len {
                direct += (sig[t * hop + i] * win[i]).powi(2);
            }
        }
        assert!(
            (spectral - direct).abs() < 1e-9 * direct.max(1.0),
            "spectral {spectral} vs direct {direct}"
        );

        // And the same energy expressed through the squared-window overlap sum.
        let win_sq: Vec<f64> = win.iter().map(|w| w * w).collect();
        let s = window_overlap_sum(&win_sq, hop, spec.n_frames(), 512);
        let weighted: f64 = sig.iter().zip(s.iter()).map(|(x, w)| x * x * w).sum();
        assert!((weighted - direct).abs() < 1e-9 * direct.max(1.0));
    }

    #[test]
    fn istft_round_trip_hann_half_hop() {
        for &frame_len in &[32usize, 64] {
            let sig = random_signal(4 * frame_len + frame_len / 2, 11);
            let spec = stft(&sig, frame_len, frame_len / 2, WindowKind::Hann, 256.0).unwrap();
            let back = istft(&spec, sig.len()).unwrap();
            let err = sig
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "round trip error {err} at frame {frame_len}");
        }
    }

    #[test]
    fn istft_zero_and_truncation() {
        let spec = stft(&vec![0.0; 128], 32, 16, WindowKind::Hann, 256.0).unwrap();
        let out = istft(&spec, 128).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let sig = random_signal(128, 5);
        let spec = stft(&sig, 32, 16, WindowKind::Hann, 256.0).unwrap();
        let full = istft(&spec, 128).unwrap();
        let short = istft(&spec, 50).unwrap();
        assert_eq!(&full[..50], &short[..]);
    }

    #[test]
    fn istft_rejects_non_cola_setup() {
        // Hann at hop == frame_len does not overlap-add to a constant.
        let sig = random_signal(512, 2);
        let spec = stft(&sig, 32, 32, WindowKind::Hann, 256.0).unwrap();
        let err = istft(&spec, 512).unwrap_err();
        assert!(matches!(err, AxError::InvalidArgument(_)));
    }

    #[test]
    fn stft_linearity() {
        let x = random_signal(256, 21);
        let y = random_signal(256, 22);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let sx = stft(&x, 64, 32, WindowKind::Hann, 256.0).unwrap();
        let sy = stft(&y, 64, 32, WindowKind::Hann, 256.0).unwrap();
        let sc = stft(&combo, 64, 32, WindowKind::Hann, 256.0).unwrap();
        for t in 0..sc.n_frames() {
            for f in 0..sc.n_bins() {
                let want = 2.0 * sx.real_part[[f, t]] - 0.5 * sy.real_part[[f, t]];
                assert!((sc.real_part[[f, t]] - want).abs() < 1e-9);
                let want = 2.0 * sx.imag_part[[f, t]] - 0.5 * sy.imag_part[[f, t]];
                assert!((sc.imag_part[[f, t]] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool_identity_and_constant() {
        let sig = random_signal(256, 31);
        let spec = stft(&sig, 32, 16, WindowKind::Hann, 256.0).unwrap();
        let same = avg_pool2d(&spec, (1, 1), (1, 1)).unwrap();
        assert_eq!(same.real_part, spec.real_part);

        let c = Spectrogram::new(
            Mat::from_elem((4, 6), 3.25),
            Mat::from_elem((4, 6), -1.5),
            8,
            4,
            WindowKind::Rectangular,
            64.0,
        )
        .unwrap();
        let pooled = avg_pool2d(&c, (2, 3), (2, 3)).unwrap();
        assert_eq!(pooled.real_part.dim(), (2, 2));
        assert!(pooled.real_part.iter().all(|&v| (v - 3.25).abs() < 1e-12));
        assert!(pooled.imag_part.iter().all(|&v| (v + 1.5).abs() < 1e-12));
    }

    #[test]
    fn pool_two_by_two_mean() {
        let chan = Mat::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pool_channel(&chan, (2, 2), (2, 2));
        assert_eq!(out.dim(), (1, 1));
        assert!((out[[0, 0]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pool_output_within_input_range() {
        let sig = random_signal(300, 17);
        let spec = stft(&sig, 32, 8, WindowKind::Hamming, 256.0).unwrap();
        let pooled = avg_pool2d(&spec, (3, 4), (2, 3)).unwrap();
        for (chan, pooled_chan) in [
            (&spec.real_part, &pooled.real_part),
            (&spec.imag_part, &pooled.imag_part),
        ] {
            let lo = chan.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = chan.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in pooled_chan.iter() {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pool_rejects_oversized_kernel() {
        let sig = random_signal(64, 1);
        let spec = stft(&sig, 32, 16, WindowKind::Hann, 256.0).unwrap();
        assert!(avg_pool2d(&spec, (64, 1), (1, 1)).is_err());
    }

    #[test]
    fn harmonic_amplitudes_zero_for_zero_spec() {
        let spec = stft(&vec![0.0; 512], 128, 64, WindowKind::Hann, 256.0).unwrap();
        let amps = harmonic_peak_amplitudes(&spec, 2.0, 5).unwrap();
        assert!(amps.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn harmonics_grow_with_crack_depth() {
        let cfg = SynthConfig::default();
        let mk = |flaw| {
            let c = TestCondition::new(
                flaw,
                4.0,
                20.0,
                Rotation::Clockwise,
                SensorSide::Lhs,
                SensorOrientation::Vertical,
            );
            synth_record(&c, 8.0, 256.0, 0.0, 13).unwrap()
        };
        let healthy = mk(FlawLevel::D0);
        let cracked = mk(FlawLevel::D3);
        let f0 = cfg.fundamental_hz(20.0);
        // Long frames for enough resolution to separate harmonics of ~1.9 Hz.
        let sh = stft(&healthy.samples, 512, 256, WindowKind::Hann, 256.0).unwrap();
        let sc = stft(&cracked.samples, 512, 256, WindowKind::Hann, 256.0).unwrap();
        let ah = harmonic_peak_amplitudes(&sh, f0, 5).unwrap();
        let ac = harmonic_peak_amplitudes(&sc, f0, 5).unwrap();
        // Records are z-scored, so compare shares above the fundamental.
        for k in 1..5 {
            assert!(
                ac[k] / ac[0] > ah[k] / ah[0],
                "harmonic {} ratio D3 {} <= D0 {}",
                k + 1,
                ac[k] / ac[0],
                ah[k] / ah[0]
            );
        }
    }

    #[test]
    fn harmonic_linearity_in_amplitude() {
        let fs = 64.0;
        let make = |a: f64| -> Vec<f64> {
            (0..512)
                .map(|i| a * (2.0 * PI * 8.0 * i as f64 / fs).sin())
                .collect()
        };
        let mut prev_ratio = None;
        for &a in &[1.0, 2.0, 4.0] {
            let spec = stft(&make(a), 64, 64, WindowKind::Rectangular, fs).unwrap();
            let amp = harmonic_peak_amplitudes(&spec, 8.0, 1).unwrap()[0];
            let ratio = amp / a;
            if let Some(p) = prev_ratio {
                assert!((ratio - p as f64).abs() < 1e-9 * amp.max(1.0));
            }
            prev_ratio = Some(ratio);
        }
    }

    #[test]
    fn harmonic_rejects_nyquist() {
        let sig = random_signal(256, 1);
        let spec = stft(&sig, 64, 32, WindowKind::Hann, 64.0).unwrap();
        assert!(harmonic_peak_amplitudes(&spec, 10.0, 4).is_err());
    }
}
