//! Seasonal-trend decomposition by LOESS (classic two-loop STL).

use serde::{Deserialize, Serialize};

use crate::error::{AxError, Result};

/// Decomposition result. The residual is defined by subtraction, so
/// `trend + seasonal + residual` reconstructs the input exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StlComponents {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub residual: Vec<f64>,
    pub period: usize,
}

impl StlComponents {
    pub fn len(&self) -> usize {
        self.trend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trend.is_empty()
    }
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let c = 1.0 - u * u * u;
        c * c * c
    }
}

/// Locally weighted degree-1 regression over `span` nearest neighbours,
/// evaluated at every integer position in `eval`. `robust` multiplies the
/// neighbourhood weights when present.
fn loess_smooth(y: &[f64], span: usize, robust: Option<&[f64]>, eval: &[i64]) -> Vec<f64> {
    let n = y.len();
    let span = span.min(n).max(2);
    let mut out = Vec::with_capacity(eval.len());
    for &pos in eval {
        // Nearest-neighbour window of `span` points around pos, clamped.
        let half = span / 2;
        let mut lo = pos - half as i64;
        if lo < 0 {
            lo = 0;
        }
        if lo as usize + span > n {
            lo = (n - span) as i64;
        }
        let lo = lo as usize;
        let hi = lo + span;
        let dmax = (0..span)
            .map(|i| ((lo + i) as i64 - pos).abs() as f64)
            .fold(0.0, f64::max)
            .max(1.0);

        // Weighted linear fit in x = index - pos.
        let (mut sw, mut swx, mut swxx, mut swy, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in lo..hi {
            let x = i as i64 - pos;
            let mut w = tricube((x.abs() as f64) / dmax);
            if let Some(r) = robust {
                w *= r[i];
            }
            if w <= 0.0 {
                continue;
            }
            let xf = x as f64;
            sw += w;
            swx += w * xf;
            swxx += w * xf * xf;
            swy += w * y[i];
            swxy += w * xf * y[i];
        }
        let denom = sw * swxx - swx * swx;
        let value = if sw <= 0.0 {
            y[pos.clamp(0, n as i64 - 1) as usize]
        } else if denom.abs() < 1e-12 * sw.abs().max(1.0) {
            swy / sw
        } else {
            // Intercept at x = 0 (the evaluation point).
            (swxx * swy - swx * swxy) / denom
        };
        out.push(value);
    }
    out
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    if window >= n {
        let mean = x.iter().sum::<f64>() / n as f64;
        return vec![mean; 1];
    }
    let mut out = Vec::with_capacity(n - window + 1);
    let mut sum: f64 = x[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..n {
        sum += x[i] - x[i - window];
        out.push(sum / window as f64);
    }
    out
}

fn next_odd(v: usize) -> usize {
    if v % 2 == 0 {
        v + 1
    } else {
        v
    }
}

/// Classic STL: cycle-subseries LOESS for the seasonal, low-pass filtering,
/// LOESS for the trend, two inner passes and one robustness-weighted repeat.
pub fn stl_decompose(signal: &[f64], period: usize, loess_span: usize) -> Result<StlComponents> {
    let n = signal.len();
    if period < 2 {
        return Err(AxError::InvalidArgument(format!(
            "period must be >= 2, got {period}"
        )));
    }
    if n < 2 * period {
        return Err(AxError::InvalidArgument(format!(
            "signal length {n} shorter than two periods ({})",
            2 * period
        )));
    }
    if loess_span < 3 || loess_span % 2 == 0 {
        return Err(AxError::InvalidArgument(format!(
            "loess_span must be odd and >= 3, got {loess_span}"
        )));
    }

    let n_s = loess_span;
    let n_l = next_odd(period);
    let n_t = {
        let raw = (1.5 * period as f64 / (1.0 - 1.5 / n_s as f64)).ceil() as usize;
        next_odd(raw.max(3))
    };

    let mut trend = vec![0.0; n];
    let mut seasonal = vec![0.0; n];
    let mut robust: Option<Vec<f64>> = None;

    for _outer in 0..2 {
        for _inner in 0..2 {
            // 1. Detrend.
            let detrended: Vec<f64> = signal.iter().zip(&trend).map(|(x, t)| x - t).collect();

            // 2. Cycle-subseries smoothing, extended one period on each side.
            let mut cycle = vec![0.0; n + 2 * period];
            for phase in 0..period {
                let idx: Vec<usize> = (phase..n).step_by(period).collect();
                let sub: Vec<f64> = idx.iter().map(|&i| detrended[i]).collect();
                let subr: Option<Vec<f64>> =
                    robust.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect());
                let eval: Vec<i64> = (-1..=sub.len() as i64).collect();
                let smoothed = loess_smooth(&sub, n_s, subr.as_deref(), &eval);
                for (j, &v) in smoothed.iter().enumerate() {
                    // j = 0 maps to one period before the first occurrence.
                    let slot = phase + j * period;
                    if slot < cycle.len() {
                        cycle[slot] = v;
                    }
                }
            }

            // 3. Low-pass: MA(period) x2, MA(3), then LOESS(n_l).
            let lp = moving_average(&cycle, period);
            let lp = moving_average(&lp, period);
            let lp = moving_average(&lp, 3);
            let eval: Vec<i64> = (0..lp.len() as i64).collect();
            let lp = loess_smooth(&lp, n_l, None, &eval);

            // 4. Seasonal = extended subseries minus low-pass, middle slice.
            for i in 0..n {
                let low = if i < lp.len() { lp[i] } else { *lp.last().unwrap() };
                seasonal[i] = cycle[i + period] - low;
            }

            // 5. Trend = LOESS of the deseasonalized series.
            let deseason: Vec<f64> = signal.iter().zip(&seasonal).map(|(x, s)| x - s).collect();
            let eval: Vec<i64> = (0..n as i64).collect();
            trend = loess_smooth(&deseason, n_t, robust.as_deref(), &eval);
        }

        // Robustness weights from the remainder (bisquare).
        let resid: Vec<f64> = (0..n)
            .map(|i| signal[i] - trend[i] - seasonal[i])
            .collect();
        let mut abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = abs[n / 2].max(1e-12);
        let h = 6.0 * median;
        robust = Some(
            resid
                .iter()
                .map(|r| {
                    let u = (r.abs() / h).min(1.0);
                    let c = 1.0 - u * u;
                    c * c
                })
                .collect(),
        );
    }

    let residual: Vec<f64> = (0..n)
        .map(|i| signal[i] - trend[i] - seasonal[i])
        .collect();
    Ok(StlComponents {
        trend,
        seasonal,
        residual,
        period,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn variance(x: &[f64]) -> f64 {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn constant_signal_decomposes_trivially() {
        let sig = vec![4.2; 120];
        let out = stl_decompose(&sig, 12, 7).unwrap();
        for i in 0..sig.len() {
            assert!((out.trend[i] - 4.2).abs() < 1e-9, "trend[{i}] = {}", out.trend[i]);
            assert!(out.seasonal[i].abs() < 1e-9);
            assert!(out.residual[i].abs() < 1e-9);
        }
    }

    #[test]
    fn component_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sig: Vec<f64> = (0..240)
            .map(|i| {
                (i as f64 * 0.02).sin() * 3.0
                    + (2.0 * std::f64::consts::PI * i as f64 / 24.0).cos()
                    + rng.random::<f64>()
            })
            .collect();
        let out = stl_decompose(&sig, 24, 9).unwrap();
        for i in 0..sig.len() {
            let sum = out.trend[i] + out.seasonal[i] + out.residual[i];
            assert!((sum - sig[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_lands_in_seasonal() {
        let period = 20usize;
        let sig: Vec<f64> = (0..200)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / period as f64).sin())
            .collect();
        let out = stl_decompose(&sig, period, 7).unwrap();
        let var_ratio = variance(&out.seasonal) / variance(&sig);
        assert!(var_ratio >= 0.95, "seasonal variance share {var_ratio}");
    }

    #[test]
    fn rejects_short_signal_and_bad_span() {
        let sig = vec![0.0; 30];
        assert!(stl_decompose(&sig, 20, 7).is_err());
        let sig = vec![0.0; 100];
        assert!(stl_decompose(&sig, 10, 4).is_err());
        assert!(stl_decompose(&sig, 10, 1).is_err());
    }
}
