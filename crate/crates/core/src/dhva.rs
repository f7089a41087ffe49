//! Windowed FFT of a response sampled on a uniform 1/ħ grid (de Haas–van Alphen spectroscopy).
//!
//! A component cos(S/ħ) appears at frequency S/2π in cycles per unit of 1/ħ.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_POINTS: usize = 256;

#[derive(Clone, Copy, Debug)]
pub struct FftOptions {
    /// Zero-padding factor applied after rounding the length up to a power of two.
    pub padding: usize,
    /// Peaks below this fraction of the largest peak are dropped.
    pub relative_threshold: f64,
    /// Peaks below this multiple of the median spectral magnitude are dropped.
    pub noise_factor: f64,
}

impl Default for FftOptions {
    fn default() -> Self {
        FftOptions { padding: 8, relative_threshold: 0.05, noise_factor: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Peak {
    /// Frequency in cycles per unit of 1/ħ, i.e. S/2π.
    pub frequency: f64,
    /// Amplitude of the matching cosine component, corrected for the window gain.
    pub amplitude: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Spectrum {
    /// 1/(grid span).
    pub resolution: f64,
    pub frequencies: Vec<f64>,
    /// Window-corrected amplitude spectrum.
    pub amplitudes: Vec<f64>,
    pub peaks: Vec<Peak>,
}

impl Spectrum {
    /// Largest amplitude within `bins` resolution bins of `frequency`.
    pub fn amplitude_near(&self, frequency: f64, bins: f64) -> f64 {
        let w = bins * self.resolution;
        self.frequencies
            .iter()
            .zip(&self.amplitudes)
            .filter(|(f, _)| (**f - frequency).abs() <= w)
            .map(|(_, a)| *a)
            .fold(0.0, f64::max)
    }

    /// The reported peak closest to `frequency`.
    pub fn nearest_peak(&self, frequency: f64) -> Option<Peak> {
        self.peaks.iter().copied().min_by(|a, b| (a.frequency - frequency).abs().total_cmp(&(b.frequency - frequency).abs()))
    }
}

fn check_uniform(x: &[f64]) -> Result<f64> {
    if x.len() < MIN_POINTS {
        return Err(Error::Config(format!("dhva_fft needs at least {MIN_POINTS} grid points (got {})", x.len())));
    }
    let n = x.len();
    let dx = (x[n - 1] - x[0]) / (n - 1) as f64;
    if !(dx > 0.0) {
        return Err(Error::Config("dhva_fft needs an increasing 1/ħ grid".into()));
    }
    for (i, xi) in x.iter().enumerate() {
        let expected = x[0] + i as f64 * dx;
        if (xi - expected).abs() > 1e-6 * dx {
            return Err(Error::Config(format!("non-uniform 1/ħ grid at index {i}: {xi} (expected {expected})")));
        }
    }
    Ok(dx)
}

/// Mean-subtracted, Hann-windowed, zero-padded FFT of `y` sampled at the uniform grid `x` (= 1/ħ).
pub fn dhva_fft(x: &[f64], y: &[f64], opts: &FftOptions) -> Result<Spectrum> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    let dx = check_uniform(x)?;
    let n = x.len();
    let span = dx * (n - 1) as f64;
    let mean = y.iter().sum::<f64>() / n as f64;
    let window: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect();
    let gain: f64 = window.iter().sum();
    let len = n.next_power_of_two() * opts.padding.max(1);
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|i| if i < n { Complex::new((y[i] - mean) * window[i], 0.0) } else { Complex::new(0.0, 0.0) })
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let half = len / 2;
    let df = 1.0 / (len as f64 * dx);
    let frequencies: Vec<f64> = (0..=half).map(|k| k as f64 * df).collect();
    let amplitudes: Vec<f64> = buf[..=half].iter().map(|c| 2.0 * c.norm() / gain).collect();

    let top = amplitudes.iter().cloned().fold(0.0, f64::max);
    let mut sorted = amplitudes.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let floor = (opts.relative_threshold * top).max(opts.noise_factor * median);
    let mut peaks = Vec::new();
    if top > 0.0 && top > 1e3 * f64::EPSILON * y.iter().fold(0.0f64, |a, v| a.max(v.abs())) {
        for k in 1..half {
            let (l, c, r) = (amplitudes[k - 1], amplitudes[k], amplitudes[k + 1]);
            if c > l && c >= r && c > floor {
                // parabolic refinement of the bin position
                let denom = l - 2.0 * c + r;
                let shift = if denom.abs() > 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
                peaks.push(Peak { frequency: (k as f64 + shift) * df, amplitude: c - 0.25 * (l - r) * shift });
            }
        }
    }
    Ok(Spectrum { resolution: 1.0 / span, frequencies, amplitudes, peaks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| 100.0 + 200.0 * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn single_tone() {
        // Nyquist frequency of this grid is about 5.1
        let x = grid(2048);
        let s = 2.0 * PI * 3.0;
        let y: Vec<f64> = x.iter().map(|v| 0.7 * (s * v).cos()).collect();
        let spec = dhva_fft(&x, &y, &FftOptions::default()).unwrap();
        assert_eq!(spec.peaks.len(), 1, "{:?}", spec.peaks);
        let p = spec.peaks[0];
        assert!((p.frequency - 3.0).abs() < spec.resolution);
        assert!((p.amplitude - 0.7).abs() < 0.02, "{}", p.amplitude);
    }

    #[test]
    fn two_tones_resolved() {
        let x = grid(512);
        let y: Vec<f64> = x.iter().map(|v| (2.0 * PI * 0.27 * v + 0.3).cos() + 0.4 * (2.0 * PI * 0.65 * v).sin()).collect();
        let spec = dhva_fft(&x, &y, &FftOptions::default()).unwrap();
        let a = spec.nearest_peak(0.27).unwrap();
        let b = spec.nearest_peak(0.65).unwrap();
        assert!((a.frequency - 0.27).abs() < spec.resolution && (b.frequency - 0.65).abs() < spec.resolution);
        assert!((b.amplitude / a.amplitude - 0.4).abs() < 0.02);
    }

    #[test]
    fn zero_signal_has_no_peaks() {
        let x = grid(300);
        let spec = dhva_fft(&x, &vec![0.0; 300], &FftOptions::default()).unwrap();
        assert!(spec.peaks.is_empty());
        let spec = dhva_fft(&x, &vec![2.5; 300], &FftOptions::default()).unwrap();
        assert!(spec.peaks.is_empty());
    }

    #[test]
    fn rejects_bad_grids() {
        let mut x = grid(512);
        x[100] += 0.05;
        assert!(dhva_fft(&x, &vec![0.0; 512], &FftOptions::default()).is_err());
        let x = grid(200);
        assert!(dhva_fft(&x, &vec![0.0; 200], &FftOptions::default()).is_err());
    }
}
